"""Command-line entry point: pipeline, solve, sweep, partition, bench.

Exit status is 0 on success, 1 when a stage fails and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .bench import emit_report, run_benchmark, system_inputs_from_datasets
from .cascade import cluster_name, load_bundle, save_bundle, train_tree
from .feeder import FeederError, iter_sections, load_feeder
from .neural import MlpConfig, grid_search
from .partition import ClusterTree, GranularityPolicy, partition_feeder
from .solver import SolverOptions, solve_fixed_point
from .synth import (
    CompandingConfig,
    generate_datasets,
    load_datasets_npz,
    save_datasets_npz,
    shape_library,
    synthetic_base_shape,
    write_dataset_csv,
    write_manifest,
)

log = logging.getLogger("hierflow")

EXIT_OK, EXIT_STAGE, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class PartitionSettings:
    min_size: int = 5
    max_size: int = 25
    max_levels: int = 2
    seed: int = 0
    trials: int = 10


@dataclass
class SynthesisSettings:
    n_samples: int = 2000
    base_seed: int = 1
    companding_seed: int = 2
    split_seed: int = 7
    jitter: float = 0.01
    window: int = 3
    samples_per_day: int = 96
    mu: tuple[float, ...] = ()
    directions: tuple[str, ...] = ()


@dataclass
class BenchSettings:
    repeats: int = 20
    parallel: bool = False


@dataclass
class RunConfig:
    feeder: Path
    output: Path
    partition: PartitionSettings = field(default_factory=PartitionSettings)
    synthesis: SynthesisSettings = field(default_factory=SynthesisSettings)
    training: MlpConfig = field(default_factory=MlpConfig)
    sweep: dict[str, list[Any]] = field(default_factory=dict)
    sweep_cluster: int = 0
    bench: BenchSettings = field(default_factory=BenchSettings)

    def with_seed(self, seed: int) -> "RunConfig":
        """Every seed in the run replaced by ``seed``."""
        return dataclasses.replace(
            self,
            partition=dataclasses.replace(self.partition, seed=seed),
            synthesis=dataclasses.replace(self.synthesis, base_seed=seed, companding_seed=seed, split_seed=seed),
            training=dataclasses.replace(self.training, seed=seed),
        )


def _convert(raw: list[str], kind, key: str, lineno: int):
    def one(tok):
        if kind is bool:
            if tok.lower() in ("true", "yes", "1"):
                return True
            if tok.lower() in ("false", "no", "0"):
                return False
            raise ConfigError(f"line {lineno}: {key} expects true/false, got {tok!r}")
        if tok.lower() == "none":
            return None
        try:
            return kind(tok)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {tok!r}") from None

    return [one(t) for t in raw]


def _field_kinds(cls) -> dict[str, type]:
    kinds = {}
    for f in dataclasses.fields(cls):
        t = str(f.type)
        if "tuple" in t:
            kinds[f.name] = str if "str" in t else float
        elif "bool" in t:
            kinds[f.name] = bool
        elif "int" in t:
            kinds[f.name] = int
        elif "float" in t:
            kinds[f.name] = float
        else:
            kinds[f.name] = str
    return kinds


def _apply(obj, values: dict[str, tuple[list[str], int]], section: str):
    kinds = _field_kinds(type(obj))
    changes = {}
    for key, (raw, lineno) in values.items():
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        vals = _convert(raw, kinds[key], key, lineno)
        is_tuple = "tuple" in str(next(f.type for f in dataclasses.fields(obj) if f.name == key))
        if is_tuple:
            changes[key] = tuple(vals)
        elif len(vals) != 1:
            raise ConfigError(f"line {lineno}: {key} takes one value")
        else:
            changes[key] = vals[0]
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(text: str, base_dir: Path) -> RunConfig:
    """Read a run configuration written in the feeder file's section dialect."""
    sections: dict[str, dict[str, tuple[list[str], int]]] = {}
    try:
        for section, lineno, toks in iter_sections(text):
            words = [t for t, _ in toks]
            if len(words) < 2:
                raise ConfigError(f"line {lineno}: expected 'key value ...'")
            entries = sections.setdefault(section, {})
            if words[0] in entries:
                raise ConfigError(f"line {lineno}: duplicate key {words[0]!r}")
            entries[words[0]] = (words[1:], lineno)
    except FeederError as exc:
        raise ConfigError(str(exc)) from None
    known = {"feeder", "output", "partition", "synthesis", "training", "sweep", "bench"}
    unknown = set(sections) - known
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    if "path" not in sections.get("feeder", {}):
        raise ConfigError("[feeder] must define 'path'")
    feeder = base_dir / sections["feeder"]["path"][0][0]
    out_raw = sections.get("output", {}).get("dir")
    output = base_dir / out_raw[0][0] if out_raw else Path("out")

    cfg = RunConfig(feeder, output)
    cfg.partition = _apply(cfg.partition, sections.get("partition", {}), "partition")
    cfg.synthesis = _apply(cfg.synthesis, sections.get("synthesis", {}), "synthesis")
    cfg.training = _apply(cfg.training, sections.get("training", {}), "training")
    cfg.bench = _apply(cfg.bench, sections.get("bench", {}), "bench")
    sweep = dict(sections.get("sweep", {}))
    if "cluster" in sweep:
        raw, lineno = sweep.pop("cluster")
        cfg.sweep_cluster = _convert(raw, int, "cluster", lineno)[0]
    kinds = _field_kinds(MlpConfig)
    for key, (raw, lineno) in sweep.items():
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [sweep]")
        cfg.sweep[key] = _convert(raw, kinds[key], key, lineno)
    return cfg


def load_config(path: Path | str) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), p.parent)


def _digest(*parts: Any) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(json.dumps(part, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _stage(name: str, fn, *args, note: str = "", **kwargs):
    log.info("stage %s%s", name, f": {note}" if note else "")
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # any failure inside a stage is reported with the stage name
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def _load_feeder(cfg: RunConfig):
    if not cfg.feeder.is_file():
        raise StageError("parse", f"feeder file not found: {cfg.feeder}")
    return _stage("parse", load_feeder, cfg.feeder)


def _partition(cfg: RunConfig, f):
    p = cfg.partition
    policy = GranularityPolicy(p.min_size, p.max_size, p.max_levels)
    _, tree = _stage("partition", partition_feeder, f, policy, seed=p.seed, trials=p.trials)
    return tree


def _datasets(cfg: RunConfig, f, tree: ClusterTree, out: Path, workers: int):
    s = cfg.synthesis
    key = _digest(f.digest(), tree.to_dict(), dataclasses.asdict(s))
    cache = out / "cache" / f"datasets-{key}.npz"
    if cache.is_file():
        return _stage("datasets", load_datasets_npz, cache, note=f"skipped, cache hit {cache.name}"), key

    def build():
        base = synthetic_base_shape(s.n_samples, s.samples_per_day, seed=s.base_seed)
        shapes = shape_library(f, base, CompandingConfig(s.mu, s.directions, s.jitter, s.companding_seed))
        ds, bank = generate_datasets(f, tree, shapes, s.n_samples, s.split_seed, window=s.window, workers=workers)
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_datasets_npz(ds, cache)
        for d in ds.values():
            write_dataset_csv(d, out / "datasets")
        companding = {sid: {"mu": sh.mu, "direction": sh.direction} for sid, sh in shapes.items()}
        return ds, int((~bank.converged).sum()), companding

    ds, dropped, companding = _stage("datasets", build)
    first = ds[tree.top.id]
    write_manifest(
        out / "datasets" / "manifest.json",
        key=key,
        feeder_hash=f.digest(),
        n_samples=s.n_samples,
        synthesis=dataclasses.asdict(s),
        shapes=companding,
        dropped_nonconvergent=dropped,
        median_filter={"window": s.window, "columns": "inputs and outputs"},
        train_samples=first.samples[first.train],
        test_samples=first.samples[first.test],
    )
    return ds, key


def _train(cfg: RunConfig, f, tree, ds, data_key: str, out: Path, workers: int):
    key = _digest(data_key, dataclasses.asdict(cfg.training))
    bundle = out / "bundle"
    manifest = bundle / "manifest.json"
    if manifest.is_file() and json.loads(manifest.read_text()).get("train_key") == key:
        return _stage("train", load_bundle, bundle, note=f"skipped, bundle matches {key}")

    def build():
        cm = train_tree(tree, ds, cfg.training, feeder=f, workers=workers)
        cm.meta.update(train_key=key, data_key=data_key, partition_seed=cfg.partition.seed)
        save_bundle(cm, bundle)
        return cm

    return _stage("train", build)


def _bench(cfg: RunConfig, f, cm, ds, out: Path, workers: int):
    def run():
        x, samples = system_inputs_from_datasets(cm, ds)
        manifest = out / "datasets" / "manifest.json"
        train = np.array(json.loads(manifest.read_text())["train_samples"]) if manifest.is_file() else None
        report = run_benchmark(
            cm,
            f,
            x,
            samples=samples,
            train_samples=train,
            repeats=cfg.bench.repeats,
            parallel=cfg.bench.parallel,
            workers=workers,
        )
        emit_report(report, out / "report")
        return report

    return _stage("bench", run)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _prepare(args) -> tuple[RunConfig, Path, int]:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    out = Path(args.out) if args.out else cfg.output
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out, args.workers


def cmd_pipeline(args) -> int:
    cfg, out, workers = _prepare(args)
    f = _load_feeder(cfg)
    tree = _partition(cfg, f)
    (out / "partition.json").write_text(tree.dumps() + "\n")
    ds, key = _datasets(cfg, f, tree, out, workers)
    cm = _train(cfg, f, tree, ds, key, out, workers)
    report = _bench(cfg, f, cm, ds, out, workers)
    w = report.worst()
    print(
        f"clusters={len(tree)} layers={len(tree.layers())} "
        f"vmag_mae={w['vmag_mae_pct']:.4f}% angle_mae={w['angle_mae_deg']:.4f}deg "
        f"head_s_mape={w['head_s_mape_pct']:.3f}% speedup={report.speedup:.1f}x"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg, out, workers = _prepare(args)
    f = _load_feeder(cfg)
    bundle = out / "bundle"
    if not (bundle / "manifest.json").is_file():
        raise StageError("bench", f"no trained bundle in {bundle}; run the pipeline first")
    cm = _stage("bench", load_bundle, bundle)
    if cm.meta.get("feeder_hash") not in (None, f.digest()):
        raise StageError("bench", "bundle was trained on a different feeder")
    ds, _ = _datasets(cfg, f, cm.tree, out, workers)
    report = _bench(cfg, f, cm, ds, out, workers)
    print(f"t_ats={report.timing.t_ats:.6f}s oracle={report.oracle_time:.6f}s speedup={report.speedup:.1f}x")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, out, workers = _prepare(args)
    if not cfg.sweep:
        raise ConfigError("[sweep] section defines no options")
    f = _load_feeder(cfg)
    tree = _partition(cfg, f)
    if cfg.sweep_cluster not in {c.id for c in tree.clusters}:
        raise ConfigError(f"sweep cluster {cfg.sweep_cluster} is not in the partition")
    ds, _ = _datasets(cfg, f, tree, out, workers)
    results = _stage("sweep", grid_search, ds[cfg.sweep_cluster], cfg.sweep, cfg.training, workers)
    path = out / "sweep.csv"
    keys = list(cfg.sweep)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank"] + keys + ["val_mae"])
        for rank, r in enumerate(results, start=1):
            w.writerow([rank] + [getattr(r.config, k) for k in keys] + [repr(r.val_mae)])
    print(path)
    return EXIT_OK


def cmd_partition(args) -> int:
    if args.config:
        cfg, out, _ = _prepare(args)
    elif args.feeder:
        cfg = RunConfig(Path(args.feeder), Path(args.out or "."))
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
        out = cfg.output
        out.mkdir(parents=True, exist_ok=True)
    else:
        raise ConfigError("partition needs a feeder path or --config")
    f = _load_feeder(cfg)
    tree = _partition(cfg, f)
    (out / "partition.json").write_text(tree.dumps() + "\n")
    for c in tree.clusters:
        parent = "-" if c.parent is None else cluster_name(c.parent)
        print(f"{cluster_name(c.id)} layer={c.layer} parent={parent} head={c.head} size={len(c.nodes)}")
    return EXIT_OK


def _read_multipliers(path: str, n: int) -> np.ndarray:
    text = Path(path).read_text().replace(",", " ").split()
    try:
        m = np.array([float(t) for t in text])
    except ValueError as exc:
        raise StageError("solve", f"malformed multipliers file {path}: {exc}") from None
    if m.size != n:
        raise StageError("solve", f"malformed multipliers file {path}: expected {n} values, found {m.size}")
    return m


def cmd_solve(args) -> int:
    if not Path(args.feeder).is_file():
        raise StageError("parse", f"feeder file not found: {args.feeder}")
    f = _stage("parse", load_feeder, args.feeder)
    m = _read_multipliers(args.multipliers, len(f.loads)) if args.multipliers else np.ones(len(f.loads))
    opts = SolverOptions(tolerance=args.tolerance, max_iterations=args.max_iterations)
    sol = _stage("solve", solve_fixed_point, f, m, opts)
    if not sol.converged:
        raise StageError("solve", f"did not converge after {sol.iterations} iterations; final mismatch {sol.mismatch:.3e} pu")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["bus", "phase", "vmag_pu", "vang_deg"])
    for (bus, phase), vm, va in zip(sol.index, sol.vmag, sol.vang_deg):
        w.writerow([bus, phase, f"{vm:.10f}", f"{va:.8f}"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--seed-override", type=int, default=None, help="replace every seed in the config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hierflow", description="Hierarchical neural power-flow surrogate toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (
        ("pipeline", cmd_pipeline, "partition, synthesize, train and benchmark"),
        ("sweep", cmd_sweep, "grid search on one cluster"),
        ("bench", cmd_bench, "re-run the benchmark on a trained bundle"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--config", required=True)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("partition", parents=[common], help="partition a feeder into a cluster tree")
    sp.add_argument("feeder", nargs="?")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_partition)
    sp = sub.add_parser("solve", parents=[common], help="run the fixed-point oracle; CSV on stdout")
    sp.add_argument("feeder")
    sp.add_argument("--multipliers", help="one multiplier per load, in declaration order")
    sp.add_argument("--tolerance", type=float, default=1e-8)
    sp.add_argument("--max-iterations", type=int, default=200)
    sp.set_defaults(func=cmd_solve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: stage {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
