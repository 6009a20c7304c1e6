"""Load-shape synthesis, oracle sampling and per-cluster dataset assembly."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import median_filter

from .feeder import Feeder
from .layout import IoLayout, Slot, allocate_io
from .partition import ClusterTree
from .solver import SolverOptions, branch_power_batch, network_model, solve_many

log = logging.getLogger(__name__)

MAX_NONCONVERGED_FRACTION = 0.10
TEST_FRACTION = 0.2


class DatasetError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class LoadShape:
    id: str
    multipliers: np.ndarray
    mu: float | None = None  # companding parameter, when the shape came from a family
    direction: str | None = None

    def __post_init__(self):
        m = np.asarray(self.multipliers, dtype=float)
        if m.ndim != 1 or m.size == 0:
            raise ValueError(f"load shape {self.id}: needs a non-empty vector")
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError(f"load shape {self.id}: multipliers must lie in [0, 1]")
        object.__setattr__(self, "multipliers", m)

    def __len__(self):
        return self.multipliers.size


@dataclass(frozen=True)
class CompandingConfig:
    """Parameters of a companded family.

    ``mu_values``/``directions`` fix each variant explicitly; when left empty,
    mu is drawn log-uniformly from [1, 255] and variants alternate between
    compress and expand.
    """

    mu_values: tuple[float, ...] = ()
    directions: tuple[str, ...] = ()
    jitter_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if any(not mu > 0 for mu in self.mu_values):
            raise ValueError("mu must be positive")
        if any(d not in ("compress", "expand") for d in self.directions):
            raise ValueError("direction must be 'compress' or 'expand'")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")


def mu_law_compress(x, mu: float) -> np.ndarray:
    if not mu > 0:
        raise ValueError("mu must be positive")
    x = np.asarray(x, dtype=float)
    return np.log1p(mu * x) / math.log1p(mu)


def mu_law_expand(y, mu: float) -> np.ndarray:
    if not mu > 0:
        raise ValueError("mu must be positive")
    y = np.asarray(y, dtype=float)
    return np.expm1(y * math.log1p(mu)) / mu


def mu_law_family(base: LoadShape, cfg: CompandingConfig, count: int, ids: Sequence[str] | None = None) -> list[LoadShape]:
    """``count`` companded variants of ``base`` with clipped relative Gaussian jitter."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    mus = list(cfg.mu_values)
    dirs = list(cfg.directions)
    out = []
    for k in range(count):
        mu = mus[k] if k < len(mus) else float(np.exp(rng.uniform(0.0, math.log(255.0))))
        direction = dirs[k] if k < len(dirs) else ("compress" if k % 2 == 0 else "expand")
        y = mu_law_compress(base.multipliers, mu) if direction == "compress" else mu_law_expand(base.multipliers, mu)
        if cfg.jitter_sigma > 0:
            y = y * (1.0 + cfg.jitter_sigma * rng.standard_normal(y.size))
        y = np.clip(y, 0.0, 1.0)
        sid = ids[k] if ids is not None else f"{base.id}_{k}"
        out.append(LoadShape(sid, y, mu, direction))
    return out


def synthetic_base_shape(n: int, samples_per_day: int = 96, seed: int = 0, shape_id: str = "base") -> LoadShape:
    """Residential-looking profile: morning and evening peaks, weekly and seasonal drift.

    Normalized so the maximum is 1; the minimum sits around 0.3.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n) / samples_per_day  # days
    hour = (t % 1.0) * 24
    daily = 0.35 * np.exp(-0.5 * ((hour - 8.0) / 1.8) ** 2) + 0.6 * np.exp(-0.5 * ((hour - 19.5) / 2.5) ** 2)
    weekly = 0.08 * np.sin(2 * np.pi * t / 7.0 + rng.uniform(0, 2 * np.pi))
    seasonal = 0.1 * np.sin(2 * np.pi * t / 365.0 + rng.uniform(0, 2 * np.pi))
    x = 0.45 + daily + weekly + seasonal
    x = np.clip(x, 1e-3, None)
    return LoadShape(shape_id, x / x.max())


def moving_median(series, window: int = 3) -> np.ndarray:
    """Sliding median along the first axis with replicated edges; length preserved."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    a = np.asarray(series, dtype=float)
    if a.size == 0:
        raise ValueError("series must be non-empty")
    if window == 1:
        return a.copy()
    size = (window,) + (1,) * (a.ndim - 1)
    return median_filter(a, size=size, mode="nearest")


def shape_library(f: Feeder, base: LoadShape, cfg: CompandingConfig) -> dict[str, LoadShape]:
    """One companded variant per distinct shape id referenced by the feeder's loads."""
    ids = sorted({ld.shape_id for ld in f.loads})
    if not ids:
        return {}
    return {s.id: s for s in mu_law_family(base, cfg, len(ids), ids)}


def multiplier_matrix(f: Feeder, shapes: dict[str, LoadShape], n_samples: int) -> np.ndarray:
    """Samples x loads matrix of multipliers taken from each load's shape."""
    cols = []
    for ld in f.loads:
        if ld.shape_id not in shapes:
            raise DatasetError(f"load at {ld.bus}.{ld.phase} references unknown shape {ld.shape_id!r}")
        m = shapes[ld.shape_id].multipliers
        if m.size < n_samples:
            raise DatasetError(f"shape {ld.shape_id!r} has {m.size} points, need {n_samples}")
        cols.append(m[:n_samples])
    return np.column_stack(cols) if cols else np.zeros((n_samples, 0))


def load_power_columns(f: Feeder, multipliers: np.ndarray, slots: Sequence[Slot]) -> np.ndarray:
    """Per-unit P/Q load values (positive = consumption) for the given load slots."""
    m = np.atleast_2d(multipliers)
    out = np.zeros((m.shape[0], len(slots)))
    for k, s in enumerate(slots):
        for j, ld in enumerate(f.loads):
            if ld.bus == s.bus and ld.phase == s.phase:
                base = ld.kw if s.quantity == "P_load" else ld.kvar
                out[:, k] += m[:, j] * base / f.base_kva
    return out


@dataclass(eq=False)
class SampleBank:
    """Full-feeder oracle solutions for every time sample, shared by all clusters."""

    feeder: Feeder
    multipliers: np.ndarray  # samples x loads
    index: tuple[tuple[str, str], ...]
    voltages: np.ndarray  # samples x node-phases (complex)
    converged: np.ndarray  # bool per sample
    iterations: np.ndarray
    _head_cache: dict = field(default_factory=dict, repr=False)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.converged)

    def head_power(self, parent_bus: str, child_bus: str) -> np.ndarray:
        key = (parent_bus, child_bus)
        if key not in self._head_cache:
            self._head_cache[key] = branch_power_batch(self.feeder, self.index, self.voltages, key)
        return self._head_cache[key]


def solve_samples(f: Feeder, multipliers: np.ndarray, opts: SolverOptions = SolverOptions(), workers: int = 1) -> SampleBank:
    sols = solve_many(f, multipliers, opts, workers)
    model = network_model(f)
    volts = np.array([s.voltage for s in sols]) if sols else np.zeros((0, model.n), complex)
    conv = np.array([s.converged for s in sols], dtype=bool)
    its = np.array([s.iterations for s in sols], dtype=int)
    bad = int((~conv).sum())
    if len(sols) and bad / len(sols) > MAX_NONCONVERGED_FRACTION:
        worst = max(s.mismatch for s in sols if not s.converged)
        raise DatasetError(
            f"{bad} of {len(sols)} samples did not converge (worst mismatch {worst:.3e} pu); limit is "
            f"{MAX_NONCONVERGED_FRACTION:.0%}"
        )
    if bad:
        log.warning("excluding %d non-convergent samples", bad)
    return SampleBank(f, np.asarray(multipliers, dtype=float), model.index, volts, conv, its)


@dataclass(frozen=True, eq=False)
class ClusterDataset:
    inputs: np.ndarray
    outputs: np.ndarray
    train: np.ndarray
    test: np.ndarray
    input_legend: tuple[Slot, ...]
    output_legend: tuple[Slot, ...]
    samples: np.ndarray  # time-sample index of each row
    cluster: int = 0

    def __post_init__(self):
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError("inputs and outputs must have the same number of rows")
        if self.inputs.shape[1] != len(self.input_legend) or self.outputs.shape[1] != len(self.output_legend):
            raise ValueError("legend does not match column count")
        if np.intersect1d(self.train, self.test).size:
            raise ValueError("train and test rows overlap")

    @classmethod
    def from_arrays(cls, x, y, seed: int = 0, test_fraction: float = TEST_FRACTION) -> "ClusterDataset":
        """Wrap plain arrays (columns named x0.., y0..) with a shuffled split."""
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        y = np.asarray(y, dtype=float).reshape(len(y), -1)
        train, test = split_rows(len(x), seed, test_fraction)
        return cls(
            x,
            y,
            train,
            test,
            tuple(Slot(f"x{k}", "-", "x") for k in range(x.shape[1])),
            tuple(Slot(f"y{k}", "-", "y") for k in range(y.shape[1])),
            np.arange(len(x)),
        )

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]


def split_rows(n: int, seed: int, test_fraction: float = TEST_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled 80/20 split of row indices; both index sets are returned sorted."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _columns(bank: SampleBank, tree: ClusterTree, slots: Sequence[Slot], rows: np.ndarray) -> np.ndarray:
    f = bank.feeder
    pos = {np_: k for k, np_ in enumerate(bank.index)}
    heads = {tree[c.id].head: c for c in tree.clusters if c.parent is not None}
    out = np.zeros((rows.size, len(slots)))
    load_slots = [k for k, s in enumerate(slots) if s.quantity in ("P_load", "Q_load")]
    if load_slots:
        out[:, load_slots] = load_power_columns(f, bank.multipliers[rows], [slots[k] for k in load_slots])
    phase_col = {"A": 0, "B": 1, "C": 2}
    for k, s in enumerate(slots):
        if s.quantity == "Vmag":
            out[:, k] = np.abs(bank.voltages[rows, pos[(s.bus, s.phase)]])
        elif s.quantity == "Vang":
            out[:, k] = np.degrees(np.angle(bank.voltages[rows, pos[(s.bus, s.phase)]]))
        elif s.quantity in ("P_fed", "Q_fed", "P_head", "Q_head"):
            c = heads[s.bus]
            pq = bank.head_power(c.parent_bus, c.head)[rows]
            out[:, k] = pq[:, phase_col[s.phase] + (3 if s.quantity[0] == "Q" else 0)]
    return out


def generate_cluster_dataset(
    f: Feeder,
    tree: ClusterTree,
    cluster_id: int,
    shapes: dict[str, LoadShape],
    n_samples: int,
    split_seed: int,
    *,
    bank: SampleBank | None = None,
    layouts: dict[int, IoLayout] | None = None,
    window: int = 3,
) -> ClusterDataset:
    """Inputs/outputs for one cluster read from shared full-feeder solutions.

    Every column is median-filtered over time (non-convergent samples dropped
    first), then rows are split 80/20 under ``split_seed``.
    """
    if cluster_id < 0 or cluster_id >= len(tree):
        raise DatasetError(f"cluster {cluster_id} is not in the tree")
    layouts = layouts or allocate_io(tree, f)
    if bank is None:
        bank = solve_samples(f, multiplier_matrix(f, shapes, n_samples))
    rows = bank.kept
    lay = layouts[cluster_id]
    x = _columns(bank, tree, lay.inputs, rows)
    y = _columns(bank, tree, lay.outputs, rows)
    if rows.size:
        x = moving_median(x, window) if x.shape[1] else x
        y = moving_median(y, window) if y.shape[1] else y
    train, test = split_rows(rows.size, split_seed)
    return ClusterDataset(x, y, train, test, lay.inputs, lay.outputs, rows, cluster_id)


def generate_datasets(
    f: Feeder,
    tree: ClusterTree,
    shapes: dict[str, LoadShape],
    n_samples: int,
    split_seed: int,
    *,
    window: int = 3,
    opts: SolverOptions = SolverOptions(),
    workers: int = 1,
) -> tuple[dict[int, ClusterDataset], SampleBank]:
    """Datasets for every cluster from one oracle solve per time sample."""
    bank = solve_samples(f, multiplier_matrix(f, shapes, n_samples), opts, workers)
    layouts = allocate_io(tree, f)
    out = {
        c.id: generate_cluster_dataset(
            f, tree, c.id, shapes, n_samples, split_seed, bank=bank, layouts=layouts, window=window
        )
        for c in tree.clusters
    }
    return out, bank


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_dataset_csv(ds: ClusterDataset, directory: Path | str) -> list[Path]:
    """One CSV per split with the column legend as header, 9 significant digits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = ["sample"] + [s.label for s in ds.input_legend] + [s.label for s in ds.output_legend]
    paths = []
    for split, rows in (("train", ds.train), ("test", ds.test)):
        path = directory / f"cluster_{ds.cluster}_{split}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                vals = [f"{v:.9g}" for v in ds.inputs[r]] + [f"{v:.9g}" for v in ds.outputs[r]]
                w.writerow([str(int(ds.samples[r]))] + vals)
        paths.append(path)
    return paths


def save_datasets_npz(datasets: dict[int, ClusterDataset], path: Path | str) -> None:
    """Lossless cache of every cluster dataset."""
    arrays = {}
    for cid, ds in datasets.items():
        arrays[f"c{cid}_x"] = ds.inputs
        arrays[f"c{cid}_y"] = ds.outputs
        arrays[f"c{cid}_train"] = ds.train
        arrays[f"c{cid}_test"] = ds.test
        arrays[f"c{cid}_samples"] = ds.samples
        arrays[f"c{cid}_legend"] = np.array(
            json.dumps([[s.label for s in ds.input_legend], [s.label for s in ds.output_legend]])
        )
    np.savez(path, **arrays)


def load_datasets_npz(path: Path | str) -> dict[int, ClusterDataset]:
    out = {}
    with np.load(path) as z:
        cids = sorted({int(k[1:].split("_")[0]) for k in z.files})
        for cid in cids:
            ins, outs = json.loads(str(z[f"c{cid}_legend"]))
            out[cid] = ClusterDataset(
                z[f"c{cid}_x"],
                z[f"c{cid}_y"],
                z[f"c{cid}_train"],
                z[f"c{cid}_test"],
                tuple(map(Slot.parse, ins)),
                tuple(map(Slot.parse, outs)),
                z[f"c{cid}_samples"],
                cid,
            )
    return out


def write_manifest(path: Path | str, **fields) -> None:
    Path(path).write_text(json.dumps(fields, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")
