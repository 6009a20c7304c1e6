"""The hierarchical network array: wiring, bottom-up inference and timing.

Each cluster model sees its own load P/Q plus, for every child cluster, the
six head-power values that child predicts. Training uses ground-truth head
powers in those slots; inference uses the children's predictions.
"""

from __future__ import annotations

import json
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .feeder import Feeder
from .layout import LOAD_QUANTITIES, IoLayout, Slot, allocate_io, check_layouts
from .neural import MlpConfig, MlpModel, TrainReport, TrainingDivergedError, load_model, predict_mlp, save_model, train_mlp
from .partition import ClusterTree

__all__ = [
    "IoLayout",
    "allocate_io",
    "CascadeModel",
    "CascadePrediction",
    "TimingRecord",
    "train_tree",
    "predict_cascade",
    "critical_path_time",
    "timing_record",
    "cluster_name",
    "save_bundle",
    "load_bundle",
]


class CascadeError(Exception):
    pass


def cluster_name(cid: int) -> str:
    letters = string.ascii_uppercase
    return letters[cid] if cid < 26 else f"C{cid}"


def critical_path_time(tr: "TimingRecord | Mapping[int, float]", tree: ClusterTree) -> float:
    """Longest root-to-leaf path of summed per-cluster times.

    A parent can only start once its children have finished, while clusters
    on different branches run side by side.
    """
    times = tr.cluster_times if isinstance(tr, TimingRecord) else tr
    missing = [c.id for c in tree.clusters if c.id not in times]
    if missing:
        raise KeyError(f"no recorded time for clusters {missing}")
    return max(sum(times[c] for c in path) for path in tree.paths())


@dataclass(frozen=True)
class TimingRecord:
    cluster_times: dict[int, float]
    layer_max: tuple[float, ...]
    path_sums: tuple[tuple[tuple[int, ...], float], ...]
    t_ats: float


def timing_record(tree: ClusterTree, times: Mapping[int, float]) -> TimingRecord:
    times = {int(k): float(v) for k, v in times.items()}
    t_ats = critical_path_time(times, tree)
    layer_max = tuple(max(times[c] for c in layer) for layer in tree.layers())
    paths = tuple((tuple(p), sum(times[c] for c in p)) for p in tree.paths())
    return TimingRecord(times, layer_max, paths, t_ats)


def system_input_legend(layouts: Mapping[int, IoLayout], f: Feeder) -> tuple[Slot, ...]:
    """Every load slot of every cluster, in feeder bus order."""
    order = f.bus_order()
    slots = {s for lay in layouts.values() for s in lay.inputs if s.quantity in LOAD_QUANTITIES}
    return tuple(sorted(slots, key=lambda s: (order[s.bus], s.phase, s.quantity)))


@dataclass(eq=False)
class CascadePrediction:
    outputs: dict[int, np.ndarray]  # per cluster, rows x layout outputs
    inputs: dict[int, np.ndarray]  # per cluster, the exact inputs each model consumed
    timing: TimingRecord

    def voltage_table(self, layouts: Mapping[int, IoLayout]) -> dict[tuple[str, str], tuple[np.ndarray, np.ndarray]]:
        """(bus, phase) -> (Vmag, Vang) columns gathered across clusters."""
        out: dict[tuple[str, str], list] = {}
        for cid, lay in layouts.items():
            y = self.outputs[cid]
            for k, s in enumerate(lay.outputs):
                if s.quantity in ("Vmag", "Vang"):
                    entry = out.setdefault((s.bus, s.phase), [None, None])
                    if entry[s.quantity == "Vang"] is not None:
                        raise CascadeError(f"node-phase {s.bus}.{s.phase} predicted twice")
                    entry[s.quantity == "Vang"] = y[:, k]
        return {k: (v[0], v[1]) for k, v in out.items()}

    def head_power(self, cid: int, layout: IoLayout) -> np.ndarray:
        """Rows of (P_A, P_B, P_C, Q_A, Q_B, Q_C) predicted at the cluster head."""
        cols = {(layout.outputs[k].quantity[0], layout.outputs[k].phase): k for k in layout.head_slots()}
        return self.outputs[cid][:, [cols[(q, p)] for q in "PQ" for p in "ABC"]]


@dataclass(eq=False)
class CascadeModel:
    tree: ClusterTree
    layouts: dict[int, IoLayout]
    models: dict[int, MlpModel]
    reports: dict[int, TrainReport] = field(default_factory=dict)
    system_legend: tuple[Slot, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [c.id for c in self.tree.clusters if c.id not in self.models]
        if missing:
            raise CascadeError(f"clusters without a model: {missing}")
        problems = check_layouts(self.tree, self.layouts)
        if problems:
            raise CascadeError("; ".join(problems))
        for cid, m in self.models.items():
            lay = self.layouts[cid]
            if m.n_in != lay.n_in or m.n_out != lay.n_out:
                raise CascadeError(f"cluster {cid}: model shape does not match its layout")
        if not self.system_legend:
            slots = [s for lay in self.layouts.values() for s in lay.inputs if s.quantity in LOAD_QUANTITIES]
            self.system_legend = tuple(dict.fromkeys(sorted(slots)))
        pos = {s: k for k, s in enumerate(self.system_legend)}
        self._load_cols = {}
        for cid, lay in self.layouts.items():
            idx = lay.load_slots()
            missing_slots = [lay.inputs[k] for k in idx if lay.inputs[k] not in pos]
            if missing_slots:
                raise CascadeError(f"cluster {cid}: load slots absent from the system legend")
            self._load_cols[cid] = (np.array(idx, dtype=int), np.array([pos[lay.inputs[k]] for k in idx], dtype=int))
        self._fed_cols = {}
        for c in self.tree.clusters:
            lay = self.layouts[c.id]
            wiring = []
            for k in c.children:
                child = self.layouts[k]
                wiring.append((k, np.array(lay.fed_slots(self.tree[k].head)), np.array(child.head_slots())))
            self._fed_cols[c.id] = wiring

    def predict(self, system_inputs, parallel: bool = False, workers: int | None = None) -> CascadePrediction:
        return predict_cascade(self, system_inputs, parallel=parallel, workers=workers)

    def cluster_inputs(self, cid: int, system_inputs: np.ndarray, child_outputs: Mapping[int, np.ndarray]) -> np.ndarray:
        lay = self.layouts[cid]
        x = np.zeros((system_inputs.shape[0], lay.n_in))
        dst, src = self._load_cols[cid]
        x[:, dst] = system_inputs[:, src]
        for child, fed, head in self._fed_cols[cid]:
            x[:, fed] = child_outputs[child][:, head]
        return x


def train_tree(
    tree: ClusterTree,
    datasets: Mapping[int, object],
    cfg: MlpConfig = MlpConfig(),
    layouts: Mapping[int, IoLayout] | None = None,
    feeder: Feeder | None = None,
    workers: int = 1,
) -> CascadeModel:
    """Train one model per cluster on ground-truth inputs; cluster k uses seed cfg.seed + k."""
    missing = [c.id for c in tree.clusters if c.id not in datasets]
    if missing:
        raise CascadeError(f"no dataset for cluster(s) {missing}")
    if layouts is None:
        if feeder is None:
            layouts = {
                c.id: IoLayout(c.id, tuple(datasets[c.id].input_legend), tuple(datasets[c.id].output_legend))
                for c in tree.clusters
            }
        else:
            layouts = allocate_io(tree, feeder)
    for c in tree.clusters:
        ds = datasets[c.id]
        if tuple(ds.input_legend) != layouts[c.id].inputs or tuple(ds.output_legend) != layouts[c.id].outputs:
            raise CascadeError(f"dataset for cluster {c.id} does not match its layout")

    def fit(cid):
        try:
            return train_mlp(datasets[cid], replace(cfg, seed=cfg.seed + cid))
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"cluster {cid}: {exc}") from exc

    ids = [c.id for c in tree.clusters]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fitted = list(pool.map(fit, ids))
    else:
        fitted = [fit(cid) for cid in ids]
    legend = system_input_legend(layouts, feeder) if feeder is not None else ()
    meta = {"seed": cfg.seed}
    if feeder is not None:
        meta["feeder_hash"] = feeder.digest()
    return CascadeModel(
        tree,
        dict(layouts),
        {cid: m for cid, (m, _) in zip(ids, fitted)},
        {cid: r for cid, (_, r) in zip(ids, fitted)},
        legend,
        meta,
    )


def predict_cascade(
    cm: CascadeModel, system_inputs, parallel: bool = False, workers: int | None = None
) -> CascadePrediction:
    """Evaluate the deepest layer first, feeding predicted head powers upward.

    With ``parallel`` the clusters of one layer run concurrently; layers are
    separated by a barrier. Per-cluster wall times are recorded either way.
    """
    if hasattr(cm, "predict") and not isinstance(cm, CascadeModel):
        return cm.predict(system_inputs)
    x_sys = np.atleast_2d(np.asarray(system_inputs, dtype=float))
    if x_sys.shape[1] != len(cm.system_legend):
        raise CascadeError(f"expected {len(cm.system_legend)} system inputs, got {x_sys.shape[1]}")
    outputs: dict[int, np.ndarray] = {}
    inputs: dict[int, np.ndarray] = {}
    times: dict[int, float] = {}

    def run(cid):
        t0 = time.perf_counter()
        x = cm.cluster_inputs(cid, x_sys, outputs)
        y = predict_mlp(cm.models[cid], x, check_range=False)
        return cid, x, y, time.perf_counter() - t0

    pool = ThreadPoolExecutor(max_workers=workers) if parallel else None
    try:
        for layer in cm.tree.bottom_up():
            results = list(pool.map(run, layer)) if pool else [run(cid) for cid in layer]
            for cid, x, y, dt in results:
                inputs[cid], outputs[cid], times[cid] = x, y, dt
    finally:
        if pool:
            pool.shutdown()
    return CascadePrediction(outputs, inputs, timing_record(cm.tree, times))


def check_wiring(cm: CascadeModel, pred: CascadePrediction) -> list[str]:
    """Slot-wise exact comparison of child head outputs and parent fed inputs."""
    problems = []
    for c in cm.tree.clusters:
        for child, fed, head in cm._fed_cols[c.id]:
            if not np.array_equal(pred.inputs[c.id][:, fed], pred.outputs[child][:, head]):
                problems.append(f"cluster {c.id} fed slots differ from child {child} head outputs")
    return problems


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


def save_bundle(cm: CascadeModel, directory: Path | str) -> Path:
    d = Path(directory)
    (d / "models").mkdir(parents=True, exist_ok=True)
    (d / "partition.json").write_text(cm.tree.dumps() + "\n")
    for cid, m in cm.models.items():
        save_model(m, d / "models" / f"cluster_{cid}.json")
    manifest = dict(cm.meta)
    manifest["layouts"] = {str(cid): lay.to_dict() for cid, lay in cm.layouts.items()}
    manifest["system_legend"] = [s.label for s in cm.system_legend]
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_bundle(directory: Path | str) -> CascadeModel:
    d = Path(directory)
    tree = ClusterTree.from_dict(json.loads((d / "partition.json").read_text()))
    manifest = json.loads((d / "manifest.json").read_text())
    layouts = {int(k): IoLayout.from_dict(v) for k, v in manifest.pop("layouts").items()}
    legend = tuple(Slot.parse(s) for s in manifest.pop("system_legend"))
    models = {c.id: load_model(d / "models" / f"cluster_{c.id}.json") for c in tree.clusters}
    return CascadeModel(tree, layouts, models, {}, legend, manifest)
