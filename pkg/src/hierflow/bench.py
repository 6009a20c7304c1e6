"""Error metrics, oracle-vs-cascade comparison, timing and report files."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cascade import (
    CascadeModel,
    CascadePrediction,
    cluster_name,
    critical_path_time,
    predict_cascade,
    timing_record,
    TimingRecord,
)
from .feeder import PHASES, Feeder
from .layout import HEAD_QUANTITIES, IoLayout, Slot
from .neural import predict_mlp
from .partition import ClusterTree
from .solver import NetworkModel, SolverOptions, branch_power_batch, network_model, solve_injections

log = logging.getLogger(__name__)

DEFAULT_REPEATS = 20


@dataclass(frozen=True)
class MetricSet:
    mae: float
    maxae: float
    mape: float | None = None  # percent
    maxape: float | None = None


def compute_metrics(truth, predicted, relative: bool = False) -> MetricSet:
    """MAE and MAXAE; with ``relative`` also MAPE and MAXAPE in percent."""
    t = np.asarray(truth, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} truth values, {p.size} predictions")
    if t.size == 0:
        raise ValueError("metrics need at least one value")
    err = np.abs(t - p)
    if not relative:
        return MetricSet(*_mean_max(err))
    if np.any(t == 0):
        raise ValueError("relative metrics undefined for zero truth values")
    rel = err / np.abs(t) * 100.0
    return MetricSet(*_mean_max(err), *_mean_max(rel))


def _mean_max(a: np.ndarray) -> tuple[float, float]:
    hi = float(a.max())
    # summation rounding can push the mean of equal values one ulp above the max
    return min(float(a.mean()), hi), hi


def angle_error(truth_deg, predicted_deg) -> np.ndarray:
    """Signed difference wrapped into [-180, 180)."""
    d = np.asarray(predicted_deg, dtype=float) - np.asarray(truth_deg, dtype=float)
    return (d + 180.0) % 360.0 - 180.0


# ---------------------------------------------------------------------------
# oracle side
# ---------------------------------------------------------------------------


def injections_from_inputs(model: NetworkModel, legend: Sequence[Slot], x: np.ndarray) -> np.ndarray:
    """Rows of per-node-phase complex injections for system load inputs."""
    x = np.atleast_2d(x)
    s = np.zeros((x.shape[0], model.n), dtype=complex)
    for k, slot in enumerate(legend):
        col = model.position.get((slot.bus, slot.phase))
        if col is None:
            # absent phase: the slot exists only to keep six values per bus
            if np.any(x[:, k] != 0):
                raise ValueError(f"{slot.label} is nonzero but the phase is not present")
            continue
        if slot.quantity == "P_load":
            s[:, col] -= x[:, k]
        elif slot.quantity == "Q_load":
            s[:, col] -= 1j * x[:, k]
        else:
            raise ValueError(f"{slot.label} is not a load slot")
    return s


@dataclass(eq=False)
class OracleBatch:
    voltages: np.ndarray  # rows x node-phases, complex
    converged: np.ndarray
    mismatch: np.ndarray
    elapsed: float


def run_oracle(f: Feeder, legend: Sequence[Slot], x: np.ndarray, opts: SolverOptions = SolverOptions()) -> OracleBatch:
    model = network_model(f)
    t0 = time.perf_counter()
    s = injections_from_inputs(model, legend, x)
    sols = [solve_injections(f, row, opts, model) for row in s]
    elapsed = time.perf_counter() - t0
    volts = np.array([sol.voltage for sol in sols]) if sols else np.zeros((0, model.n), complex)
    return OracleBatch(
        volts,
        np.array([sol.converged for sol in sols], dtype=bool),
        np.array([sol.mismatch for sol in sols]),
        elapsed,
    )


def _layout_columns(f: Feeder, tree: ClusterTree, layout: IoLayout, voltages: np.ndarray, index) -> np.ndarray:
    """Oracle values for every output slot of one layout."""
    pos = {np_: k for k, np_ in enumerate(index)}
    out = np.zeros((voltages.shape[0], layout.n_out))
    cluster = tree[layout.cluster]
    pq = None
    for k, s in enumerate(layout.outputs):
        if s.quantity == "Vmag":
            out[:, k] = np.abs(voltages[:, pos[(s.bus, s.phase)]])
        elif s.quantity == "Vang":
            out[:, k] = np.degrees(np.angle(voltages[:, pos[(s.bus, s.phase)]]))
        elif s.quantity in HEAD_QUANTITIES:
            if pq is None:
                pq = branch_power_batch(f, index, voltages, (cluster.parent_bus, cluster.head))
            out[:, k] = pq[:, PHASES.index(s.phase) + (3 if s.quantity[0] == "Q" else 0)]
    return out


class OracleLoopback:
    """Stands in for a trained cascade by answering every cluster with the oracle.

    All of the wall time lands on the top cluster, so t_ATS is the oracle batch time.
    """

    def __init__(self, cm: CascadeModel, f: Feeder, opts: SolverOptions = SolverOptions()):
        self.tree = cm.tree
        self.layouts = cm.layouts
        self.system_legend = cm.system_legend
        self.feeder = f
        self.opts = opts

    def predict(self, system_inputs, parallel: bool = False, workers: int | None = None) -> CascadePrediction:
        x = np.atleast_2d(np.asarray(system_inputs, dtype=float))
        batch = run_oracle(self.feeder, self.system_legend, x, self.opts)
        index = network_model(self.feeder).index
        outputs, inputs, times = {}, {}, {}
        for c in self.tree.clusters:
            outputs[c.id] = _layout_columns(self.feeder, self.tree, self.layouts[c.id], batch.voltages, index)
            inputs[c.id] = np.zeros((x.shape[0], self.layouts[c.id].n_in))
            times[c.id] = 0.0
        times[self.tree.top.id] = batch.elapsed
        return CascadePrediction(outputs, inputs, timing_record(self.tree, times))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ScatterData:
    quantity: str
    truth: np.ndarray  # rows x node-phases
    predicted: np.ndarray
    slots: tuple[Slot, ...]
    samples: np.ndarray


@dataclass(eq=False)
class ClusterMetrics:
    cluster: int
    name: str
    vmag: MetricSet | None  # relative, percent of truth
    angle: dict[str, MetricSet | None]  # degrees, absolute
    head_s: MetricSet | None  # phase-summed apparent power, relative
    teacher_vmag: MetricSet | None = None
    teacher_angle: MetricSet | None = None
    cascade_angle: MetricSet | None = None


@dataclass(eq=False)
class BenchmarkReport:
    clusters: list[ClusterMetrics] = field(default_factory=list)
    timing: TimingRecord | None = None
    cascade_wall: float = math.nan
    oracle_time: float = math.nan
    speedup: float = math.nan
    n_rows: int = 0
    excluded_rows: int = 0
    repeats: int = DEFAULT_REPEATS
    scatter: dict[tuple[int, str], ScatterData] = field(default_factory=dict)

    def cluster(self, cid: int) -> ClusterMetrics:
        return next(c for c in self.clusters if c.cluster == cid)

    def worst(self) -> dict[str, float]:
        """Largest per-cluster error of each headline quantity."""
        vm = [c.vmag.mape for c in self.clusters if c.vmag]
        ang = [m.mae for c in self.clusters for m in c.angle.values() if m]
        s = [c.head_s.mape for c in self.clusters if c.head_s]
        return {
            "vmag_mae_pct": max(vm, default=0.0),
            "angle_mae_deg": max(ang, default=0.0),
            "head_s_mape_pct": max(s, default=0.0),
        }


def system_inputs_from_datasets(cm: CascadeModel, datasets: Mapping[int, object], rows: str = "test"):
    """Assemble system-level load inputs for the shared test rows of the cluster datasets.

    Returns ``(inputs, sample_ids)``.
    """
    ref = None
    x = None
    filled = np.zeros(len(cm.system_legend), dtype=bool)
    pos = {s: k for k, s in enumerate(cm.system_legend)}
    for c in cm.tree.clusters:
        ds = datasets[c.id]
        idx = getattr(ds, rows)
        samples = ds.samples[idx]
        if ref is None:
            ref = samples
            x = np.zeros((idx.size, len(cm.system_legend)))
        elif not np.array_equal(ref, samples):
            raise ValueError(f"cluster {c.id} {rows} rows differ from the other clusters")
        for k, s in enumerate(ds.input_legend):
            if s in pos:
                x[:, pos[s]] = ds.inputs[idx, k]
                filled[pos[s]] = True
    if not filled.all():
        missing = [cm.system_legend[k].label for k in np.flatnonzero(~filled)]
        raise ValueError(f"system inputs not covered by any dataset: {missing}")
    return x, ref


def _timed(fn, repeats: int):
    times = []
    first = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
        if first is None:
            first = out
    return first, times


def run_benchmark(
    cm: CascadeModel | OracleLoopback,
    f: Feeder,
    system_inputs: np.ndarray,
    *,
    samples: np.ndarray | None = None,
    train_samples: np.ndarray | None = None,
    repeats: int = DEFAULT_REPEATS,
    opts: SolverOptions = SolverOptions(),
    parallel: bool = False,
    workers: int | None = None,
) -> BenchmarkReport:
    """Run the oracle and the cascade on the same inputs and compare them per cluster.

    Timings are medians over ``repeats`` runs. The cascade's t_ATS comes from
    the median per-cluster times; speedup is the oracle batch time over t_ATS.
    """
    x = np.atleast_2d(np.asarray(system_inputs, dtype=float))
    n = x.shape[0]
    samples = np.arange(n) if samples is None else np.asarray(samples)
    if train_samples is not None and np.intersect1d(samples, train_samples).size:
        raise ValueError("benchmark rows overlap the training rows")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    legend = cm.system_legend
    tree, layouts = cm.tree, cm.layouts

    batch, oracle_times = _timed(lambda: run_oracle(f, legend, x, opts), repeats)
    keep = np.flatnonzero(batch.converged)
    excluded = n - keep.size
    if excluded:
        log.warning("oracle failed to converge on %d of %d benchmark rows; excluded", excluded, n)

    pred_runs = []
    cascade_wall = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        pred_runs.append(predict_cascade(cm, x, parallel=parallel, workers=workers))
        cascade_wall.append(time.perf_counter() - t0)
    pred = pred_runs[0]
    med = {c.id: statistics.median(p.timing.cluster_times[c.id] for p in pred_runs) for c in tree.clusters}
    timing = timing_record(tree, med)

    report = BenchmarkReport(
        timing=timing,
        cascade_wall=statistics.median(cascade_wall),
        oracle_time=statistics.median(oracle_times),
        n_rows=int(keep.size),
        excluded_rows=int(excluded),
        repeats=repeats,
    )
    report.speedup = report.oracle_time / timing.t_ats if timing.t_ats > 0 else math.inf
    if keep.size == 0:
        return report

    index = network_model(f).index
    volts = batch.voltages[keep]
    slack = f.slack_bus
    teacher = isinstance(cm, CascadeModel)
    for c in tree.clusters:
        lay = layouts[c.id]
        truth = _layout_columns(f, tree, lay, volts, index)
        y = pred.outputs[c.id][keep]
        vm = [k for k, s in enumerate(lay.outputs) if s.quantity == "Vmag" and s.bus != slack]
        va = [k for k, s in enumerate(lay.outputs) if s.quantity == "Vang" and s.bus != slack]
        cm_row = ClusterMetrics(c.id, cluster_name(c.id), None, {p: None for p in PHASES}, None)
        if vm:
            cm_row.vmag = compute_metrics(truth[:, vm], y[:, vm], relative=True)
        for p in PHASES:
            cols = [k for k in va if lay.outputs[k].phase == p]
            if cols:
                err = angle_error(truth[:, cols], y[:, cols])
                cm_row.angle[p] = compute_metrics(err, np.zeros_like(err))
        if va:
            err = angle_error(truth[:, va], y[:, va])
            cm_row.cascade_angle = compute_metrics(err, np.zeros_like(err))
        heads = lay.head_slots()
        if heads:
            s_true = _apparent(truth, lay, heads)
            s_pred = _apparent(y, lay, heads)
            cm_row.head_s = compute_metrics(s_true, s_pred, relative=True)
        if teacher and (vm or va):
            # same model, but every fed slot carries the oracle's head powers
            xin = pred.inputs[c.id][keep].copy()
            for child in c.children:
                child_truth = _layout_columns(f, tree, layouts[child], volts, index)
                xin[:, lay.fed_slots(tree[child].head)] = child_truth[:, layouts[child].head_slots()]
            yt = predict_mlp(cm.models[c.id], xin, check_range=False)
            if vm:
                cm_row.teacher_vmag = compute_metrics(truth[:, vm], yt[:, vm], relative=True)
            if va:
                err = angle_error(truth[:, va], yt[:, va])
                cm_row.teacher_angle = compute_metrics(err, np.zeros_like(err))
        report.clusters.append(cm_row)
        all_vm = [k for k, s in enumerate(lay.outputs) if s.quantity == "Vmag"]
        all_va = [k for k, s in enumerate(lay.outputs) if s.quantity == "Vang"]
        for q, cols in (("Vmag", all_vm), ("Vang", all_va)):
            report.scatter[(c.id, q)] = ScatterData(
                q, truth[:, cols], y[:, cols], tuple(lay.outputs[k] for k in cols), samples[keep]
            )
    return report


def _apparent(y: np.ndarray, lay: IoLayout, heads: list[int]) -> np.ndarray:
    """Sum over phases of sqrt(P^2 + Q^2) at the cluster head."""
    by = {(lay.outputs[k].quantity[0], lay.outputs[k].phase): y[:, k] for k in heads}
    return sum(np.hypot(by[("P", p)], by[("Q", p)]) for p in PHASES)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

METRIC_HEADER = [
    "cluster",
    "vmag_mae_pct",
    "vmag_maxae_pct",
    "angle_A_mae_deg",
    "angle_A_maxae_deg",
    "angle_B_mae_deg",
    "angle_B_maxae_deg",
    "angle_C_mae_deg",
    "angle_C_maxae_deg",
    "head_s_mape_pct",
    "head_s_maxape_pct",
]


def _num(v: float | None) -> str:
    return "None" if v is None else repr(float(v))


def metric_rows(r: BenchmarkReport) -> list[list[str]]:
    rows = []
    for c in r.clusters:
        row = [c.name]
        row += [_num(c.vmag.mape), _num(c.vmag.maxape)] if c.vmag else ["None", "None"]
        for p in PHASES:
            m = c.angle.get(p)
            row += [_num(m.mae), _num(m.maxae)] if m else ["None", "None"]
        row += [_num(c.head_s.mape), _num(c.head_s.maxape)] if c.head_s else ["None", "None"]
        rows.append(row)
    return rows


def emit_report(r: BenchmarkReport, directory: Path | str) -> list[Path]:
    """metrics.csv (one row per cluster), timing.csv and per-cluster scatter files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []

    path = d / "metrics.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_HEADER)
        w.writerows(metric_rows(r))
    written.append(path)

    path = d / "timing.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "value", "unit"])
        if r.timing is not None:
            for cid in sorted(r.timing.cluster_times):
                w.writerow([f"cluster_{cluster_name(cid)}", repr(r.timing.cluster_times[cid]), "s"])
            w.writerow(["t_ats", repr(r.timing.t_ats), "s"])
            w.writerow(["cascade_wall", repr(r.cascade_wall), "s"])
            w.writerow(["oracle_batch", repr(r.oracle_time), "s"])
            w.writerow(["speedup", repr(r.speedup), "x"])
    written.append(path)

    if r.scatter:
        sd = d / "scatter"
        sd.mkdir(exist_ok=True)
        for (cid, q), data in sorted(r.scatter.items()):
            path = sd / f"cluster_{cluster_name(cid)}_{q}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["truth", "predicted", "bus", "phase", "sample"])
                for j, slot in enumerate(data.slots):
                    for i in range(data.truth.shape[0]):
                        w.writerow([repr(data.truth[i, j]), repr(data.predicted[i, j]), slot.bus, slot.phase, int(data.samples[i])])
            written.append(path)
    return written


def read_metrics_csv(path: Path | str) -> dict[str, dict[str, float | None]]:
    with Path(path).open(newline="") as fh:
        return {
            row["cluster"]: {k: (None if v == "None" else float(v)) for k, v in row.items() if k != "cluster"}
            for row in csv.DictReader(fh)
        }


def recheck_t_ats(r: BenchmarkReport, tree: ClusterTree) -> bool:
    return r.timing is not None and critical_path_time(r.timing, tree) == r.timing.t_ats
