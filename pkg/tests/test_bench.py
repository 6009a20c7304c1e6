import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierflow.bench import (
    METRIC_HEADER,
    BenchmarkReport,
    ClusterMetrics,
    MetricSet,
    OracleLoopback,
    angle_error,
    compute_metrics,
    emit_report,
    injections_from_inputs,
    metric_rows,
    read_metrics_csv,
    recheck_t_ats,
    run_benchmark,
    system_inputs_from_datasets,
)
from hierflow.cascade import train_tree
from hierflow.layout import Slot
from hierflow.neural import MlpConfig
from hierflow.solver import network_model
from hierflow.synth import CompandingConfig, generate_datasets, shape_library, synthetic_base_shape

from oracles import naive_metrics


def test_identity_metrics():
    m = compute_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], relative=True)
    assert (m.mae, m.maxae, m.mape, m.maxape) == (0.0, 0.0, 0.0, 0.0)


def test_single_element_metrics():
    m = compute_metrics([2.0], [1.0], relative=True)
    assert (m.mae, m.maxae, m.mape, m.maxape) == (1.0, 1.0, 50.0, 50.0)


def test_two_element_metrics():
    m = compute_metrics([1.0, 2.0], [1.1, 1.8], relative=True)
    assert m.mae == pytest.approx(0.15, abs=1e-15)
    assert m.maxae == pytest.approx(0.2, abs=1e-15)
    assert m.mape == pytest.approx(10.0, abs=1e-12)
    assert m.maxape == pytest.approx(10.0, abs=1e-12)


def test_absolute_mode_has_no_percentages():
    m = compute_metrics([0.0, 1.0], [0.5, 1.0])
    assert m.mape is None and m.maxape is None


def test_metric_errors():
    with pytest.raises(ValueError, match="length mismatch"):
        compute_metrics([1.0, 2.0], [1.0])
    with pytest.raises(ValueError, match="zero truth"):
        compute_metrics([0.0, 1.0], [0.1, 1.0], relative=True)
    with pytest.raises(ValueError):
        compute_metrics([], [])


def test_matches_naive_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        t = rng.normal(size=n) * 10 ** rng.uniform(-3, 3)
        t[t == 0] = 1.0
        p = t + rng.normal(size=n) * rng.uniform(0, 1)
        m = compute_metrics(t, p, relative=True)
        ref = naive_metrics(t.tolist(), p.tolist(), True)
        for got, want in zip((m.mae, m.maxae, m.mape, m.maxape), ref):
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 100), st.floats(-100, 100)), min_size=1, max_size=30))
def test_metric_ordering_invariants(pairs):
    t, p = zip(*pairs)
    m = compute_metrics(t, p, relative=True)
    assert m.maxae >= m.mae >= 0
    assert m.maxape >= m.mape >= 0


def test_angle_error_wraps():
    assert angle_error([179.0], [-179.0]).tolist() == [2.0]
    assert angle_error([-179.0], [179.0]).tolist() == [-2.0]
    assert angle_error([10.0], [190.0]).tolist() == [-180.0]


def test_absent_phase_slot_must_be_zero(feeder36):
    model = network_model(feeder36)
    absent = next((b.id, p) for b in feeder36.buses for p in "ABC" if p not in b.phases)
    legend = [Slot(absent[0], absent[1], "P_load")]
    assert injections_from_inputs(model, legend, np.zeros((2, 1))).shape == (2, model.n)
    with pytest.raises(ValueError, match="not present"):
        injections_from_inputs(model, legend, np.ones((1, 1)))


@pytest.fixture(scope="module")
def hub_setup(hub):
    f, tree = hub
    shapes = shape_library(f, synthetic_base_shape(150, seed=5), CompandingConfig(seed=6))
    ds, _ = generate_datasets(f, tree, shapes, 150, split_seed=3)
    cm = train_tree(tree, ds, MlpConfig(epochs=3), feeder=f)
    x, samples = system_inputs_from_datasets(cm, ds)
    return f, tree, ds, cm, x, samples


def test_loopback_has_zero_error_and_unit_speedup(hub_setup):
    f, tree, _, cm, x, samples = hub_setup
    r = run_benchmark(OracleLoopback(cm, f), f, x, samples=samples, repeats=9)
    for c in r.clusters:
        assert c.vmag.mae == 0 and c.vmag.mape == 0
        assert all(m.mae == 0 for m in c.angle.values() if m)
        if c.head_s:
            assert c.head_s.mape == 0
    # both sides time the same oracle over the same rows
    assert 0.5 < r.speedup < 2.0


def test_report_one_row_per_cluster(desk):
    rows = metric_rows(desk.report)
    assert len(rows) == len(desk.tree)
    assert [r[0] for r in rows] == ["A", "B", "C", "D", "E"][: len(rows)]
    assert all(len(r) == len(METRIC_HEADER) for r in rows)
    top = desk.report.cluster(desk.tree.top.id)
    assert top.head_s is None


def test_t_ats_recheck(desk):
    assert recheck_t_ats(desk.report, desk.tree)
    assert desk.report.speedup == desk.report.oracle_time / desk.report.timing.t_ats


def test_benchmark_rows_must_be_unseen(desk):
    train = desk.datasets[0].samples[desk.datasets[0].train]
    with pytest.raises(ValueError, match="overlap"):
        run_benchmark(desk.cascade, desk.feeder, desk.inputs, samples=train[: len(desk.inputs)], train_samples=train, repeats=1)


def test_empty_report_header_only(tmp_path):
    emit_report(BenchmarkReport(), tmp_path)
    assert (tmp_path / "metrics.csv").read_text().splitlines() == [",".join(METRIC_HEADER)]
    assert (tmp_path / "timing.csv").read_text().splitlines() == ["name,value,unit"]


def test_four_cluster_report(tmp_path):
    m = MetricSet(0.1, 0.2, 1.0, 2.0)
    clusters = [ClusterMetrics(k, "ABCD"[k], m, {"A": m, "B": None, "C": m}, None if k == 0 else m) for k in range(4)]
    emit_report(BenchmarkReport(clusters=clusters), tmp_path)
    back = read_metrics_csv(tmp_path / "metrics.csv")
    assert list(back) == ["A", "B", "C", "D"]
    assert back["A"]["head_s_mape_pct"] is None
    assert back["B"]["angle_B_mae_deg"] is None
    assert back["C"]["angle_A_maxae_deg"] == 0.2


def test_csv_round_trip_exact(tmp_path, desk):
    emit_report(desk.report, tmp_path)
    back = read_metrics_csv(tmp_path / "metrics.csv")
    for c in desk.report.clusters:
        row = back[c.name]
        assert row["vmag_mae_pct"] == c.vmag.mape
        assert row["vmag_maxae_pct"] == c.vmag.maxape
        for p, m in c.angle.items():
            assert row[f"angle_{p}_mae_deg"] == (m.mae if m else None)
        assert row["head_s_mape_pct"] == (c.head_s.mape if c.head_s else None)
    with (tmp_path / "timing.csv").open() as fh:
        timing = {r["name"]: float(r["value"]) for r in csv.DictReader(fh)}
    assert timing["t_ats"] == desk.report.timing.t_ats
    assert timing["speedup"] == desk.report.speedup


def test_scatter_row_counts(tmp_path, desk):
    emit_report(desk.report, tmp_path)
    n = desk.report.n_rows
    for c in desk.tree.clusters:
        phases = sum(len(desk.feeder.bus(b).phases) for b in c.nodes)
        for q in ("Vmag", "Vang"):
            path = tmp_path / "scatter" / f"cluster_{'ABCDE'[c.id]}_{q}.csv"
            lines = path.read_text().splitlines()
            assert lines[0] == "truth,predicted,bus,phase,sample"
            assert len(lines) - 1 == n * phases


def test_teacher_metrics_present(desk):
    for c in desk.report.clusters:
        assert c.teacher_vmag is not None
        assert c.cascade_angle is not None
    # leaves have no fed slots, so cascade and teacher coincide there
    for c in desk.tree.clusters:
        if not c.children:
            row = desk.report.cluster(c.id)
            assert row.vmag == row.teacher_vmag
