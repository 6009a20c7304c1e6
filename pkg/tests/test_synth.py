import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierflow.layout import allocate_io
from hierflow.solver import SolverOptions
from hierflow.synth import (
    CompandingConfig,
    DatasetError,
    LoadShape,
    SampleBank,
    generate_cluster_dataset,
    generate_datasets,
    load_datasets_npz,
    moving_median,
    mu_law_compress,
    mu_law_expand,
    mu_law_family,
    multiplier_matrix,
    save_datasets_npz,
    shape_library,
    solve_samples,
    split_rows,
    synthetic_base_shape,
    write_dataset_csv,
)


def naive_median3(x):
    """Window-3 median with the first and last values repeated at the edges."""
    padded = [x[0]] + list(x) + [x[-1]]
    return [sorted(padded[i : i + 3])[1] for i in range(len(x))]


@pytest.mark.parametrize("mu", [1.0, 5.0, 87.6, 255.0])
def test_companding_fixes_endpoints(mu):
    assert mu_law_compress(0.0, mu) == 0.0
    assert mu_law_compress(1.0, mu) == pytest.approx(1.0, abs=1e-15)
    assert mu_law_expand(0.0, mu) == 0.0
    assert mu_law_expand(1.0, mu) == pytest.approx(1.0, abs=1e-15)


def test_compress_half_at_255():
    assert mu_law_compress(0.5, 255.0) == pytest.approx(math.log(128.5) / math.log(256), abs=1e-15)
    assert round(float(mu_law_compress(0.5, 255.0)), 4) == 0.8757


@settings(max_examples=100, deadline=None)
@given(x=st.floats(0, 1), mu=st.floats(1, 255))
def test_expand_inverts_compress(x, mu):
    assert mu_law_expand(mu_law_compress(x, mu), mu) == pytest.approx(x, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1), mu=st.floats(1, 255))
def test_compress_strictly_monotone(a, b, mu):
    if a < b:
        assert mu_law_compress(a, mu) < mu_law_compress(b, mu)
        assert mu_law_expand(a, mu) < mu_law_expand(b, mu)


def test_family_bounded_and_deterministic():
    base = synthetic_base_shape(500, seed=3)
    cfg = CompandingConfig(seed=11)
    a = mu_law_family(base, cfg, 6)
    b = mu_law_family(base, cfg, 6)
    for s, t in zip(a, b):
        assert np.array_equal(s.multipliers, t.multipliers)
        assert s.multipliers.min() >= 0 and s.multipliers.max() <= 1
    assert not np.array_equal(a[0].multipliers, a[1].multipliers)


def test_family_without_jitter_is_exact_companding():
    base = synthetic_base_shape(200, seed=3)
    cfg = CompandingConfig(mu_values=(255.0, 20.0), directions=("compress", "expand"), jitter_sigma=0.0)
    c, e = mu_law_family(base, cfg, 2)
    assert np.array_equal(c.multipliers, mu_law_compress(base.multipliers, 255.0))
    assert np.array_equal(e.multipliers, mu_law_expand(base.multipliers, 20.0))


def test_load_shape_range_enforced():
    with pytest.raises(ValueError):
        LoadShape("x", np.array([0.2, 1.5]))


@pytest.mark.parametrize(
    "series, expected",
    [([5, 5, 5, 5], [5, 5, 5, 5]), ([1, 9, 1], [1, 1, 1]), ([1, 2, 3, 4], [1, 2, 3, 4])],
)
def test_moving_median_examples(series, expected):
    assert moving_median(series).tolist() == expected


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_moving_median_matches_naive(series):
    assert moving_median(series).tolist() == naive_median3(series)


def test_moving_median_columns_independent():
    a = np.array([[1, 10], [9, 20], [1, 30]], dtype=float)
    assert moving_median(a).tolist() == [[1, 10], [1, 20], [1, 30]]


def test_split_1000_rows():
    train, test = split_rows(1000, seed=4)
    assert train.size == 800 and test.size == 200
    assert np.intersect1d(train, test).size == 0
    assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(1000))


def test_leaf_and_mid_input_widths(hub):
    f, tree = hub
    layouts = allocate_io(tree, f)
    top = tree.top
    leaves = [c for c in tree.clusters if not c.children]
    assert len(leaves) == 2
    assert len(top.nodes) == 5 and len(top.children) == 2
    # leaf: n = 5 three-phase load buses -> 6n inputs
    for leaf in leaves:
        assert layouts[leaf.id].n_in == 30
    # top: m = 4 independent load buses (slack has no load) and g = 2 fed heads
    assert layouts[top.id].n_in == 36


@pytest.fixture(scope="module")
def hub_data(hub):
    f, tree = hub
    base = synthetic_base_shape(300, seed=5)
    shapes = shape_library(f, base, CompandingConfig(seed=6))
    ds, bank = generate_datasets(f, tree, shapes, 300, split_seed=9)
    return f, tree, shapes, ds, bank


def test_dataset_shapes(hub_data):
    f, tree, _, ds, _ = hub_data
    layouts = allocate_io(tree, f)
    for cid, d in ds.items():
        assert d.inputs.shape == (300, layouts[cid].n_in)
        assert d.outputs.shape == (300, layouts[cid].n_out)
        assert d.train.size == 240 and d.test.size == 60


def test_boundary_consistency(hub_data):
    _, tree, _, ds, _ = hub_data
    for c in tree.clusters:
        if c.parent is None:
            continue
        child, parent = ds[c.id], ds[c.parent]
        out_cols = [k for k, s in enumerate(child.output_legend) if s.quantity in ("P_head", "Q_head")]
        for k in out_cols:
            s = child.output_legend[k]
            fed = parent.input_legend.index(s._replace(quantity=s.quantity[0] + "_fed"))
            assert np.array_equal(child.outputs[:, k], parent.inputs[:, fed])


def test_datasets_deterministic(hub_data):
    f, tree, shapes, ds, _ = hub_data
    again, _ = generate_datasets(f, tree, shapes, 300, split_seed=9)
    for cid in ds:
        assert np.array_equal(ds[cid].inputs, again[cid].inputs)
        assert np.array_equal(ds[cid].outputs, again[cid].outputs)
        assert np.array_equal(ds[cid].train, again[cid].train)


def test_nonconvergent_rows_excluded(hub_data):
    f, tree, shapes, _, bank = hub_data
    conv = bank.converged.copy()
    conv[[3, 50, 51]] = False
    doctored = SampleBank(f, bank.multipliers, bank.index, bank.voltages, conv, bank.iterations)
    d = generate_cluster_dataset(f, tree, 0, shapes, 300, 9, bank=doctored)
    assert d.n_rows == 297
    assert not set(d.samples.tolist()) & {3, 50, 51}


def test_too_many_failures_abort(hub_data):
    f, _, shapes, _, _ = hub_data
    m = multiplier_matrix(f, shapes, 20)
    with pytest.raises(DatasetError, match="did not converge"):
        solve_samples(f, m, SolverOptions(max_iterations=1))


def test_unknown_shape_rejected(hub_data):
    f, _, _, _, _ = hub_data
    with pytest.raises(DatasetError, match="unknown shape"):
        multiplier_matrix(f, {}, 10)


def test_npz_round_trip_and_csv(tmp_path, hub_data):
    _, _, _, ds, _ = hub_data
    save_datasets_npz(ds, tmp_path / "d.npz")
    back = load_datasets_npz(tmp_path / "d.npz")
    for cid in ds:
        assert np.array_equal(back[cid].inputs, ds[cid].inputs)
        assert np.array_equal(back[cid].outputs, ds[cid].outputs)
        assert back[cid].input_legend == ds[cid].input_legend
    paths = write_dataset_csv(ds[0], tmp_path / "csv")
    lines = paths[0].read_text().splitlines()
    assert lines[0].startswith("sample,P_load@2.A,Q_load@2.A")
    assert len(lines) == 1 + ds[0].train.size
