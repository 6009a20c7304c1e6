import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierflow.feeder import (
    Branch,
    Bus,
    Feeder,
    FeederFormatError,
    FeederValidationError,
    Load,
    SingularNodeError,
    build_admittance,
    parse_feeder,
    serialize_feeder,
    validate_feeder,
)

from oracles import dense_admittance, random_radial_feeder

TWO_BUS = """
[source]
bus 1
base_kva 1000

[buses]
1 A slack 2.4
2 A load 2.4

[branches]
1 2 50-50j 0 0 0 0 0 0 0 0

[loads]
2 A 100 50 res1
"""


def test_parse_minimal_two_bus():
    f = parse_feeder(TWO_BUS)
    assert len(f.buses) == 2
    assert f.slack_bus == "1"
    assert f.branches[0].series[0] == 50 - 50j
    assert f.loads[0].kw == 100.0
    assert f.source_vmag_pu == 1.0


def test_shipped_36_bus_counts(feeder36):
    assert len(feeder36.buses) == 36
    assert len(feeder36.branches) == 35
    assert validate_feeder(feeder36) == []


def test_dangling_branch_reference():
    text = TWO_BUS.replace("1 2 50-50j", "1 9 50-50j")
    with pytest.raises(FeederFormatError, match="unknown bus '9'") as exc:
        parse_feeder(text)
    assert exc.value.line is not None


def test_syntax_error_reports_line_and_column():
    text = TWO_BUS.replace("2 A 100 50 res1", "2 A 1x0 50 res1")
    with pytest.raises(FeederFormatError) as exc:
        parse_feeder(text)
    assert exc.value.line == 14
    assert exc.value.column == 5


def test_duplicate_bus_id():
    text = TWO_BUS.replace("2 A load 2.4", "2 A load 2.4\n2 A load 2.4")
    with pytest.raises(FeederFormatError, match="duplicate bus id"):
        parse_feeder(text)


def test_nonpositive_base_rejected():
    with pytest.raises(FeederFormatError, match="base_kv"):
        parse_feeder(TWO_BUS.replace("2 A load 2.4", "2 A load 0"))
    with pytest.raises(FeederFormatError, match="base_kva"):
        parse_feeder(TWO_BUS.replace("base_kva 1000", "base_kva -5"))


def _bus(i, kind="load", phases=("A",)):
    return Bus(str(i), phases, kind, 2.4)


def _line(a, b, y=10 - 10j):
    return Branch.from_blocks(str(a), str(b), np.diag([y, 0, 0]))


def test_validate_two_slack_buses_names_both():
    f = Feeder((_bus(1, "slack"), _bus(2, "slack")), (_line(1, 2),), (), "1", 1000.0)
    problems = validate_feeder(f)
    assert len([p for p in problems if "slack" in p and "1" in p and "2" in p]) == 1


def test_validate_disconnected_lists_unreachable():
    f = Feeder(
        (_bus(1, "slack"), _bus(2), _bus(3), _bus(4)),
        (_line(1, 2), _line(3, 4)),
        (),
        "1",
        1000.0,
    )
    problems = validate_feeder(f)
    assert len(problems) == 1
    assert "disconnected" in problems[0]
    assert "3" in problems[0] and "4" in problems[0]


def test_validate_valid_two_bus(two_bus):
    assert validate_feeder(two_bus) == []


def test_validate_phase_consistency():
    f = Feeder(
        (_bus(1, "slack", ("A", "B")), _bus(2, "load", ("A",))),
        (Branch.from_blocks("1", "2", np.diag([1 - 1j, 1 - 1j, 0])),),
        (Load("2", "B", 1.0, 0.5, "s"),),
        "1",
        1000.0,
    )
    problems = validate_feeder(f)
    assert any("absent" in p for p in problems)
    assert any("phase B not present" in p for p in problems)
    with pytest.raises(FeederValidationError):
        parse_feeder(serialize_feeder(f))


def test_single_branch_block_structure(two_bus):
    y = build_admittance(two_bus).toarray()
    yb = 50 - 50j
    assert np.array_equal(y, np.array([[yb, -yb], [-yb, yb]]))


def test_parallel_branches_superpose():
    y1 = np.array([[3 - 4j, 1 - 1j, 0], [1 - 1j, 3 - 4j, 0], [0, 0, 0]])
    y2 = np.array([[2 - 2j, 0.5 - 0.5j, 0], [0.5 - 0.5j, 2 - 2j, 0], [0, 0, 0]])
    f = Feeder(
        (_bus(1, "slack", ("A", "B")), _bus(2, "load", ("A", "B"))),
        (Branch.from_blocks("1", "2", y1), Branch.from_blocks("2", "1", y2)),
        (),
        "1",
        1000.0,
    )
    y = build_admittance(f).toarray()
    assert np.array_equal(y[0:2, 2:4], -(y1 + y2)[:2, :2])
    assert np.array_equal(y[2:4, 0:2], -(y1 + y2)[:2, :2])


def test_ten_bus_sparse_equals_dense():
    f = random_radial_feeder(np.random.default_rng(10), 10)
    dense, labels = dense_admittance(f)
    adm = build_admittance(f)
    assert list(adm.index) == labels
    assert np.array_equal(adm.toarray(), dense)


def test_isolated_phase_row_is_singular():
    # phase B exists at bus 2 but nothing connects it
    f = Feeder(
        (_bus(1, "slack", ("A", "B")), _bus(2, "load", ("A", "B"))),
        (Branch.from_blocks("1", "2", np.diag([5 - 5j, 0, 0])),),
        (),
        "1",
        1000.0,
    )
    with pytest.raises(SingularNodeError) as exc:
        build_admittance(f)
    assert ("1", "B") in exc.value.nodes and ("2", "B") in exc.value.nodes


def test_branch_row_sums_vanish_without_shunt():
    f = random_radial_feeder(np.random.default_rng(3), 8, shunt=False)
    for br in f.branches:
        ys = br.series_block
        contribution = np.block([[ys, -ys], [-ys, ys]])
        assert np.allclose(contribution.sum(axis=1), 0, rtol=0, atol=1e-12 * np.abs(ys).max())


def test_admittance_pattern_symmetric(feeder36):
    y = build_admittance(feeder36).matrix
    pattern = (y != 0).astype(int)
    assert (pattern != pattern.T).nnz == 0
    assert y.shape == (len(feeder36.node_phases()),) * 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20), parallel=st.booleans())
def test_sparse_dense_agree_property(seed, n, parallel):
    f = random_radial_feeder(np.random.default_rng(seed), n, parallel=parallel)
    dense, _ = dense_admittance(f)
    assert np.array_equal(build_admittance(f).toarray(), dense)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 15))
def test_serialize_round_trip(seed, n):
    f = random_radial_feeder(np.random.default_rng(seed), n)
    g = parse_feeder(serialize_feeder(f))
    assert g == f


def test_round_trip_shipped(feeder36):
    assert parse_feeder(serialize_feeder(feeder36)) == feeder36
    assert parse_feeder(serialize_feeder(feeder36)).digest() == feeder36.digest()
