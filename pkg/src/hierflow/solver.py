"""Fixed-point current-injection power flow (the ground-truth oracle).

Loads are constant PQ. Node-phases are split into the slack block S and the
remaining block L; each iteration solves

    Y_LL V_L = conj(S_spec / V_L) - Y_LS V_S

with a sparse LU of Y_LL computed once per feeder.
"""

from __future__ import annotations

import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .feeder import PHASE_INDEX, PHASES, Feeder, build_admittance

log = logging.getLogger(__name__)

ZERO_VOLTAGE_GUARD = 1e-6


class SolverError(Exception):
    pass


class SingularSystemError(SolverError):
    pass


class ZeroVoltageError(SolverError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 200
    initial_guess: np.ndarray | None = None  # full node-phase vector; None = flat start

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    index: tuple[tuple[str, str], ...]
    voltage: np.ndarray  # complex per-unit phasors, one per node-phase
    iterations: int
    mismatch: float
    converged: bool

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.voltage)

    @property
    def vang_deg(self) -> np.ndarray:
        return np.degrees(np.angle(self.voltage))

    def at(self, bus: str, phase: str) -> complex:
        return complex(self.voltage[self.index.index((bus, phase))])


class NetworkModel:
    """Per-feeder precomputation shared by every solve on that feeder.

    Immutable after construction, so concurrent solves may share one instance.
    """

    def __init__(self, f: Feeder):
        self.feeder = f
        adm = build_admittance(f)
        self.index = adm.index
        self.position = adm.position
        self.y = adm.matrix.tocsr()
        n = len(self.index)
        slack = f.slack_bus
        self.slack_idx = np.array([k for k, (b, _) in enumerate(self.index) if b == slack], dtype=int)
        self.load_idx = np.array([k for k, (b, _) in enumerate(self.index) if b != slack], dtype=int)
        phasors = f.slack_phasors()
        self.v_slack = np.array([phasors[PHASE_INDEX[p]] for b, p in self.index if b == slack])
        self.flat = np.array([phasors[PHASE_INDEX[p]] for _, p in self.index])

        y_ll = self.y[self.load_idx][:, self.load_idx].tocsc()
        self.y_ls = self.y[self.load_idx][:, self.slack_idx].tocsr()
        try:
            self.lu = spla.splu(y_ll)
        except RuntimeError as exc:
            raise SingularSystemError(f"Y_LL is singular: {exc}") from exc
        if not np.all(np.isfinite(self.lu.U.diagonal())) or np.any(self.lu.U.diagonal() == 0):
            raise SingularSystemError("Y_LL is singular")
        self.i_slack_term = self.y_ls @ self.v_slack

        # node-phase incidence of each load, for multiplier -> injection mapping
        self.load_rows = np.array([self.position[(ld.bus, ld.phase)] for ld in f.loads], dtype=int)
        self.load_s = np.array([complex(ld.kw, ld.kvar) for ld in f.loads]) / f.base_kva
        self.n = n

    def injections(self, multipliers: Sequence[float] | np.ndarray) -> np.ndarray:
        """Specified complex injection per node-phase (loads are negative)."""
        m = np.asarray(multipliers, dtype=float)
        if m.shape != (len(self.load_s),):
            raise ValueError(f"expected {len(self.load_s)} multipliers, got shape {m.shape}")
        if np.any(m < 0):
            raise ValueError("multipliers must be non-negative")
        s = np.zeros(self.n, dtype=complex)
        np.add.at(s, self.load_rows, -m * self.load_s)
        return s


@functools.lru_cache(maxsize=16)
def network_model(f: Feeder) -> NetworkModel:
    return NetworkModel(f)


def _mismatch(model: NetworkModel, v: np.ndarray, s_spec: np.ndarray) -> float:
    s_calc = v * np.conj(model.y @ v)
    d = s_calc[model.load_idx] - s_spec[model.load_idx]
    return float(np.max(np.abs(d))) if d.size else 0.0


def solve_injections(
    f: Feeder, s_spec: np.ndarray, opts: SolverOptions = SolverOptions(), model: NetworkModel | None = None
) -> PowerFlowSolution:
    """Solve for a given per-node-phase specified injection vector (per-unit)."""
    model = model or network_model(f)
    s_spec = np.asarray(s_spec, dtype=complex)
    if s_spec.shape != (model.n,):
        raise ValueError(f"injection vector has shape {s_spec.shape}, expected ({model.n},)")
    if opts.initial_guess is None:
        v = model.flat.copy()
    else:
        v = np.array(opts.initial_guess, dtype=complex)
        if v.shape != (model.n,):
            raise ValueError("initial guess has wrong dimension")
    v[model.slack_idx] = model.v_slack
    s_l = s_spec[model.load_idx]
    v_l = v[model.load_idx]

    mismatch = math.inf
    it = 0
    for it in range(1, opts.max_iterations + 1):
        if np.min(np.abs(v_l), initial=math.inf) < ZERO_VOLTAGE_GUARD:
            raise ZeroVoltageError(f"voltage collapsed below {ZERO_VOLTAGE_GUARD} pu at iteration {it}")
        rhs = np.conj(s_l / v_l) - model.i_slack_term
        v_l = model.lu.solve(rhs)
        v[model.load_idx] = v_l
        if not np.all(np.isfinite(v_l)):
            raise ZeroVoltageError(f"non-finite voltage at iteration {it}")
        mismatch = _mismatch(model, v, s_spec)
        if mismatch <= opts.tolerance:
            return PowerFlowSolution(model.index, v, it, mismatch, True)
    log.debug("fixed point did not converge: mismatch %.3e after %d iterations", mismatch, it)
    return PowerFlowSolution(model.index, v, it, mismatch, False)


def solve_fixed_point(
    f: Feeder,
    multipliers: Sequence[float] | np.ndarray | None = None,
    opts: SolverOptions = SolverOptions(),
) -> PowerFlowSolution:
    """Solve the feeder with every load scaled by its multiplier (default 1)."""
    model = network_model(f)
    if multipliers is None:
        multipliers = np.ones(len(f.loads))
    return solve_injections(f, model.injections(multipliers), opts, model)


def solve_many(
    f: Feeder, multipliers: np.ndarray, opts: SolverOptions = SolverOptions(), workers: int = 1
) -> list[PowerFlowSolution]:
    """Solve one sample per row of ``multipliers``; results keep row order."""
    model = network_model(f)
    rows = np.atleast_2d(np.asarray(multipliers, dtype=float))

    def one(m):
        return solve_injections(f, model.injections(m), opts, model)

    if workers <= 1:
        return [one(m) for m in rows]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, rows))


def power_mismatch(f: Feeder, multipliers, v: np.ndarray) -> float:
    """Worst absolute complex power mismatch over non-slack node-phases (per-unit)."""
    model = network_model(f)
    v = np.asarray(v, dtype=complex)
    if v.shape != (model.n,):
        raise ValueError(f"voltage vector has shape {v.shape}, expected ({model.n},)")
    return _mismatch(model, v, model.injections(multipliers))


def injected_power(f: Feeder, v: np.ndarray) -> np.ndarray:
    """Computed complex injection S = V conj(Y V) at every node-phase."""
    model = network_model(f)
    return v * np.conj(model.y @ v)


def branch_power_batch(
    f: Feeder, index: Sequence[tuple[str, str]], voltages: np.ndarray, head_branch: tuple[str, str]
) -> np.ndarray:
    """Rows of (P_A, P_B, P_C, Q_A, Q_B, Q_C) sent from ``parent`` into ``child``.

    ``voltages`` holds one complex node-phase vector per row. Power is measured
    at the parent terminal, so it includes the branch's own losses; parallel
    branches between the pair are summed. Absent phases read zero.
    """
    parent, child = head_branch
    pos = {np_: k for k, np_ in enumerate(index)}
    v = np.atleast_2d(voltages)
    n = v.shape[0]

    def phase_cols(bus):
        out = np.zeros((n, 3), dtype=complex)
        for k, p in enumerate(PHASES):
            if (bus, p) in pos:
                out[:, k] = v[:, pos[(bus, p)]]
        return out

    vp, vc = phase_cols(parent), phase_cols(child)
    s = np.zeros((n, 3), dtype=complex)
    found = False
    for br in f.branches:
        if {br.from_bus, br.to_bus} != {parent, child}:
            continue
        found = True
        i_p = (vp - vc) @ br.series_block.T + vp @ (0.5 * br.shunt_block).T
        s += vp * np.conj(i_p)
    if not found:
        raise KeyError(f"no branch between {parent} and {child}")
    return np.hstack([s.real, s.imag])


def branch_injected_power(
    sol: PowerFlowSolution, f: Feeder, head_branch: tuple[str, str]
) -> tuple[float, float, float, float, float, float]:
    """Per-phase (P_A, P_B, P_C, Q_A, Q_B, Q_C) sent from ``parent`` into ``child``.

    ``head_branch`` is ``(parent_bus, child_bus)``; positive values flow toward the child.
    """
    row = branch_power_batch(f, sol.index, sol.voltage[None, :], head_branch)[0]
    return tuple(float(x) for x in row)  # type: ignore[return-value]
