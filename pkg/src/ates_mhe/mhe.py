"""Moving horizon estimation over the piecewise-affine ATES model.

Because the dynamics partitions depend only on the recorded pump flow, a
pre-processing pass fixes the affine mode of every window step and the
estimation problem collapses to one convex QP per update: no integer
variables, and the partition count never enters the QP dimension.

The QP decision vector is the window's initial state and the process-noise
sequence; the reconstructed states enter as slack variables pinned by the
recursive dynamics equalities, which keeps the problem sparse and lets the
state box act directly as variable bounds.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from ates_mhe.domain import ScenarioConfig, StateConstraints, state_bounds
from ates_mhe.pwa import AffineMode, OutputModel, build_output_model, linearize_at, locate_partition
from ates_mhe.qp import QpSolution, QpStatus, QuadraticProgram, make_qp, solve_qp
from ates_mhe.surrogate import SurrogateModel, nominal_model


@dataclass(frozen=True)
class MheWeights:
    """Process (Q), measurement (R) and arrival (S) weights; all SPD."""

    q_mat: np.ndarray
    r_mat: np.ndarray
    s_mat: np.ndarray

    def __post_init__(self) -> None:
        for name, mat in (("Q", self.q_mat), ("R", self.r_mat), ("S", self.s_mat)):
            arr = np.asarray(mat)
            if not np.allclose(arr, arr.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(arr)
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"{name} must be positive definite") from exc

    @classmethod
    def from_scalars(cls, n: int, p: int, q: float, r: float, s: float) -> "MheWeights":
        return cls(q_mat=q * np.eye(n), r_mat=r * np.eye(p), s_mat=s * np.eye(n))


@dataclass(frozen=True)
class NoiseBounds:
    """Process-noise box {nu : ||nu||_inf <= nu_max}."""

    nu_max: float

    def __post_init__(self) -> None:
        if self.nu_max <= 0.0:
            raise ValueError("nu_max must be positive")


@dataclass(frozen=True)
class Record:
    k: int
    y: np.ndarray
    u: float
    t_r: float


class MeasurementWindow:
    """Ring buffer of the last M+1 measurement records, contiguous in k."""

    def __init__(self, horizon: int) -> None:
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.horizon = horizon
        self._records: deque[Record] = deque(maxlen=horizon + 1)

    def append(self, y: np.ndarray, u: float, t_r: float) -> None:
        k = self._records[-1].k + 1 if self._records else 0
        self._records.append(Record(k=k, y=np.asarray(y, dtype=float).copy(), u=float(u), t_r=float(t_r)))

    @property
    def records(self) -> tuple[Record, ...]:
        return tuple(self._records)

    @property
    def full(self) -> bool:
        return len(self._records) == self.horizon + 1

    def __len__(self) -> int:
        return len(self._records)


class ModeSource(Protocol):
    def mode_for(self, u: float) -> AffineMode: ...


class LookupModeSource:
    """Finite partition table: the mode of the partition containing u."""

    def __init__(self, modes: Sequence[AffineMode]) -> None:
        self.modes = list(modes)

    def mode_for(self, u: float) -> AffineMode:
        return self.modes[locate_partition(self.modes, u)]


class ExactModeFactory:
    """Linearize at the recorded input itself (the infinite-partition limit).

    Exactness of the affine step at fixed u makes the window model coincide
    with the nominal surrogate; distinct recorded inputs are cached.
    """

    def __init__(self, model: SurrogateModel, u_max: float) -> None:
        self.model = model
        self.u_max = u_max
        self._cache: dict[float, AffineMode] = {}

    def mode_for(self, u: float) -> AffineMode:
        if abs(u) > self.u_max * (1.0 + 1e-12):
            raise ValueError(f"recorded input {u} outside [-{self.u_max}, {self.u_max}]")
        key = float(u)
        mode = self._cache.get(key)
        if mode is None:
            mode = linearize_at(key, self.model)
            self._cache[key] = mode
        return mode


def identify_modes(window: MeasurementWindow, source: ModeSource) -> list[AffineMode]:
    """One affine mode per window step, triggered by the recorded inputs.

    The final record's input is not consumed; the window holds M+1 records
    and the dynamics connect the first M of them to their successors.
    """
    if not window.full:
        raise ValueError("window must hold M+1 records before modes can be identified")
    return [source.mode_for(rec.u) for rec in window.records[:-1]]


def mhe_dimensions(n: int, horizon: int) -> int:
    """QP decision dimension: initial state, M noise vectors, M state slacks."""
    return n * (2 * horizon + 1)


def assemble_mhe_qp(
    window: MeasurementWindow,
    modes: Sequence[AffineMode],
    weights: MheWeights,
    anchor: np.ndarray,
    bounds: StateConstraints,
    noise: NoiseBounds,
    output: OutputModel,
) -> QuadraticProgram:
    """Build the window QP in the slack-augmented canonical form.

    Decision vector [x(k0-M); nu_0..nu_{M-1}; x_1..x_M] where the trailing
    blocks are the reconstructed states, pinned to the noise sequence by the
    recursive dynamics equalities. Minimizes

        sum ||nu_k||_Q^2 + sum ||y_k - C x_k - D u_k - e||_R^2
        + ||x(k0-M) - anchor||_S^2

    subject to the process-noise box and the state box on every reconstructed
    state.
    """
    records = window.records
    horizon = len(modes)
    if len(records) != horizon + 1:
        raise ValueError("mode sequence length must match the window horizon")
    n = modes[0].n
    p = output.p
    if anchor.shape != (n,):
        raise ValueError("anchor dimension mismatch")

    d = mhe_dimensions(n, horizon)
    nu_off = n
    sg_off = n * (horizon + 1)

    c_r_c = 2.0 * output.c_mat.T @ weights.r_mat @ output.c_mat
    h_blocks = [sp.csc_matrix(2.0 * weights.s_mat + c_r_c)]
    h_blocks += [sp.csc_matrix(2.0 * weights.q_mat)] * horizon
    h_blocks += [sp.csc_matrix(c_r_c)] * horizon
    h_mat = sp.block_diag(h_blocks, format="csc")

    g = np.zeros(d)
    two_ct_r = 2.0 * output.c_mat.T @ weights.r_mat
    for j, rec in enumerate(records):
        y_eff = rec.y - output.offset(rec.u, rec.t_r)
        target = 0 if j == 0 else sg_off + (j - 1) * n
        g[target : target + n] -= two_ct_r @ y_eff
    g[:n] -= 2.0 * weights.s_mat @ anchor

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    b_eq = np.empty(n * horizon)
    row_grid, col_grid = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for j, mode in enumerate(modes):
        r0 = j * n
        src = 0 if j == 0 else sg_off + (j - 1) * n
        dst = sg_off + j * n
        rows.append((r0 + row_grid).ravel())
        cols.append((src + col_grid).ravel())
        vals.append(mode.a_mat.ravel())
        idx = np.arange(n)
        rows.append(r0 + idx)
        cols.append(nu_off + j * n + idx)
        vals.append(np.ones(n))
        rows.append(r0 + idx)
        cols.append(dst + idx)
        vals.append(-np.ones(n))
        b_eq[r0 : r0 + n] = -mode.offset(records[j].t_r)
    a_eq = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * horizon, d),
    )

    lb = np.concatenate(
        [bounds.lower, np.full(n * horizon, -noise.nu_max), np.tile(bounds.lower, horizon)]
    )
    ub = np.concatenate(
        [bounds.upper, np.full(n * horizon, noise.nu_max), np.tile(bounds.upper, horizon)]
    )
    return make_qp(h_mat, g, a_eq=a_eq, b_eq=b_eq, lb=lb, ub=ub)


@dataclass(frozen=True)
class MheDiagnostics:
    objective: float
    fit_cost: float
    arrival_cost: float
    qp_iterations: int
    qp_residual: float
    qp_status: QpStatus


@dataclass(frozen=True)
class MheResult:
    status: str  # "inactive" | "ok" | "qp_failed"
    estimate: np.ndarray | None
    diagnostics: MheDiagnostics | None = None

    @property
    def active(self) -> bool:
        return self.status == "ok"


@dataclass
class SmoothedSolution:
    states: np.ndarray  # (M+1, n) reconstructed window trajectory
    noises: np.ndarray  # (M, n)


class MovingHorizonEstimator:
    """Windowed estimator: collect M+1 records, then one QP per step.

    Until the window fills the estimator reports inactive; afterwards each
    update solves the window QP, returns the final smoothed state, and shifts
    the arrival-cost anchor one step forward along the smoothed trajectory.
    """

    def __init__(
        self,
        horizon: int,
        weights: MheWeights,
        bounds: StateConstraints,
        noise: NoiseBounds,
        mode_source: ModeSource,
        output: OutputModel,
        initial_guess: np.ndarray,
        qp_tol: float = 1e-8,
        qp_max_iter: int = 200,
    ) -> None:
        self.window = MeasurementWindow(horizon)
        self.weights = weights
        self.bounds = bounds
        self.noise = noise
        self.mode_source = mode_source
        self.output = output
        self.initial_guess = np.asarray(initial_guess, dtype=float).copy()
        self.anchor = self.initial_guess.copy()
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter
        self.last_solution: SmoothedSolution | None = None

    @classmethod
    def from_config(
        cls, cfg: ScenarioConfig, mode_source: ModeSource | None = None
    ) -> "MovingHorizonEstimator":
        layout = cfg.layout
        output = build_output_model(layout)
        weights = MheWeights.from_scalars(
            layout.n, output.p, cfg.q_weight, cfg.r_weight, cfg.s_weight
        )
        if mode_source is None:
            mode_source = ExactModeFactory(nominal_model(cfg), cfg.u_max)
        return cls(
            horizon=cfg.mhe_horizon,
            weights=weights,
            bounds=state_bounds(cfg),
            noise=NoiseBounds(cfg.noise.process_noise_bound),
            mode_source=mode_source,
            output=output,
            initial_guess=layout.uniform(cfg.initial_guess_kelvin),
        )

    def update(self, y: np.ndarray, u: float, t_r: float) -> MheResult:
        self.window.append(y, u, t_r)
        if not self.window.full:
            return MheResult(status="inactive", estimate=None)

        modes = identify_modes(self.window, self.mode_source)
        qp = assemble_mhe_qp(
            self.window, modes, self.weights, self.anchor, self.bounds, self.noise, self.output
        )
        sol = solve_qp(qp, tol=self.qp_tol, max_iter=self.qp_max_iter)
        if sol.status is QpStatus.INFEASIBLE:
            return MheResult(
                status="qp_failed",
                estimate=None,
                diagnostics=self._diagnostics(sol, None, None),
            )

        horizon = self.window.horizon
        n = self.anchor.shape[0]
        x0 = sol.z[:n]
        noises = sol.z[n : n * (horizon + 1)].reshape(horizon, n)
        states = np.vstack([x0, sol.z[n * (horizon + 1) :].reshape(horizon, n)])
        self.last_solution = SmoothedSolution(states=states, noises=noises)
        diagnostics = self._diagnostics(sol, states, noises)

        self.anchor = states[1].copy()
        return MheResult(status="ok", estimate=states[-1].copy(), diagnostics=diagnostics)

    def _diagnostics(
        self, sol: QpSolution, states: np.ndarray | None, noises: np.ndarray | None
    ) -> MheDiagnostics:
        if states is None:
            return MheDiagnostics(
                objective=float("nan"),
                fit_cost=float("nan"),
                arrival_cost=float("nan"),
                qp_iterations=sol.iterations,
                qp_residual=sol.residuals.max(),
                qp_status=sol.status,
            )
        fit = 0.0
        for j, rec in enumerate(self.window.records):
            omega = rec.y - self.output.apply(states[j], rec.u, rec.t_r)
            fit += float(omega @ self.weights.r_mat @ omega)
        for nu in noises:
            fit += float(nu @ self.weights.q_mat @ nu)
        gap = states[0] - self.anchor if states is not None else None
        arrival = float(gap @ self.weights.s_mat @ gap)
        return MheDiagnostics(
            objective=fit + arrival,
            fit_cost=fit,
            arrival_cost=arrival,
            qp_iterations=sol.iterations,
            qp_residual=sol.residuals.max(),
            qp_status=sol.status,
        )
