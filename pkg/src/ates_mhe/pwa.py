"""Piecewise-affine estimator model of the ATES surrogate.

The input domain [-u_max, u_max] is tiled by s equal partitions; inside each
partition the dynamics are frozen at the partition-center input, where the
surrogate step is exactly affine in the state. The offset vector depends
affinely on the exogenous return temperature, so one probing pass per
partition captures the full model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ates_mhe.domain import StateLayout
from ates_mhe.surrogate import SurrogateModel, simulate, step_surrogate


@dataclass(frozen=True)
class Partition:
    """One input-domain interval [lower, upper) with its center."""

    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ValueError("partition must have lower < upper")

    @property
    def center(self) -> float:
        return 0.5 * (self.lower + self.upper)

    def contains(self, u: float, last: bool = False) -> bool:
        if last:
            return self.lower <= u <= self.upper
        return self.lower <= u < self.upper


def build_partitions(u_max: float, s: int) -> list[Partition]:
    """s equal-width partitions tiling [-u_max, u_max], middle one centered at 0.

    s must be odd so that the zero-flow physics sits exactly at a partition
    center; intervals are half-open with the last one closed.
    """
    if u_max <= 0.0:
        raise ValueError("u_max must be positive")
    if s <= 3:
        raise ValueError("partition count s must be greater than three")
    if s % 2 == 0:
        raise ValueError("partition count s must be odd so u = 0 is a partition center")
    edges = np.linspace(-u_max, u_max, s + 1)
    # enforce exact antisymmetry so the central partition is centered at 0.0
    edges = 0.5 * (edges - edges[::-1])
    return [Partition(float(edges[i]), float(edges[i + 1])) for i in range(s)]


@dataclass(frozen=True)
class AffineMode:
    """Exact affine step x+ = A x + f(T_r) at one frozen input u_center.

    ``f`` is affine in the return temperature: f(T_r) = f_const + T_r*f_slope.
    ``b_vec`` (the input direction of the step) is populated only by the MPC
    layer's coarse model.
    """

    u_center: float
    a_mat: np.ndarray
    f_const: np.ndarray
    f_slope: np.ndarray
    partition: Partition | None = None
    b_vec: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.a_mat.setflags(write=False)
        self.f_const.setflags(write=False)
        self.f_slope.setflags(write=False)
        if self.b_vec is not None:
            self.b_vec.setflags(write=False)
        if not np.all(np.isfinite(self.a_mat)):
            raise ValueError("state matrix must be finite")

    @property
    def n(self) -> int:
        return self.a_mat.shape[0]

    def offset(self, t_r: float) -> np.ndarray:
        return self.f_const + t_r * self.f_slope

    def apply(self, x: np.ndarray, t_r: float) -> np.ndarray:
        return self.a_mat @ x + self.offset(t_r)


@dataclass(frozen=True)
class OutputModel:
    """Shared affine output map y = C x + D u + e(T_r).

    All three sensors (building-side outlet, warm and cold borehole) read
    state entries directly, so D and e vanish; the general form is kept for
    callers that need it.
    """

    c_mat: np.ndarray
    d_vec: np.ndarray
    e_const: np.ndarray
    e_slope: np.ndarray

    def __post_init__(self) -> None:
        for arr in (self.c_mat, self.d_vec, self.e_const, self.e_slope):
            arr.setflags(write=False)

    @property
    def p(self) -> int:
        return self.c_mat.shape[0]

    def offset(self, u: float, t_r: float) -> np.ndarray:
        return self.d_vec * u + self.e_const + t_r * self.e_slope

    def apply(self, x: np.ndarray, u: float = 0.0, t_r: float = 0.0) -> np.ndarray:
        return self.c_mat @ x + self.offset(u, t_r)


def build_output_model(layout: StateLayout) -> OutputModel:
    p = len(layout.measured_indices)
    c_mat = np.zeros((p, layout.n))
    for row, idx in enumerate(layout.measured_indices):
        c_mat[row, idx] = 1.0
    return OutputModel(
        c_mat=c_mat, d_vec=np.zeros(p), e_const=np.zeros(p), e_slope=np.zeros(p)
    )


_PROBE_REFERENCE_K = 284.85


def linearize_at(
    u_center: float, model: SurrogateModel, partition: Partition | None = None
) -> AffineMode:
    """Materialize the exact affine step at a frozen input by column probing.

    The surrogate step is affine in the state and in T_r once u is fixed, so
    n+2 step evaluations determine (A, f_const, f_slope) exactly up to
    rounding.
    """
    layout = model.layout
    n = layout.n
    x_ref = layout.uniform(_PROBE_REFERENCE_K)
    base = step_surrogate(x_ref, u_center, 0.0, model)
    a_mat = np.empty((n, n))
    for j in range(n):
        x_probe = x_ref.copy()
        x_probe[j] += 1.0
        a_mat[:, j] = step_surrogate(x_probe, u_center, 0.0, model) - base
    f_const = base - a_mat @ x_ref
    f_slope = step_surrogate(x_ref, u_center, 1.0, model) - base
    return AffineMode(
        u_center=float(u_center),
        a_mat=a_mat,
        f_const=f_const,
        f_slope=f_slope,
        partition=partition,
    )


def build_modes(model: SurrogateModel, u_max: float, s: int) -> list[AffineMode]:
    """One AffineMode per partition, linearized at the partition centers."""
    return [linearize_at(p.center, model, partition=p) for p in build_partitions(u_max, s)]


def locate_partition(modes: Sequence[AffineMode], u: float) -> int:
    """Index of the partition containing u; boundary values go to the higher index."""
    lowers = np.array([m.partition.lower for m in modes])
    upper_last = modes[-1].partition.upper
    if u < lowers[0] or u > upper_last:
        raise ValueError(f"input {u} outside [{lowers[0]}, {upper_last}]")
    idx = int(np.searchsorted(lowers, u, side="right")) - 1
    return min(idx, len(modes) - 1)


def pwa_step(x: np.ndarray, u: float, t_r: float, modes: Sequence[AffineMode]) -> np.ndarray:
    """Apply the affine mode whose partition contains u."""
    return modes[locate_partition(modes, u)].apply(np.asarray(x, dtype=float), t_r)


@dataclass(frozen=True)
class AccuracyStudy:
    """One-step deviation statistics between the PWA and surrogate models.

    ``bin_*`` arrays hold per-partition statistics pooled over states and
    samples; the ``state_mean_*`` aggregates summarize the per-sample error
    averaged over all n states (the headline modeling-error curve), and the
    ``pooled_*`` aggregates cover individual state entries.
    """

    bin_centers: np.ndarray
    bin_mean: np.ndarray
    bin_std: np.ndarray
    bin_min: np.ndarray
    bin_max: np.ndarray
    bin_q025: np.ndarray
    bin_q975: np.ndarray
    bin_counts: np.ndarray
    max_abs_state_mean: float
    std_state_mean: float
    pooled_max_abs: float
    pooled_std: float

    def to_csv(self, handle) -> None:
        handle.write("u,mean_err,std_err,min_err,max_err\n")
        for i in range(len(self.bin_centers)):
            if self.bin_counts[i] == 0:
                continue
            handle.write(
                ",".join(
                    format(v, ".17g")
                    for v in (
                        self.bin_centers[i],
                        self.bin_mean[i],
                        self.bin_std[i],
                        self.bin_min[i],
                        self.bin_max[i],
                    )
                )
                + "\n"
            )


_STUDY_T_R = 276.15


def _study_states(model: SurrogateModel, u_max: float, rng, count: int) -> np.ndarray:
    """Representative operating states: the tail of a seeded heating run.

    The one-step deviation is evaluated from a fixed operating condition over
    the whole input domain, so the sampled states share a consistent history
    (varying pump rates, constant return temperature).
    """
    layout = model.layout
    x0 = layout.uniform(model.aquifer.t_amb)
    inputs: list[tuple[float, float]] = []
    while len(inputs) < 60 + count:
        magnitude = rng.uniform(0.3, 1.0) * u_max
        inputs.extend([(magnitude, _STUDY_T_R)] * int(rng.integers(4, 10)))
    traj = simulate(x0, inputs[: 60 + count], model)
    return traj[-count:]


def accuracy_study(
    modes: Sequence[AffineMode],
    model: SurrogateModel,
    n_samples: int,
    seed: int,
    at_centers: bool = False,
) -> AccuracyStudy:
    """Sample (x, u) pairs and bin the one-step PWA-vs-surrogate deviation by u.

    States come from the tail of a seeded operating run; for each the full
    input domain is sampled uniformly with the run's return temperature held
    fixed (snapped to the partition centers when ``at_centers`` is set).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    u_lo = modes[0].partition.lower
    u_hi = modes[-1].partition.upper
    states = _study_states(model, u_hi, rng, max(10, min(n_samples, 40)))

    s = len(modes)
    per_bin: list[list[np.ndarray]] = [[] for _ in range(s)]
    state_means = np.empty(n_samples)
    for i in range(n_samples):
        x = states[rng.integers(0, states.shape[0])]
        u = float(rng.uniform(u_lo, u_hi))
        idx = locate_partition(modes, u)
        if at_centers:
            u = modes[idx].u_center
        err = pwa_step(x, u, _STUDY_T_R, modes) - step_surrogate(x, u, _STUDY_T_R, model)
        per_bin[idx].append(err)
        state_means[i] = float(np.mean(err))

    centers = np.array([m.u_center for m in modes])
    nan = float("nan")
    mean = np.full(s, nan)
    std = np.full(s, nan)
    lo = np.full(s, nan)
    hi = np.full(s, nan)
    q025 = np.full(s, nan)
    q975 = np.full(s, nan)
    counts = np.zeros(s, dtype=int)
    pooled_all: list[np.ndarray] = []
    for i, errors in enumerate(per_bin):
        if not errors:
            continue
        pooled = np.concatenate(errors)
        pooled_all.append(pooled)
        counts[i] = len(errors)
        mean[i] = float(np.mean(pooled))
        std[i] = float(np.std(pooled))
        lo[i] = float(np.min(pooled))
        hi[i] = float(np.max(pooled))
        q025[i] = float(np.quantile(pooled, 0.025))
        q975[i] = float(np.quantile(pooled, 0.975))
    everything = np.concatenate(pooled_all)
    return AccuracyStudy(
        bin_centers=centers,
        bin_mean=mean,
        bin_std=std,
        bin_min=lo,
        bin_max=hi,
        bin_q025=q025,
        bin_q975=q975,
        bin_counts=counts,
        max_abs_state_mean=float(np.max(np.abs(state_means))),
        std_state_mean=float(np.std(state_means)),
        pooled_max_abs=float(np.max(np.abs(everything))),
        pooled_std=float(np.std(everything)),
    )
