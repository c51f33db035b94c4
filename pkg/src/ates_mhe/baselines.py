"""Comparison estimators: unscented and linear time-varying Kalman filters.

Both run on the nominal piecewise model and ignore the temperature box, so
they serve as the unconstrained baselines for the moving horizon estimator.
The UKF propagates sigma points through the full surrogate step; the LTV-KF
exploits that the step is exactly affine at the recorded input and runs a
plain Kalman recursion on the time-varying matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ates_mhe.mhe import ExactModeFactory
from ates_mhe.pwa import OutputModel
from ates_mhe.surrogate import SurrogateModel, step_surrogate


class FilterDivergence(RuntimeError):
    """Covariance factorization failed beyond repair."""


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement and process noise standard deviations (Kelvin)."""

    meas_std: float
    process_std: float

    def __post_init__(self) -> None:
        if self.meas_std <= 0.0 or self.process_std <= 0.0:
            raise ValueError("noise standard deviations must be positive")


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = _ensure_psd(np.asarray(self.cov, dtype=float))


def _ensure_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues."""
    cov = 0.5 * (cov + cov.T)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] < -1e-10:
        vals, vecs = np.linalg.eigh(cov)
        cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        cov = 0.5 * (cov + cov.T)
    return cov


def _cholesky_with_retry(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        try:
            return np.linalg.cholesky(mat + 1e-9 * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise FilterDivergence("covariance lost positive definiteness") from exc


# scaled unscented transform, additive-noise form
_UT_ALPHA = 1.0
_UT_BETA = 2.0
_UT_KAPPA = 0.0


def _sigma_points(belief: GaussianBelief) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = belief.mean.shape[0]
    lam = _UT_ALPHA**2 * (n + _UT_KAPPA) - n
    scale = n + lam
    root = _cholesky_with_retry(scale * belief.cov)
    points = np.empty((2 * n + 1, n))
    points[0] = belief.mean
    points[1 : n + 1] = belief.mean + root.T
    points[n + 1 :] = belief.mean - root.T
    w_mean = np.full(2 * n + 1, 1.0 / (2.0 * scale))
    w_cov = w_mean.copy()
    w_mean[0] = lam / scale
    w_cov[0] = lam / scale + (1.0 - _UT_ALPHA**2 + _UT_BETA)
    return points, w_mean, w_cov


def measurement_update(
    belief: GaussianBelief, y: np.ndarray, output: OutputModel, spec: NoiseSpec
) -> GaussianBelief:
    """Linear-output Kalman correction shared by both filters."""
    c_mat = output.c_mat
    r_mat = spec.meas_std**2 * np.eye(c_mat.shape[0])
    p_yy = c_mat @ belief.cov @ c_mat.T + r_mat
    p_xy = belief.cov @ c_mat.T
    gain = np.linalg.solve(p_yy, p_xy.T).T
    innovation = np.asarray(y, dtype=float) - c_mat @ belief.mean
    mean = belief.mean + gain @ innovation
    cov = belief.cov - gain @ p_yy @ gain.T
    return GaussianBelief(mean=mean, cov=cov)


def ukf_update(
    belief: GaussianBelief,
    y: np.ndarray,
    u: float,
    t_r: float,
    model: SurrogateModel,
    output: OutputModel,
    spec: NoiseSpec,
) -> GaussianBelief:
    """Propagate sigma points through the surrogate step at the recorded
    input, then correct with the new measurement."""
    n = belief.mean.shape[0]
    points, w_mean, w_cov = _sigma_points(belief)
    propagated = np.empty_like(points)
    for i, point in enumerate(points):
        propagated[i] = step_surrogate(point, u, t_r, model)
    mean_pred = w_mean @ propagated
    centered = propagated - mean_pred
    cov_pred = (centered.T * w_cov) @ centered + spec.process_std**2 * np.eye(n)
    prior = GaussianBelief(mean=mean_pred, cov=cov_pred)
    return measurement_update(prior, y, output, spec)


class LtvKalmanFilter:
    """Kalman filter on the exact linearization at each recorded input."""

    def __init__(self, factory: ExactModeFactory, output: OutputModel, spec: NoiseSpec) -> None:
        self.factory = factory
        self.output = output
        self.spec = spec

    def predict(self, belief: GaussianBelief, u: float, t_r: float) -> GaussianBelief:
        mode = self.factory.mode_for(u)
        n = belief.mean.shape[0]
        mean = mode.apply(belief.mean, t_r)
        cov = mode.a_mat @ belief.cov @ mode.a_mat.T + self.spec.process_std**2 * np.eye(n)
        return GaussianBelief(mean=mean, cov=cov)

    def update(self, belief: GaussianBelief, y: np.ndarray, u: float, t_r: float) -> GaussianBelief:
        return measurement_update(self.predict(belief, u, t_r), y, self.output, self.spec)


def ltvkf_update(
    belief: GaussianBelief,
    y: np.ndarray,
    u: float,
    t_r: float,
    factory: ExactModeFactory,
    output: OutputModel,
    spec: NoiseSpec,
) -> GaussianBelief:
    return LtvKalmanFilter(factory, output, spec).update(belief, y, u, t_r)
