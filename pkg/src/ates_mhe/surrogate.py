"""Discrete-time piecewise-nonlinear ATES model.

One implicit (backward-Euler) finite-volume step of the radial
advection-diffusion equation per storage, coupled through a cocurrent heat
exchanger. The operational mode follows the sign of the pump flow u:
u > 0 extracts from the warm storage and injects into the cold one
(heating), u < 0 the reverse (cooling), u = 0 leaves only diffusion.

For fixed u the step is exactly affine in the state, which the
piecewise-affine estimator model exploits.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy.linalg import solve_banded

from ates_mhe.domain import (
    AquiferParams,
    HxParams,
    RadialMesh,
    ScenarioConfig,
    StateLayout,
    build_mesh,
)


class Mode(enum.Enum):
    HEATING = "heating"
    INACTIVITY = "inactivity"
    COOLING = "cooling"


def mode_of(u: float) -> Mode:
    """Classify the pump flow by sign; exact zero means inactivity."""
    if not math.isfinite(u):
        raise ValueError("pump flow must be finite")
    if u > 0.0:
        return Mode.HEATING
    if u < 0.0:
        return Mode.COOLING
    return Mode.INACTIVITY


def darcy_velocity(u: float, r: float, filter_length: float, porosity: float) -> float:
    """Radial groundwater velocity v = u / (2 pi r l phi) at radius r."""
    if r <= 0.0:
        raise ValueError("radius must be positive")
    return u / (2.0 * math.pi * r * filter_length * porosity)


def _cocurrent_effectiveness(c_own: float, c_other: float, ua: float) -> float:
    """Temperature change coefficient of one stream of a cocurrent HX.

    P = (1 - exp(-NTU (1 + Cr))) / (1 + Cr) with NTU = UA/C_own and
    Cr = C_own/C_other; always in [0, 1].
    """
    ntu = ua / c_own
    c_ratio = c_own / c_other
    exponent = ntu * (1.0 + c_ratio)
    decay = 0.0 if exponent > 700.0 else math.exp(-exponent)
    return min(1.0, max(0.0, (1.0 - decay) / (1.0 + c_ratio)))


def hx_alpha(u: float, hx: HxParams, c_w: float) -> float:
    """Groundwater-side temperature change coefficient of the heat exchanger.

    Only defined while water flows (|u| > 0); callers must branch on the
    inactivity mode first.
    """
    if u == 0.0:
        raise ValueError("hx_alpha is undefined for u = 0; handle inactivity separately")
    return _cocurrent_effectiveness(c_w * abs(u), c_w * hx.q_b, hx.ua)


def hx_alpha_building(u: float, hx: HxParams, c_w: float) -> float:
    """Building-side counterpart of hx_alpha (same HX, other stream)."""
    if u == 0.0:
        raise ValueError("hx_alpha_building is undefined for u = 0")
    return _cocurrent_effectiveness(c_w * hx.q_b, c_w * abs(u), hx.ua)


@dataclass(frozen=True)
class SurrogateModel:
    """Aquifer physics, mesh, HX and step size, plus per-storage conductivity fields.

    ``far_boundary`` is "dirichlet" (ambient temperature held at r_inf) for
    production use; "reflective" (zero-flux) exists for conservation checks.
    """

    aquifer: AquiferParams
    mesh: RadialMesh
    hx: HxParams
    dt: float
    warm_conductivity: np.ndarray = field(default=None)  # type: ignore[assignment]
    cold_conductivity: np.ndarray = field(default=None)  # type: ignore[assignment]
    far_boundary: str = "dirichlet"

    def __post_init__(self) -> None:
        for name in ("warm_conductivity", "cold_conductivity"):
            value = getattr(self, name)
            if value is None:
                value = np.full(self.mesh.n_cells, self.aquifer.conductivity)
            else:
                value = np.asarray(value, dtype=float)
                if value.shape != (self.mesh.n_cells,):
                    raise ValueError(f"{name} must have one entry per cell")
                if np.any(value <= 0.0):
                    raise ValueError(f"{name} must be positive cell-wise")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.far_boundary not in ("dirichlet", "reflective"):
            raise ValueError("far_boundary must be 'dirichlet' or 'reflective'")

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.mesh.n_cells)


def nominal_model(cfg: ScenarioConfig, far_boundary: str = "dirichlet") -> SurrogateModel:
    """Model with the scalar nominal conductivity in every cell."""
    return SurrogateModel(
        aquifer=cfg.aquifer,
        mesh=cfg.mesh(),
        hx=cfg.hx,
        dt=cfg.dt,
        far_boundary=far_boundary,
    )


def _face_conductivity(cell_conductivity: np.ndarray) -> np.ndarray:
    """Harmonic mean at interior faces; keeps the diffusive flux continuous."""
    left = cell_conductivity[:-1]
    right = cell_conductivity[1:]
    return 2.0 * left * right / (left + right)


def _profile_step(
    profile: np.ndarray,
    signed_flow: float,
    t_inj: float | None,
    conductivity: np.ndarray,
    model: SurrogateModel,
) -> np.ndarray:
    """One implicit step of a single storage profile.

    ``signed_flow`` is the volumetric flow through the storage, positive for
    injection (outward flow from the borehole) and negative for extraction.
    ``t_inj`` is the Dirichlet injection temperature and must be given exactly
    when signed_flow > 0. Returns the new profile [borehole node, cells...].
    """
    mesh = model.mesh
    nc = mesh.n_cells
    aq = model.aquifer
    two_pi_l = 2.0 * math.pi * mesh.filter_length

    cells_old = profile[1:]
    capacity = aq.c_a * mesh.volumes / model.dt

    diag = capacity.copy()
    lower = np.zeros(nc)  # coupling to the inner neighbour
    upper = np.zeros(nc)  # coupling to the outer neighbour
    rhs = capacity * cells_old

    # diffusion through interior faces (central, with the 1/r metric folded
    # into the annular face area 2 pi l r)
    if nc > 1:
        lam_face = _face_conductivity(conductivity)
        d_int = two_pi_l * lam_face * mesh.faces[1:-1] / np.diff(mesh.centers)
        diag[:-1] += d_int
        diag[1:] += d_int
        upper[:-1] -= d_int
        lower[1:] -= d_int

    # inner face at r0: zero-gradient while extracting or inactive,
    # Dirichlet injection temperature while injecting
    if signed_flow > 0.0:
        if t_inj is None:
            raise ValueError("injection step requires an injection temperature")
        d0 = two_pi_l * conductivity[0] * mesh.faces[0] / (mesh.centers[0] - mesh.faces[0])
        diag[0] += d0
        rhs[0] += d0 * t_inj

    # far face at r_inf
    if model.far_boundary == "dirichlet":
        d_far = (
            two_pi_l * conductivity[-1] * mesh.faces[-1] / (mesh.faces[-1] - mesh.centers[-1])
        )
        diag[-1] += d_far
        rhs[-1] += d_far * aq.t_amb
    elif signed_flow != 0.0:
        raise ValueError("reflective far boundary supports diffusion-only steps")

    # first-order upwind advection; the enthalpy flux through a face is
    # c_w * flow * T_upwind, independent of radius
    if signed_flow > 0.0:
        a = aq.c_w * signed_flow
        rhs[0] += a * t_inj
        diag += a
        lower[1:] -= a
    elif signed_flow < 0.0:
        b = aq.c_w * (-signed_flow)
        rhs[-1] += b * aq.t_amb
        diag += b
        upper[:-1] -= b

    ab = np.zeros((3, nc))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    try:
        cells_new = solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by M-matrix structure
        raise ValueError("singular implicit system; check dt/mesh combination") from exc

    borehole = t_inj if signed_flow > 0.0 else cells_new[0]
    return np.concatenate(([borehole], cells_new))


def step_surrogate(x: np.ndarray, u: float, t_r: float, model: SurrogateModel) -> np.ndarray:
    """Advance the full state one step under pump flow u and return temperature t_r."""
    layout = model.layout
    x = np.asarray(x, dtype=float)
    if x.shape != (layout.n,):
        raise ValueError(f"state length must be {layout.n}")
    mode = mode_of(u)
    t_b = x[layout.idx_tb]
    warm = x[layout.warm]
    cold = x[layout.cold]
    aq = model.aquifer

    if mode is Mode.INACTIVITY:
        warm_new = _profile_step(warm, 0.0, None, model.warm_conductivity, model)
        cold_new = _profile_step(cold, 0.0, None, model.cold_conductivity, model)
        t_b_new = t_b  # no flow through the HX
    elif mode is Mode.HEATING:
        alpha_a = hx_alpha(u, model.hx, aq.c_w)
        alpha_b = hx_alpha_building(u, model.hx, aq.c_w)
        t_extract = warm[0]
        t_inj = (1.0 - alpha_a) * t_extract + alpha_a * t_r
        t_b_new = (1.0 - alpha_b) * t_r + alpha_b * t_extract
        warm_new = _profile_step(warm, -abs(u), None, model.warm_conductivity, model)
        cold_new = _profile_step(cold, abs(u), t_inj, model.cold_conductivity, model)
    else:
        alpha_a = hx_alpha(u, model.hx, aq.c_w)
        alpha_b = hx_alpha_building(u, model.hx, aq.c_w)
        t_extract = cold[0]
        t_inj = (1.0 - alpha_a) * t_extract + alpha_a * t_r
        t_b_new = (1.0 - alpha_b) * t_r + alpha_b * t_extract
        cold_new = _profile_step(cold, -abs(u), None, model.cold_conductivity, model)
        warm_new = _profile_step(warm, abs(u), t_inj, model.warm_conductivity, model)

    return layout.pack(t_b_new, warm_new, cold_new)


def simulate(
    x0: np.ndarray, inputs: Sequence[tuple[float, float]], model: SurrogateModel
) -> np.ndarray:
    """Roll the surrogate forward; returns a (len(inputs)+1, n) trajectory."""
    x0 = np.asarray(x0, dtype=float)
    traj = np.empty((len(inputs) + 1, len(x0)))
    traj[0] = x0
    for k, (u, t_r) in enumerate(inputs):
        traj[k + 1] = step_surrogate(traj[k], u, t_r, model)
    return traj


def stored_energy(profile: np.ndarray, model: SurrogateModel) -> float:
    """Thermal energy of one storage's interior cells, sum of c_a*V*T."""
    return float(np.sum(model.aquifer.c_a * model.mesh.volumes * profile[1:]))


def trajectory_header(layout: StateLayout) -> list[str]:
    per = layout.per_storage
    return (
        ["k", "t_seconds", "u", "T_r", "T_b"]
        + [f"Tw_{i}" for i in range(per)]
        + [f"Tc_{i}" for i in range(per)]
    )


def export_trajectory_csv(
    handle: TextIO,
    trajectory: np.ndarray,
    inputs: Sequence[tuple[float, float]],
    dt: float,
    layout: StateLayout,
    extra_columns: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a trajectory as CSV with full double precision.

    The final row has no applied input; its u is written as 0 and T_r repeats
    the last value. ``extra_columns`` appends named per-row columns (e.g.
    noisy measurements).
    """
    header = trajectory_header(layout)
    extras = extra_columns or {}
    header += list(extras.keys())
    handle.write(",".join(header) + "\n")
    last_tr = inputs[-1][1] if inputs else 0.0
    for k in range(trajectory.shape[0]):
        u_k, tr_k = inputs[k] if k < len(inputs) else (0.0, last_tr)
        row = [str(k), _fmt(k * dt), _fmt(u_k), _fmt(tr_k)]
        row += [_fmt(v) for v in trajectory[k]]
        row += [_fmt(extras[name][k]) for name in extras]
        handle.write(",".join(row) + "\n")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def read_trajectory_csv(handle: Iterable[str], layout: StateLayout) -> dict[str, np.ndarray]:
    """Read a trajectory CSV back into arrays keyed by column name."""
    lines = iter(handle)
    header = next(lines).strip().split(",")
    rows = [line.strip().split(",") for line in lines if line.strip()]
    data = np.array([[float(v) for v in row] for row in rows])
    return {name: data[:, i] for i, name in enumerate(header)}
