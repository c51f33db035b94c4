"""Physical parameters, radial mesh, state layout, and scenario configuration.

Everything in here is an immutable value object; instances can be shared
freely between threads and processes. Temperatures are Kelvin, lengths
metres, flows m^3/s, volumetric heat capacities J/(m^3 K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import yaml

FREEZING_POINT_K = 273.15
WARM_UPPER_K = 293.15


class ConfigError(ValueError):
    """Raised when a scenario document is missing keys or violates an invariant."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class AquiferParams:
    """Subsurface and geometry parameters shared by both storages.

    ``conductivity`` is the nominal scalar heat conduction coefficient; truth
    simulations override it with a per-cell field on the surrogate model.
    """

    porosity: float
    c_a: float
    c_w: float
    conductivity: float
    filter_length: float
    r0: float
    r_inf: float
    t_amb: float

    def __post_init__(self) -> None:
        _require(0.0 < self.porosity < 1.0, "porosity: must lie strictly between 0 and 1")
        _require(self.c_a > 0.0, "c_a: must be positive")
        _require(self.c_w > 0.0, "c_w: must be positive")
        _require(self.conductivity > 0.0, "lambda_nominal: must be positive")
        _require(self.filter_length > 0.0, "filter_length: must be positive")
        _require(0.0 < self.r0 < self.r_inf, "mesh: requires 0 < r0 < r_inf")
        _require(self.t_amb > FREEZING_POINT_K, "t_amb: must be above the freezing point")


@dataclass(frozen=True)
class HxParams:
    """Cocurrent heat exchanger: building-side flow and overall conductance."""

    q_b: float
    ua: float

    def __post_init__(self) -> None:
        _require(self.q_b > 0.0, "q_b: must be positive")
        _require(self.ua > 0.0, "ua: must be positive")


@dataclass(frozen=True)
class NoiseSettings:
    """Measurement noise std (Gaussian) and process-noise box half-width (uniform)."""

    meas_noise_std: float = 0.0333
    process_noise_bound: float = 0.1

    def __post_init__(self) -> None:
        _require(self.meas_noise_std >= 0.0, "meas_noise_std: must be non-negative")
        _require(self.process_noise_bound > 0.0, "process_noise_bound: must be positive")


@dataclass(frozen=True)
class RadialMesh:
    """Finite-volume cells over [r0, r_inf]: faces, centers and annular volumes."""

    n_cells: int
    faces: np.ndarray
    centers: np.ndarray
    volumes: np.ndarray
    filter_length: float

    def __post_init__(self) -> None:
        for arr in (self.faces, self.centers, self.volumes):
            arr.setflags(write=False)
        _require(self.n_cells >= 1, "mesh: cell count must be at least 1")
        _require(len(self.faces) == self.n_cells + 1, "mesh: face count mismatch")
        _require(bool(np.all(np.diff(self.faces) > 0.0)), "mesh: faces must strictly increase")
        _require(bool(np.all(self.volumes > 0.0)), "mesh: volumes must be positive")

    @property
    def r0(self) -> float:
        return float(self.faces[0])

    @property
    def r_inf(self) -> float:
        return float(self.faces[-1])

    @property
    def spacing(self) -> np.ndarray:
        return np.diff(self.faces)

    def total_volume(self) -> float:
        return float(np.sum(self.volumes))


def build_mesh(r0: float, r_inf: float, n_cells: int, filter_length: float) -> RadialMesh:
    """Uniform-spacing radial mesh with annular cell volumes pi*(ro^2-ri^2)*l."""
    if n_cells < 1:
        raise ConfigError("mesh: cell count must be at least 1")
    if not 0.0 < r0 < r_inf:
        raise ConfigError("mesh: requires 0 < r0 < r_inf")
    if filter_length <= 0.0:
        raise ConfigError("filter_length: must be positive")
    faces = np.linspace(r0, r_inf, n_cells + 1)
    centers = 0.5 * (faces[:-1] + faces[1:])
    volumes = math.pi * (faces[1:] ** 2 - faces[:-1] ** 2) * filter_length
    return RadialMesh(
        n_cells=n_cells,
        faces=faces,
        centers=centers,
        volumes=volumes,
        filter_length=filter_length,
    )


@dataclass(frozen=True)
class StateLayout:
    """Index map for the concatenated state [T_b, warm profile, cold profile].

    Each storage profile carries an explicit borehole node at r0 (index 0 of
    the profile) followed by ``n_cells`` interior cells, so the total state
    dimension is 1 + 2*(n_cells + 1). Sensors measure T_b and both borehole
    nodes.
    """

    n_cells: int

    @property
    def per_storage(self) -> int:
        return self.n_cells + 1

    @property
    def n(self) -> int:
        return 1 + 2 * self.per_storage

    @property
    def idx_tb(self) -> int:
        return 0

    @property
    def warm(self) -> slice:
        return slice(1, 1 + self.per_storage)

    @property
    def cold(self) -> slice:
        return slice(1 + self.per_storage, self.n)

    @property
    def idx_warm_borehole(self) -> int:
        return 1

    @property
    def idx_cold_borehole(self) -> int:
        return 1 + self.per_storage

    @property
    def measured_indices(self) -> tuple[int, int, int]:
        return (self.idx_tb, self.idx_warm_borehole, self.idx_cold_borehole)

    def pack(self, t_b: float, warm: np.ndarray, cold: np.ndarray) -> np.ndarray:
        warm = np.asarray(warm, dtype=float)
        cold = np.asarray(cold, dtype=float)
        if warm.shape != (self.per_storage,) or cold.shape != (self.per_storage,):
            raise ValueError(
                f"profile length must be {self.per_storage} (borehole node + {self.n_cells} cells)"
            )
        return np.concatenate(([float(t_b)], warm, cold))

    def unpack(self, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"state length must be {self.n}, got {x.shape}")
        return float(x[0]), x[self.warm].copy(), x[self.cold].copy()

    def uniform(self, temperature: float) -> np.ndarray:
        return np.full(self.n, float(temperature))


@dataclass(frozen=True)
class StateConstraints:
    """Entry-wise temperature bounds on the full state vector."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        self.lower.setflags(write=False)
        self.upper.setflags(write=False)
        _require(self.lower.shape == self.upper.shape, "state bounds: shape mismatch")
        _require(bool(np.all(self.lower <= self.upper)), "state bounds: lower exceeds upper")

    @property
    def n(self) -> int:
        return len(self.lower)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def violation(self, x: np.ndarray) -> float:
        return float(
            max(np.max(self.lower - x, initial=0.0), np.max(x - self.upper, initial=0.0))
        )

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete scenario description: physics, HX, mesh, horizons, weights, noise."""

    aquifer: AquiferParams
    hx: HxParams
    n_cells: int
    dt: float
    u_max: float
    t_r_heat: float
    t_r_cool: float
    noise: NoiseSettings
    mhe_horizon: int
    mpc_horizon: int
    partitions: int
    q_weight: float
    r_weight: float
    s_weight: float
    seed: int
    lambda_min: float
    lambda_max: float
    initial_guess_kelvin: float = field(default=float("nan"))
    steps: int = 200

    def __post_init__(self) -> None:
        _require(self.n_cells >= 1, "n_cells: must be at least 1")
        _require(self.dt > 0.0, "dt: must be positive")
        _require(self.u_max > 0.0, "u_max: must be positive")
        _require(self.mhe_horizon >= 1, "mhe_horizon: must be at least 1")
        _require(self.mpc_horizon >= 1, "mpc_horizon: must be at least 1")
        _require(self.partitions > 3, "partitions: s must be greater than three")
        _require(self.q_weight > 0.0, "q_weight: must be positive")
        _require(self.r_weight > 0.0, "r_weight: must be positive")
        _require(self.s_weight > 0.0, "s_weight: must be positive")
        _require(
            0.0 < self.lambda_min <= self.lambda_max,
            "lambda_min/lambda_max: need 0 < lambda_min <= lambda_max",
        )
        _require(self.steps >= 1, "steps: must be at least 1")
        if math.isnan(self.initial_guess_kelvin):
            object.__setattr__(self, "initial_guess_kelvin", self.aquifer.t_amb)

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.n_cells)

    def mesh(self) -> RadialMesh:
        return build_mesh(
            self.aquifer.r0, self.aquifer.r_inf, self.n_cells, self.aquifer.filter_length
        )


def state_bounds(cfg: ScenarioConfig) -> StateConstraints:
    """Temperature box for the full state.

    Cold-storage entries live in [freezing point, T_amb], warm-storage entries
    in [T_amb, upper bound]; T_b may take either stream's outlet value, so it
    gets the union of both ranges.
    """
    layout = cfg.layout
    lower = np.empty(layout.n)
    upper = np.empty(layout.n)
    lower[layout.idx_tb] = FREEZING_POINT_K
    upper[layout.idx_tb] = WARM_UPPER_K
    lower[layout.warm] = cfg.aquifer.t_amb
    upper[layout.warm] = WARM_UPPER_K
    lower[layout.cold] = FREEZING_POINT_K
    upper[layout.cold] = cfg.aquifer.t_amb
    return StateConstraints(lower=lower, upper=upper)


_REQUIRED_KEYS = (
    "porosity",
    "c_a",
    "c_w",
    "lambda_nominal",
    "lambda_min",
    "lambda_max",
    "filter_length",
    "r0",
    "r_inf",
    "n_cells",
    "t_amb",
    "dt",
    "u_max",
    "q_b",
    "ua",
    "t_r_heat",
    "t_r_cool",
    "mhe_horizon",
    "mpc_horizon",
    "partitions",
    "q_weight",
    "r_weight",
    "s_weight",
    "seed",
)

_OPTIONAL_KEYS = ("meas_noise_std", "process_noise_bound", "initial_guess_kelvin", "steps")


def config_from_mapping(doc: Mapping[str, Any]) -> ScenarioConfig:
    """Validate a flat key/value mapping into a ScenarioConfig."""
    missing = [key for key in _REQUIRED_KEYS if key not in doc]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    unknown = [key for key in doc if key not in _REQUIRED_KEYS and key not in _OPTIONAL_KEYS]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    aquifer = AquiferParams(
        porosity=float(doc["porosity"]),
        c_a=float(doc["c_a"]),
        c_w=float(doc["c_w"]),
        conductivity=float(doc["lambda_nominal"]),
        filter_length=float(doc["filter_length"]),
        r0=float(doc["r0"]),
        r_inf=float(doc["r_inf"]),
        t_amb=float(doc["t_amb"]),
    )
    hx = HxParams(q_b=float(doc["q_b"]), ua=float(doc["ua"]))
    noise = NoiseSettings(
        meas_noise_std=float(doc.get("meas_noise_std", 0.0333)),
        process_noise_bound=float(doc.get("process_noise_bound", 0.1)),
    )
    return ScenarioConfig(
        aquifer=aquifer,
        hx=hx,
        n_cells=int(doc["n_cells"]),
        dt=float(doc["dt"]),
        u_max=float(doc["u_max"]),
        t_r_heat=float(doc["t_r_heat"]),
        t_r_cool=float(doc["t_r_cool"]),
        noise=noise,
        mhe_horizon=int(doc["mhe_horizon"]),
        mpc_horizon=int(doc["mpc_horizon"]),
        partitions=int(doc["partitions"]),
        q_weight=float(doc["q_weight"]),
        r_weight=float(doc["r_weight"]),
        s_weight=float(doc["s_weight"]),
        seed=int(doc["seed"]),
        lambda_min=float(doc["lambda_min"]),
        lambda_max=float(doc["lambda_max"]),
        initial_guess_kelvin=float(doc.get("initial_guess_kelvin", float("nan"))),
        steps=int(doc.get("steps", 200)),
    )


def load_config(text: str) -> ScenarioConfig:
    """Parse a flat key/value scenario document (YAML mapping) and validate it."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a flat key/value mapping")
    return config_from_mapping(doc)


def load_config_file(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return load_config(handle.read())


def default_config(**overrides: Any) -> ScenarioConfig:
    """Belgian-plant scenario defaults; keyword overrides use config-file keys.

    The estimator weight scalars are penalty weights on the residual norms.
    The defaults correspond to process/measurement tuning covariances of 10
    and 0.01 (weights are their inverses); the arrival weight is used as
    given since it deliberately encodes a weak prior.
    """
    doc: dict[str, Any] = {
        "porosity": 0.3,
        "c_a": 4.4625e6,
        "c_w": 4.18e6,
        "lambda_nominal": 3.5,
        "lambda_min": 3.0,
        "lambda_max": 5.0,
        "filter_length": 38.0,
        "r0": 0.4,
        "r_inf": 4.0,
        "n_cells": 15,
        "t_amb": 284.85,
        "dt": 3600.0,
        "u_max": 0.0277,
        "q_b": 0.1,
        "ua": 2.0e5,
        "t_r_heat": 276.15,
        "t_r_cool": 291.15,
        "mhe_horizon": 40,
        "mpc_horizon": 12,
        "partitions": 51,
        "q_weight": 0.1,
        "r_weight": 100.0,
        "s_weight": 0.001,
        "seed": 1,
    }
    doc.update(overrides)
    return config_from_mapping(doc)
