"""Estimation toolkit for aquifer thermal energy storage (ATES) systems.

Subpackages cover the finite-volume surrogate model of the two storages
and their heat exchanger, the piecewise-affine approximation used by the
moving horizon estimator, a quadratic-program solver, Kalman-filter
baselines, the demand-tracking MPC layer, and seeded experiment harnesses.
"""

from ates_mhe.domain import (
    AquiferParams,
    HxParams,
    NoiseSettings,
    RadialMesh,
    ScenarioConfig,
    StateConstraints,
    StateLayout,
    build_mesh,
    default_config,
    load_config,
    state_bounds,
)

__all__ = [
    "AquiferParams",
    "HxParams",
    "NoiseSettings",
    "RadialMesh",
    "ScenarioConfig",
    "StateConstraints",
    "StateLayout",
    "build_mesh",
    "default_config",
    "load_config",
    "state_bounds",
]

__version__ = "0.1.0"
