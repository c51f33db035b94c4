import math

import numpy as np
import pytest

from ates_mhe.domain import (
    ConfigError,
    StateLayout,
    build_mesh,
    config_from_mapping,
    default_config,
    load_config,
    state_bounds,
)


class TestBuildMesh:
    def test_paper_geometry(self):
        mesh = build_mesh(0.4, 4.0, 15, 38.0)
        assert mesh.n_cells == 15
        np.testing.assert_allclose(mesh.spacing, 0.24, rtol=1e-12)
        assert mesh.centers[0] == pytest.approx(0.52, abs=1e-12)

    def test_single_cell_spans_domain(self):
        mesh = build_mesh(0.4, 4.0, 1, 38.0)
        assert mesh.faces[0] == 0.4 and mesh.faces[-1] == 4.0
        assert mesh.volumes[0] == pytest.approx(math.pi * (16.0 - 0.16) * 38.0, rel=1e-12)

    @pytest.mark.parametrize("n_cells", [1, 2, 7, 15, 100])
    def test_volumes_telescope_to_annulus(self, n_cells):
        mesh = build_mesh(0.4, 4.0, n_cells, 38.0)
        exact = math.pi * (4.0**2 - 0.4**2) * 38.0
        assert abs(mesh.total_volume() - exact) / exact < 1e-9

    def test_rejects_bad_geometry(self):
        with pytest.raises(ConfigError, match="mesh"):
            build_mesh(0.4, 0.4, 15, 38.0)
        with pytest.raises(ConfigError, match="cell count"):
            build_mesh(0.4, 4.0, 0, 38.0)


class TestStateLayout:
    def test_dimension_accounting(self):
        # 15 cells plus an explicit borehole node per storage, plus T_b
        assert StateLayout(15).n == 33

    def test_pack_unpack_roundtrip(self, rng):
        layout = StateLayout(15)
        for _ in range(20):
            x = rng.uniform(270.0, 295.0, layout.n)
            t_b, warm, cold = layout.unpack(x)
            np.testing.assert_array_equal(layout.pack(t_b, warm, cold), x)

    def test_measured_indices(self):
        layout = StateLayout(15)
        assert layout.measured_indices == (0, 1, 17)


class TestStateBounds:
    def test_values(self, cfg):
        b = state_bounds(cfg)
        layout = cfg.layout
        assert b.lower[layout.idx_tb] == 273.15 and b.upper[layout.idx_tb] == 293.15
        np.testing.assert_array_equal(b.lower[layout.warm], 284.85)
        np.testing.assert_array_equal(b.upper[layout.warm], 293.15)
        np.testing.assert_array_equal(b.lower[layout.cold], 273.15)
        np.testing.assert_array_equal(b.upper[layout.cold], 284.85)

    def test_consistency(self, cfg):
        b = state_bounds(cfg)
        assert np.all(b.lower <= b.upper)
        assert b.n == cfg.layout.n

    def test_contains_and_violation(self, cfg):
        b = state_bounds(cfg)
        mid = 0.5 * (b.lower + b.upper)
        assert b.contains(mid)
        bad = mid.copy()
        bad[0] = 200.0
        assert not b.contains(bad)
        assert b.violation(bad) == pytest.approx(73.15)


class TestLoadConfig:
    def test_paper_defaults(self):
        cfg = default_config()
        assert cfg.aquifer.porosity == 0.3
        assert cfg.aquifer.c_a == 4.4625e6
        assert cfg.dt == 3600.0
        assert cfg.initial_guess_kelvin == cfg.aquifer.t_amb

    def test_yaml_roundtrip(self):
        text = "\n".join(
            [
                "porosity: 0.3",
                "c_a: 4.4625e6",
                "c_w: 4.18e6",
                "lambda_nominal: 3.5",
                "lambda_min: 3.0",
                "lambda_max: 5.0",
                "filter_length: 38.0",
                "r0: 0.4",
                "r_inf: 4.0",
                "n_cells: 15",
                "t_amb: 284.85",
                "dt: 3600.0",
                "u_max: 0.0277",
                "q_b: 0.1",
                "ua: 2.0e5",
                "t_r_heat: 276.15",
                "t_r_cool: 291.15",
                "mhe_horizon: 40",
                "mpc_horizon: 12",
                "partitions: 51",
                "q_weight: 10.0",
                "r_weight: 0.01",
                "s_weight: 0.001",
                "seed: 1",
            ]
        )
        cfg = load_config(text)
        assert cfg.partitions == 51
        assert cfg.noise.meas_noise_std == 0.0333  # documented default

    def test_rejects_too_few_partitions(self):
        with pytest.raises(ConfigError, match="partitions"):
            default_config(partitions=3)

    def test_rejects_empty_domain(self):
        with pytest.raises(ConfigError, match="mesh"):
            default_config(r0=4.0, r_inf=4.0)

    def test_missing_key_is_named(self):
        doc = {"porosity": 0.3}
        with pytest.raises(ConfigError, match="c_a"):
            config_from_mapping(doc)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            default_config(not_a_key=1.0)
