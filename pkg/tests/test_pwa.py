import numpy as np
import pytest

from ates_mhe.pwa import (
    accuracy_study,
    build_modes,
    build_output_model,
    build_partitions,
    linearize_at,
    locate_partition,
    pwa_step,
)
from ates_mhe.surrogate import step_surrogate

U_MAX = 0.0277


def power_iteration_radius(a_mat, iters=2000, seed=3):
    """Independent spectral-radius estimate via power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=a_mat.shape[0])
    v /= np.linalg.norm(v)
    radius = 0.0
    for _ in range(iters):
        w = a_mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        radius = norm
        v = w / norm
    return radius


class TestBuildPartitions:
    def test_width_for_51(self):
        parts = build_partitions(U_MAX, 51)
        widths = [p.upper - p.lower for p in parts]
        np.testing.assert_allclose(widths, 2 * U_MAX / 51, rtol=1e-12)
        assert len(parts) == 51

    def test_centers_for_5(self):
        parts = build_partitions(U_MAX, 5)
        centers = [p.center for p in parts]
        np.testing.assert_allclose(
            centers, [-0.02216, -0.01108, 0.0, 0.01108, 0.02216], atol=1e-15
        )

    def test_middle_center_exactly_zero(self):
        for s in (5, 51, 101):
            parts = build_partitions(U_MAX, s)
            assert parts[s // 2].center == 0.0

    def test_tiling_is_gapless(self):
        parts = build_partitions(U_MAX, 7)
        assert parts[0].lower == -U_MAX and parts[-1].upper == U_MAX
        for left, right in zip(parts[:-1], parts[1:]):
            assert left.upper == right.lower

    def test_rejects_even_and_small_counts(self):
        with pytest.raises(ValueError):
            build_partitions(U_MAX, 4)
        with pytest.raises(ValueError):
            build_partitions(U_MAX, 3)
        with pytest.raises(ValueError):
            build_partitions(U_MAX, 2)


@pytest.fixture(scope="module")
def modes51(model):
    return build_modes(model, U_MAX, 51)


class TestLinearizeAt:
    def test_zero_mode_has_ambient_fixed_point(self, model):
        mode = linearize_at(0.0, model)
        x = model.layout.uniform(284.85)
        np.testing.assert_allclose(mode.apply(x, 276.15), x, atol=1e-9)

    def test_zero_mode_spectral_radius_at_most_one(self, model):
        mode = linearize_at(0.0, model)
        assert power_iteration_radius(mode.a_mat) <= 1.0 + 1e-9

    @pytest.mark.parametrize("u_i", [0.0, 0.009, -0.0215, 0.0277])
    def test_exact_at_linearization_point(self, model, bounds, rng, u_i):
        mode = linearize_at(u_i, model)
        t_r = 276.15 if u_i >= 0 else 291.15
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(bounds.lower, bounds.upper)
            gap = np.max(np.abs(mode.apply(x, t_r) - step_surrogate(x, u_i, t_r, model)))
            worst = max(worst, gap)
        assert worst < 1e-9

    def test_offset_affine_in_return_temperature(self, model, bounds, rng):
        mode = linearize_at(0.011, model)
        x = rng.uniform(bounds.lower, bounds.upper)
        for t_r in (276.15, 283.0, 291.15):
            np.testing.assert_allclose(
                mode.apply(x, t_r), step_surrogate(x, 0.011, t_r, model), atol=1e-9
            )


class TestPwaStep:
    def test_every_input_maps_to_exactly_one_partition(self, modes51, rng):
        for u in np.concatenate((rng.uniform(-U_MAX, U_MAX, 200), [-U_MAX, 0.0, U_MAX])):
            idx = locate_partition(modes51, float(u))
            hits = [
                m.partition.contains(float(u), last=(i == len(modes51) - 1))
                for i, m in enumerate(modes51)
            ]
            assert sum(hits) == 1 and hits[idx]

    def test_boundary_goes_to_higher_partition(self, modes51):
        edge = modes51[10].partition.upper
        assert locate_partition(modes51, edge) == 11

    def test_last_partition_closed(self, modes51):
        assert locate_partition(modes51, U_MAX) == 50

    def test_rejects_out_of_range(self, modes51):
        with pytest.raises(ValueError):
            pwa_step(np.zeros(33), 2 * U_MAX, 276.15, modes51)

    def test_matches_surrogate_at_centers(self, model, modes51, bounds, rng):
        for mode in modes51[::10]:
            x = rng.uniform(bounds.lower, bounds.upper)
            u = mode.u_center
            got = pwa_step(x, u, 276.15, modes51)
            want = step_surrogate(x, u, 276.15, model)
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_error_grows_toward_partition_edge(self, model, modes51, bounds, rng):
        # within one partition the deviation is zero at the center and
        # maximal at an edge
        mode = modes51[40]
        x = rng.uniform(bounds.lower, bounds.upper)
        t_r = 276.15

        def err(u):
            return np.max(
                np.abs(pwa_step(x, u, t_r, modes51) - step_surrogate(x, u, t_r, model))
            )

        center = err(mode.u_center)
        edge = err(mode.partition.upper - 1e-9)
        assert center < 1e-9
        assert edge > center

    def test_dimension_is_independent_of_partition_count(self, model):
        for s in (5, 51):
            modes = build_modes(model, U_MAX, s)
            assert all(m.a_mat.shape == (33, 33) for m in modes)


class TestOutputModel:
    def test_selects_building_and_borehole_temperatures(self, model, rng):
        layout = model.layout
        out = build_output_model(layout)
        assert out.p == 3
        x = rng.uniform(273.0, 293.0, layout.n)
        y = out.apply(x, u=0.01, t_r=276.15)
        np.testing.assert_array_equal(
            y, [x[layout.idx_tb], x[layout.idx_warm_borehole], x[layout.idx_cold_borehole]]
        )

    def test_rows_are_unit_selectors(self, model):
        out = build_output_model(model.layout)
        assert np.all(np.sum(out.c_mat != 0.0, axis=1) == 1)
        assert np.all(np.sum(out.c_mat, axis=1) == 1.0)
        assert not np.any(out.d_vec) and not np.any(out.e_const) and not np.any(out.e_slope)


class TestAccuracyStudy:
    def test_paper_scale_bands(self, model, modes51):
        study = accuracy_study(modes51, model, n_samples=3000, seed=7)
        assert 0.05 <= study.max_abs_state_mean <= 0.5
        assert 0.005 <= study.std_state_mean <= 0.05

    def test_exact_at_centers(self, model, modes51):
        study = accuracy_study(modes51, model, n_samples=300, seed=7, at_centers=True)
        assert study.pooled_max_abs < 1e-9

    def test_refining_partitions_does_not_grow_error(self, model, modes51):
        modes101 = build_modes(model, U_MAX, 101)
        coarse = accuracy_study(modes51, model, n_samples=1500, seed=11)
        fine = accuracy_study(modes101, model, n_samples=1500, seed=11)
        assert fine.pooled_max_abs <= coarse.pooled_max_abs + 1e-12
        assert fine.max_abs_state_mean <= coarse.max_abs_state_mean + 1e-12

    def test_csv_schema(self, model, modes51, tmp_path):
        study = accuracy_study(modes51, model, n_samples=200, seed=3)
        path = tmp_path / "accuracy.csv"
        with open(path, "w") as handle:
            study.to_csv(handle)
        header = path.read_text().splitlines()[0]
        assert header == "u,mean_err,std_err,min_err,max_err"
