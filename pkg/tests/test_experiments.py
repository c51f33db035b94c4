import io

import numpy as np
import pytest

from ates_mhe.cli import main as cli_main
from ates_mhe.domain import default_config
from ates_mhe.experiments import (
    block_input_sequence,
    compare_estimators,
    generate_truth,
    run_ltvkf,
    run_mhe,
    run_ukf,
    write_report_csv,
    write_truth_csv,
)
from ates_mhe.pwa import build_output_model


def short_config(**overrides):
    defaults = dict(mhe_horizon=8, steps=30, seed=5)
    defaults.update(overrides)
    return default_config(**defaults)


class TestGenerateTruth:
    def test_same_seed_reproduces_bitwise(self):
        cfg = short_config()
        a = generate_truth(cfg)
        b = generate_truth(cfg)
        assert np.array_equal(a.trajectory, b.trajectory)
        assert np.array_equal(a.measurements, b.measurements)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.warm_conductivity, b.warm_conductivity)

    def test_zero_measurement_noise_reads_states(self):
        cfg = short_config(meas_noise_std=0.0, process_noise_bound=1e-12)
        run = generate_truth(cfg)
        out = build_output_model(cfg.layout)
        np.testing.assert_array_equal(run.measurements, run.trajectory @ out.c_mat.T)

    def test_conductivity_fields_within_bounds(self):
        cfg = short_config()
        run = generate_truth(cfg)
        for field in (run.warm_conductivity, run.cold_conductivity):
            assert np.all(field >= cfg.lambda_min) and np.all(field <= cfg.lambda_max)
            assert len(np.unique(field)) > 1  # spatially varying

    def test_inputs_cover_all_modes_with_zero_crossings(self):
        cfg = short_config(steps=120)
        run = generate_truth(cfg)
        u = run.inputs[:, 0]
        assert np.any(u > 0) and np.any(u < 0) and np.any(u == 0)
        assert np.all(np.abs(u) <= cfg.u_max + 1e-15)

    def test_measurement_count_matches_trajectory(self):
        run = generate_truth(short_config())
        assert run.measurements.shape[0] == run.trajectory.shape[0]


class TestBlockInputs:
    def test_respects_requested_cycle(self, rng):
        cfg = short_config()
        seq = block_input_sequence(cfg, 60, rng, sign_cycle=(-1.0, 0.0))
        assert np.all(seq[:, 0] <= 0.0)

    def test_return_temperature_follows_mode(self, rng):
        cfg = short_config()
        seq = block_input_sequence(cfg, 200, rng)
        heating = seq[:, 0] > 0
        cooling = seq[:, 0] < 0
        assert np.all(seq[heating, 1] == cfg.t_r_heat)
        assert np.all(seq[cooling, 1] == cfg.t_r_cool)


class TestCompareEstimators:
    @pytest.fixture(scope="class")
    def setup(self):
        cfg = short_config(steps=40)
        run = generate_truth(cfg)
        traces = [run_mhe(run, cfg), run_ukf(run, cfg), run_ltvkf(run, cfg)]
        report = compare_estimators(run, cfg, traces=traces)
        return cfg, run, traces, report

    def test_mhe_inactive_before_horizon(self, setup):
        cfg, run, traces, report = setup
        mhe = traces[0]
        assert not np.any(mhe.active[: cfg.mhe_horizon])
        assert np.all(mhe.active[cfg.mhe_horizon :])

    def test_bands_contain_means(self, setup):
        cfg, run, traces, report = setup
        for name in report.estimators:
            act = report.active[name]
            assert np.all(report.band_lo[name][act] <= report.mean_error[name][act] + 1e-12)
            assert np.all(report.band_hi[name][act] >= report.mean_error[name][act] - 1e-12)

    def test_mhe_never_violates_constraints(self, setup):
        cfg, run, traces, report = setup
        assert report.total_violations("mhe") == 0

    def test_report_csv_round_trips_deterministically(self, setup, tmp_path):
        cfg, run, traces, report = setup
        buf1, buf2 = io.StringIO(), io.StringIO()
        write_report_csv(buf1, report)
        write_report_csv(buf2, compare_estimators(run, cfg, traces=traces))
        assert buf1.getvalue() == buf2.getvalue()
        header = buf1.getvalue().splitlines()[0]
        assert header == "k,estimator,status,mean_err,band_lo,band_hi,violations"


class TestTruthCsv:
    def test_byte_identical_for_same_seed(self):
        cfg = short_config()
        buf1, buf2 = io.StringIO(), io.StringIO()
        write_truth_csv(buf1, generate_truth(cfg), cfg)
        write_truth_csv(buf2, generate_truth(cfg), cfg)
        assert buf1.getvalue() == buf2.getvalue()

    def test_header_schema(self):
        cfg = short_config()
        buf = io.StringIO()
        write_truth_csv(buf, generate_truth(cfg), cfg)
        header = buf.getvalue().splitlines()[0].split(",")
        assert header[:5] == ["k", "t_seconds", "u", "T_r", "T_b"]
        assert "Tw_0" in header and "Tc_15" in header
        assert header[-3:] == ["y_tb", "y_tw0", "y_tc0"]


class TestCli:
    def test_simulate_and_estimate_pipeline(self, tmp_path):
        out = tmp_path / "run"
        rc = cli_main(
            ["simulate", "--seed", "5", "--steps", "25", "--out-dir", str(out)]
        )
        assert rc == 0 and (out / "truth.csv").exists()
        # estimating over the written trajectory reuses the recorded noisy sensors
        rc = cli_main(
            [
                "estimate",
                "--trajectory",
                str(out / "truth.csv"),
                "--estimator",
                "ukf",
                "--out",
                str(out / "est.csv"),
                "--seed",
                "5",
            ]
        )
        assert rc == 0
        lines = (out / "est.csv").read_text().splitlines()
        assert lines[0].startswith("k,estimator,status,xhat_0")
        assert len(lines) == 27  # header + 26 rows

    def test_build_pwa_bundle(self, tmp_path):
        out = tmp_path / "pwa"
        rc = cli_main(
            [
                "build-pwa",
                "--partitions",
                "5",
                "--samples",
                "50",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        bundle = np.load(out / "pwa_modes.npz")
        assert bundle["a_0"].shape == (33, 33)
        assert len(bundle["u_centers"]) == 5
        header = (out / "pwa_accuracy.csv").read_text().splitlines()[0]
        assert header == "u,mean_err,std_err,min_err,max_err"
