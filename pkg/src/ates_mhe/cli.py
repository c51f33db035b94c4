"""Command-line front end: simulate, compare, build-pwa, estimate, mpc-sensitivity."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ates_mhe.domain import ScenarioConfig, default_config, load_config_file, state_bounds
from ates_mhe.experiments import (
    compare_estimators,
    default_ocp_spec,
    default_rhat_grid,
    generate_truth,
    mpc_study_state,
    run_ltvkf,
    run_mhe,
    run_ukf,
    write_estimates_csv,
    write_report_csv,
    write_truth_csv,
)
from ates_mhe.mpc import sensitivity_experiment, sensitivity_rows_to_csv
from ates_mhe.pwa import accuracy_study, build_modes, build_output_model
from ates_mhe.surrogate import nominal_model, read_trajectory_csv


def _load_cfg(args) -> ScenarioConfig:
    cfg = load_config_file(args.config) if args.config else default_config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    run = generate_truth(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "truth.csv", "w") as handle:
        write_truth_csv(handle, run, cfg)
    print(f"wrote {out_dir / 'truth.csv'} ({run.steps} steps, seed {cfg.seed})")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    run = generate_truth(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "truth.csv", "w") as handle:
        write_truth_csv(handle, run, cfg)
    traces = [run_mhe(run, cfg), run_ukf(run, cfg), run_ltvkf(run, cfg)]
    for trace in traces:
        with open(out_dir / f"estimates_{trace.name}.csv", "w") as handle:
            write_estimates_csv(handle, trace, run)
    report = compare_estimators(run, cfg, traces=traces)
    with open(out_dir / "report.csv", "w") as handle:
        write_report_csv(handle, report)
    for name in report.estimators:
        print(
            f"{name}: violations={report.total_violations(name)} "
            f"band[50:]={report.mean_band_width(name, 50, len(report.steps)):.4f} K"
        )
    print(f"wrote truth.csv, estimates_*.csv, report.csv in {out_dir}")
    return 0


def cmd_build_pwa(args) -> int:
    cfg = _load_cfg(args)
    s = args.partitions or cfg.partitions
    model = nominal_model(cfg)
    modes = build_modes(model, cfg.u_max, s)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = {
        "u_centers": np.array([m.u_center for m in modes]),
        "partition_edges": np.array(
            [m.partition.lower for m in modes] + [modes[-1].partition.upper]
        ),
    }
    for i, mode in enumerate(modes):
        bundle[f"a_{i}"] = mode.a_mat
        bundle[f"f_const_{i}"] = mode.f_const
        bundle[f"f_slope_{i}"] = mode.f_slope
    np.savez(out_dir / "pwa_modes.npz", **bundle)
    study = accuracy_study(modes, model, n_samples=args.samples, seed=cfg.seed)
    with open(out_dir / "pwa_accuracy.csv", "w") as handle:
        study.to_csv(handle)
    print(
        f"wrote pwa_modes.npz (s={s}) and pwa_accuracy.csv; "
        f"state-mean error max {study.max_abs_state_mean:.4f} K, "
        f"std {study.std_state_mean:.4f} K"
    )
    return 0


def cmd_estimate(args) -> int:
    cfg = _load_cfg(args)
    layout = cfg.layout
    with open(args.trajectory) as handle:
        columns = read_trajectory_csv(handle, layout)
    steps = len(columns["k"]) - 1
    state_cols = ["T_b"] + [f"Tw_{i}" for i in range(layout.per_storage)] + [
        f"Tc_{i}" for i in range(layout.per_storage)
    ]
    trajectory = np.column_stack([columns[c] for c in state_cols])
    inputs = np.column_stack([columns["u"], columns["T_r"]])[:-1]
    if "y_tb" in columns:
        measurements = np.column_stack([columns["y_tb"], columns["y_tw0"], columns["y_tc0"]])
    else:
        output = build_output_model(layout)
        rng = np.random.default_rng(cfg.seed)
        measurements = trajectory @ output.c_mat.T + rng.normal(
            0.0, cfg.noise.meas_noise_std, (steps + 1, output.p)
        )
    from ates_mhe.experiments import TruthRun

    model = nominal_model(cfg)
    run = TruthRun(
        seed=cfg.seed,
        warm_conductivity=model.warm_conductivity,
        cold_conductivity=model.cold_conductivity,
        inputs=inputs,
        trajectory=trajectory,
        measurements=measurements,
    )
    runner = {"mhe": run_mhe, "ukf": run_ukf, "ltvkf": run_ltvkf}[args.estimator]
    trace = runner(run, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as handle:
        write_estimates_csv(handle, trace, run)
    print(f"wrote {out}")
    return 0


def cmd_mpc_sensitivity(args) -> int:
    cfg = _load_cfg(args)
    x0 = mpc_study_state(cfg)
    spec = default_ocp_spec(cfg, x0)
    grid = (
        np.array([float(v) for v in args.rhat_grid.split(",")])
        if args.rhat_grid
        else default_rhat_grid(cfg)
    )
    rows = sensitivity_experiment(
        x0,
        spec,
        grid,
        repetitions=args.reps,
        seed=args.seed if args.seed is not None else cfg.seed,
        centers=cfg.mesh().centers,
        layout=cfg.layout,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sensitivity.csv", "w") as handle:
        sensitivity_rows_to_csv(rows, handle)
    print(f"wrote {out_dir / 'sensitivity.csv'} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ates-mhe",
        description="ATES estimation toolkit: surrogate simulation, PWA models, "
        "moving horizon estimation, Kalman baselines, MPC sensitivity",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="scenario YAML file (defaults built in)")
        p.add_argument("--seed", type=int, help="override the scenario seed")

    p = sub.add_parser("simulate", help="generate a seeded truth run as CSV")
    common(p)
    p.add_argument("--steps", type=int, help="episode length override")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run MHE, UKF and LTV-KF on one truth run")
    common(p)
    p.add_argument("--steps", type=int, help="episode length override")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("build-pwa", help="emit the PWA mode bundle and accuracy study")
    common(p)
    p.add_argument("--partitions", type=int, help="partition count override")
    p.add_argument("--samples", type=int, default=3000, help="accuracy-study samples")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.set_defaults(func=cmd_build_pwa)

    p = sub.add_parser("estimate", help="run one estimator over a trajectory CSV")
    common(p)
    p.add_argument("--trajectory", required=True, help="trajectory CSV (truth schema)")
    p.add_argument(
        "--estimator", choices=("mhe", "ukf", "ltvkf"), default="mhe", help="which estimator"
    )
    p.add_argument("--out", default="estimates.csv", help="output CSV path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("mpc-sensitivity", help="far-field perturbation study of the OCP")
    common(p)
    p.add_argument("--rhat-grid", help="comma-separated radii (default: mesh faces)")
    p.add_argument("--reps", type=int, default=20, help="repetitions per radius")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.set_defaults(func=cmd_mpc_sensitivity)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
