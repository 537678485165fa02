import json
import math
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

import cli
import scenarios
from errors import AbortBudgetExceeded, ConfigError, OutputError, StatisticsError
from schemas import NoiseConfig, PhasePoint, Scenario
from seeding import MAX_SEED, make_rng, seed_derive


def run(name, tmp_path, seed=7, workers=1, **params):
    scenario = Scenario(name=name, params=params, out_dir=str(tmp_path / name), seed=seed, workers=workers, profile="ci")
    return scenarios.run_scenario(scenario)


# Seeds

def test_seed_derive_is_injective_over_fields():
    keys = {
        seed_derive(seed, scenario, index, stream)
        for seed in (0, 1, MAX_SEED)
        for scenario in ("engine", "gain-map", "rf-calib")
        for index in (0, 1, 2**40 - 1)
        for stream in (0, 1, 128, 255)
    }
    assert len(keys) == 3 * 3 * 3 * 4


@pytest.mark.parametrize(
    "args",
    [(-1, "engine", 0, 0), (MAX_SEED + 1, "engine", 0, 0), (0, "engine", -1, 0), (0, "engine", 0, 256), (0, "nope", 0, 0)],
)
def test_seed_derive_rejects_out_of_range(args):
    with pytest.raises(ConfigError):
        seed_derive(*args)


def test_streams_are_reproducible():
    a = make_rng(seed_derive(3, "engine", 5, 2)).standard_normal(4)
    b = make_rng(seed_derive(3, "engine", 5, 2)).standard_normal(4)
    c = make_rng(seed_derive(3, "engine", 6, 2)).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# Parameter resolution

def test_profile_fills_sizes_and_scales_detection_noise():
    params = scenarios.resolve_params("gain-map", {}, "ci")
    assert params.n_atoms == 100
    assert params.shots == 20
    assert params.n_traj_calib == 200
    assert params.sigma_det == pytest.approx(24.0 * math.sqrt(100 / 26000))
    paper = scenarios.resolve_params("gain-map", {}, "paper")
    assert paper.sigma_det == pytest.approx(24.0)
    assert paper.shots == 100


def test_explicit_values_win_over_profile():
    params = scenarios.resolve_params("calibrate-crosstalk", {"n_atoms": 2000, "sigma_det": 0.0, "block_size": 64}, "ci")
    assert params.n_atoms == 2000
    assert params.sigma_det == 0.0
    assert params.block_size == 64


def test_oracle_compare_defaults_to_small_atom_number():
    assert scenarios.resolve_params("oracle-compare", {}, "paper").n_atoms == 100


def test_resolve_params_rejects_bad_input():
    with pytest.raises(ConfigError):
        scenarios.resolve_params("no-such-scenario", {}, "ci")
    with pytest.raises(ValidationError):
        scenarios.resolve_params("rf-calib", {"bogus": 1}, "ci")
    with pytest.raises(ValidationError):
        scenarios.resolve_params("gain-map", {"grid_points": 3}, "ci")


# Scenarios

def test_rf_calib_outputs_and_manifest(tmp_path):
    manifest, result = run("rf-calib", tmp_path, shots=2000)
    out = tmp_path / "rf-calib"
    table = pd.read_csv(out / "rf-calib.csv")
    assert list(table.columns) == ["alpha", "n0_fraction", "n0_fraction_stderr"]
    assert result.summary["slope"] == pytest.approx(1.0, abs=0.1)
    assert result.summary["intercept"] == pytest.approx(0.5, abs=0.02)

    stored = json.loads((out / "manifest.json").read_text())
    assert stored["schema_version"] == 1
    assert stored["resolved_params"]["shots"] == 2000
    assert set(stored["files"]) == {"rf-calib.csv", "summary.json"}
    for name, digest in stored["files"].items():
        assert scenarios.sha256_file(out / name) == digest
    assert json.loads((out / "summary.json").read_text())["shots"] == 2000


def test_same_seed_same_bytes_regardless_of_workers(tmp_path):
    params = dict(n_traj=200, block_size=50, times_ms=[0.0, 5.0])
    first, _ = run("squeeze-scan", tmp_path / "a", workers=1, **params)
    second, _ = run("squeeze-scan", tmp_path / "b", workers=2, **params)
    assert first.files == second.files
    third, _ = run("squeeze-scan", tmp_path / "c", seed=8, **params)
    assert third.files["squeeze-scan.csv"] != first.files["squeeze-scan.csv"]


def test_replay_manifest_matches(tmp_path):
    manifest, _ = run("detect-calib", tmp_path, atom_numbers=[500, 1000], shots=200)
    replayed, mismatched = scenarios.replay_manifest(manifest, tmp_path / "replay")
    assert mismatched == []
    assert replayed.files == manifest.files


def test_squeeze_scan_reports_squeezing(tmp_path):
    _, result = run("squeeze-scan", tmp_path, n_atoms=1000, n_traj=800, gamma=0.0, times_ms=[0.0, 20.0])
    table = result.table
    assert table["xi2_yz_db"][0] == pytest.approx(0.0, abs=0.6)
    assert table["xi2_yz_db"][1] < -2.0
    assert table["xi2_xz_db"][1] < -2.0
    # noise-free readout reproduces the intrinsic quadratures
    assert np.allclose(table["xi2_yz_db"], table["intrinsic_xi2_yz_db"], atol=1e-6)
    assert result.summary["best_t_ms"] == 20.0


def test_gain_map_small_grid(tmp_path):
    manifest, result = run(
        "gain-map", tmp_path, sweep="grid", grid_points=6, shots=20, squeeze_time_ms=20.0, gamma=0.0, n_atoms=200
    )
    table = result.table
    assert len(table) == 36
    assert np.all(np.isfinite(table["zeta_db"]))
    assert np.all(table["delta_phi1"] > 0)
    assert np.all(np.isfinite(table["polar_zeta_db"]))
    assert table["phi1"].max() == pytest.approx(0.05 * math.pi)
    assert result.summary["sweep"] == "grid"
    assert result.summary["squeeze_time_ms"] == pytest.approx(20.0)
    assert 0.0 <= result.summary["fraction_in_band"] <= 1.0
    assert "gain-map_calibration.csv" not in manifest.files
    assert "gain-map_rays.csv" not in manifest.files


def test_gain_map_rays_sweep_alpha_per_direction(tmp_path):
    manifest, result = run(
        "gain-map", tmp_path, n_rays=2, alpha_points=6, shots=20, squeeze_time_ms=20.0, gamma=0.0, n_atoms=200
    )
    table = result.table
    assert len(table) == 12
    thetas = scenarios.ray_angles(2)
    assert thetas == pytest.approx([0.25 * math.pi, 0.75 * math.pi])
    assert sorted(set(table["ray_theta"])) == pytest.approx(list(thetas))
    assert table["ray_alpha"].max() == pytest.approx(0.05 * math.pi)
    assert np.allclose(table["phi1"], table["ray_alpha"] * np.cos(table["ray_theta"]))
    assert np.allclose(table["phi2"], table["ray_alpha"] * np.sin(table["ray_theta"]))
    assert np.all(table["delta_phi1"] > 0) and np.all(table["delta_phi2"] > 0)
    assert result.summary["sweep"] == "rays"
    assert len(result.summary["zeta_mean_by_theta_db"]) == 2
    assert result.summary["shots"] == 20
    rays = pd.read_csv(tmp_path / "gain-map" / "gain-map_rays.csv")
    assert list(rays["ray_theta"]) == pytest.approx(list(thetas))
    assert "gain-map_rays.csv" in manifest.files


def test_gain_map_picks_squeezing_time_from_scan(tmp_path):
    manifest, result = run(
        "gain-map",
        tmp_path,
        sweep="grid",
        grid_points=6,
        shots=10,
        n_traj_calib=300,
        candidate_times_ms=[0.0, 20.0],
        gamma=0.0,
        n_atoms=200,
    )
    assert result.summary["squeeze_time_ms"] == pytest.approx(20.0)
    assert len(result.table) == 36
    calibration = pd.read_csv(tmp_path / "gain-map" / "gain-map_calibration.csv")
    assert list(calibration["t_ms"]) == pytest.approx([0.0, 20.0])
    assert calibration["xi2_yz_db"][1] < calibration["xi2_yz_db"][0]
    assert "gain-map_calibration.csv" in manifest.files


def test_measure_points_shares_survivors_without_recycling():
    psi = np.tile(np.array([0.0, 10.0, 0.0], dtype=complex), (50, 1))
    points = [PhasePoint(phi1=0.01 * k) for k in range(4)]
    qyz, qxz, batches = scenarios._measure_points(psi, points, NoiseConfig(), 1, "gain-map", 0, "ideal", 20)
    assert qyz.shape == qxz.shape == (4, 12)
    assert len(batches) == 4
    with pytest.raises(StatisticsError):
        scenarios._measure_points(psi[:7], points, NoiseConfig(), 1, "gain-map", 0, "ideal", 20)


def test_default_gain_map_lands_in_envelope():
    params = scenarios.resolve_params("gain-map", {}, "paper")
    assert params.sweep == "rays"
    assert params.crosstalk_convention == "total_power"
    assert (params.n_rays, params.alpha_points, params.shots) == (8, 11, 100)
    summary = scenarios.run_gain_map(params, seed=7, workers=1).summary
    low, high = scenarios.GAIN_ENVELOPE_DB
    assert (low, high) == (2.5, 7.0)
    assert low <= summary["zeta_median_db"] <= high
    assert summary["fraction_in_envelope"] >= 0.9
    assert summary["polar_zeta_mean_db"] < 0.0


def test_calibrate_crosstalk_sweep(tmp_path):
    _, result = run("calibrate-crosstalk", tmp_path, delta_etas=[0.0, 0.3, 0.6], n_traj=2000)
    table = result.table
    assert np.all(np.diff(table["std_qyz_over_sqrt_n"]) > 0)
    assert np.all(np.diff(table["std_qxz_over_sqrt_n"]) > 0)
    assert result.summary["monotonic_yz"] and result.summary["monotonic_xz"]
    assert table["polar_zeta_db"][0] == pytest.approx(0.0, abs=1.0)


def test_polar_reference_at_experimental_crosstalk(tmp_path):
    n_atoms = 100
    _, result = run("calibrate-crosstalk", tmp_path, delta_etas=[0.0, 0.3], n_traj=20000, block_size=5000)
    sigma = scenarios.scaled_detection_noise(n_atoms)
    # Weyl half quantum and readout noise on top of the projection noise
    expected = -10 * math.log10(1 + 0.5 / n_atoms + 2 * 0.3 ** 2 + 2 * sigma ** 2 / n_atoms)
    assert expected == pytest.approx(-0.9, abs=0.05)
    assert result.table["polar_zeta_db"][1] == pytest.approx(expected, abs=0.15)


def test_calibrate_pump_phase_sweep(tmp_path):
    _, result = run(
        "calibrate-pump-phase", tmp_path, n_atoms=1000, delta_eta=0.0, delta_thetas_over_2pi=[0.0, 0.05], squeeze_time_ms=20.0, gamma=0.0
    )
    table = result.table
    assert table["std_qyz_over_sqrt_n"][1] > table["std_qyz_over_sqrt_n"][0]


def test_detect_calib_recovers_projection_noise(tmp_path):
    _, result = run("detect-calib", tmp_path, atom_numbers=[1000, 4000], shots=2000)
    table = result.table
    ratio = table["std_diff_corrected"] / table["sqrt_n"]
    assert np.all(np.abs(ratio - 1.0) < 0.1)
    assert np.all(table["std_diff"] > table["std_diff_corrected"])


def test_oracle_compare_small_system(tmp_path):
    manifest, result = run("oracle-compare", tmp_path, n_atoms=50, n_traj=4000, times_ms=[5.0], block_size=1000)
    table = result.table
    assert set(table["observable"]) == {"Qyz", "Qxz", "Lx", "Ly"}
    assert np.all(np.abs(table["var_rel_dev"]) < 0.1)
    assert result.summary["basis_dim"] == 51 * 52 // 2
    assert result.summary["theta_s"] == pytest.approx(-0.25 * math.pi)
    moments = pd.read_csv(tmp_path / "oracle-compare" / "oracle-compare_twa_moments.csv")
    assert moments["t"].tolist() == pytest.approx([0.005])
    assert moments["var_Qyz"][0] == pytest.approx(table.set_index("observable")["twa_var"]["Qyz"])
    assert "oracle-compare_twa_moments.csv" in manifest.files


def test_exact_alignment_exposes_squeezed_quadrature():
    n_atoms, c2 = 40, -2 * math.pi * 3.8
    plain, aligned = (
        scenarios.exact_moments(n_atoms, c2, abs(c2), [0.02], ["Qyz", "Qxz"], theta_s)[0]
        for theta_s in (0.0, scenarios.ALIGNMENT_ANGLE)
    )
    for name in ("Qyz", "Qxz"):
        assert aligned[name][1] < n_atoms < plain[name][1]


def test_oracle_compare_at_one_hundred_atoms(tmp_path):
    _, result = run("oracle-compare", tmp_path, n_atoms=100, n_traj=10000, times_ms=[5.0, 10.0, 15.0], block_size=2000)
    table = result.table
    assert len(table) == 3 * 4
    assert sorted(set(table["t_ms"])) == [5.0, 10.0, 15.0]
    assert np.all(np.abs(table["var_rel_dev"]) < 0.1)
    mean_gap = np.abs(table["twa_mean"] - table["exact_mean"])
    assert np.all(mean_gap <= 4 * table["twa_mean_stderr"] + 0.05 * np.abs(table["exact_mean"]))
    squeezed = table[(table["t_ms"] == 15.0) & table["observable"].isin(["Qyz", "Qxz"])]
    assert np.all(squeezed["exact_var"] < 100)


def test_kunkel_compare_floor(tmp_path):
    _, result = run("kunkel-compare", tmp_path, n_atoms=1000, n_traj=2000, block_size=500)
    table = result.table
    assert np.allclose(table["protocol_xi2_yz_db"], table["intrinsic_xi2_yz_db"], atol=1e-6)
    # mixing with an empty mode costs at most 3 dB of the squeezing
    assert result.summary["kunkel_min_db"] > -3.2
    assert result.summary["protocol_min_db"] < result.summary["kunkel_min_db"]
    late = table["t_ms"] == 30.0
    assert np.all(table.loc[late, "protocol_xi2_yz_db"] < table.loc[late, "kunkel_xi2_yz_db"])


def test_unwritable_output_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    scenario = Scenario(name="rf-calib", params={"shots": 10}, out_dir=str(blocker / "out"), profile="ci")
    with pytest.raises(OutputError):
        scenarios.run_scenario(scenario)


# CLI

def test_cli_runs_scenario_from_config(tmp_path, capsys):
    config = tmp_path / "rf.json"
    config.write_text(json.dumps({"shots": 200}))
    out = tmp_path / "out"
    code = cli.main(["simulate", "rf-calib", "--config", str(config), "--out", str(out), "--seed", "3", "--profile", "ci"])
    assert code == 0
    assert (out / "manifest.json").is_file()
    assert json.loads((out / "manifest.json").read_text())["seed"] == 3
    assert "slope" in capsys.readouterr().out


def test_cli_accepts_full_scenario_config(tmp_path):
    config = tmp_path / "scenario.json"
    config.write_text(json.dumps({"params": {"shots": 50}, "seed": 12, "profile": "ci"}))
    out = tmp_path / "out"
    assert cli.main(["simulate", "rf-calib", "--config", str(config), "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 12


def test_cli_replays_manifest(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["simulate", "rf-calib", "--out", str(out), "--profile", "ci"]) == 0
    assert cli.main(["simulate", "--from-manifest", str(out / "manifest.json"), "--out", str(tmp_path / "again")]) == 0


@pytest.mark.parametrize("content", ["{broken", json.dumps({"bogus": 1}), json.dumps({"shots": 1}), json.dumps([1, 2])])
def test_cli_config_errors_exit_1(tmp_path, content):
    config = tmp_path / "bad.json"
    config.write_text(content)
    assert cli.main(["simulate", "rf-calib", "--config", str(config), "--out", str(tmp_path / "o"), "--profile", "ci"]) == 1


def test_cli_missing_scenario_exit_1(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path)]) == 1


def test_cli_exit_codes_follow_error_class(tmp_path):
    args = ["simulate", "rf-calib", "--out", str(tmp_path), "--profile", "ci"]
    with patch("cli.run_scenario", side_effect=AbortBudgetExceeded(50, 1000, 0.001)):
        assert cli.main(args) == 3
    with patch("cli.run_scenario", side_effect=OutputError("disk full")):
        assert cli.main(args) == 2


def test_workers_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SIM_WORKERS", "2")
    args = cli.build_parser().parse_args(["simulate", "rf-calib", "--out", str(tmp_path)])
    assert cli.build_scenario(args).workers == 2
    args = cli.build_parser().parse_args(["simulate", "rf-calib", "--out", str(tmp_path), "--workers", "1"])
    assert cli.build_scenario(args).workers == 1
