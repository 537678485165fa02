"""
Scenario runners: each named experiment goes from resolved parameters to
CSV tables, a JSON summary and a run manifest with file checksums.

Output columns (schema version 1) use ``_db`` for decibels, ``_over_n``
for values divided by the atom number and ``_over_sqrt_n`` for values
divided by its square root; times are in milliseconds (``t_ms``) and phases
in radians.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import fock
from config import get_settings
from errors import ConfigError, OutputError, StatisticsError
from measurement import (
    kunkel_measure,
    measure_ensemble,
    measured_squeezing,
    squeezing_parameter,
    variance_stderr_db,
)
from metrology import (
    ALIGNMENT_ANGLE,
    MIN_SHOTS,
    ResponseFit,
    best_squeezing_time,
    encode_phases,
    fit_response,
    gain,
    noisy_squeezing_scan,
    optimal_alignment_angle,
    polar_gain_estimate,
    quench_schedule,
    scatter_summary,
    sensitivity,
    spinor_phase_rotation,
    sql,
    undepleted_squeezing_db,
)
from schemas import (
    EXPERIMENT_N_ATOMS,
    EXPERIMENT_SIGMA_DET,
    SCENARIO_PARAMS,
    GainMapParams,
    GainResult,
    NoiseConfig,
    PhasePoint,
    RunManifest,
    Scenario,
    ScenarioParams,
    SimConfig,
)
from seeding import READOUT_STREAM, RNG_ALGORITHM, make_rng, seed_derive
from twa import atom_number, classical_observables, integrate, moments_from_amplitudes

logger = logging.getLogger(__name__)

__version__ = "1.0.0"
SCHEMA_VERSION = 1
MS = 1e-3

PROFILES: Dict[str, Dict[str, int]] = {
    "ci": {"n_atoms": 100, "n_traj": 400, "shots": 20, "n_traj_calib": 200},
    "fast": {"n_atoms": 1000, "n_traj": 2000, "shots": 50, "n_traj_calib": 1000},
    "paper": {"n_atoms": EXPERIMENT_N_ATOMS, "n_traj": 10000, "shots": 100, "n_traj_calib": 2000},
}
ORACLE_DEFAULT_ATOMS = 100
GAIN_BAND_DB = (3.3 - 0.7, 6.3 + 0.7)
GAIN_ENVELOPE_DB = (2.5, 7.0)

# engine streams
SQUEEZED_STREAM = 0
CALIBRATION_STREAM = 1
POLAR_STREAM = 2


@dataclass
class ScenarioResult:
    table: pd.DataFrame
    summary: Dict[str, Any]
    extra_tables: Dict[str, pd.DataFrame] = field(default_factory=dict)


def scaled_detection_noise(n_atoms: int) -> float:
    """Detection noise with the same relative size as 24 atoms at the full atom number."""
    return EXPERIMENT_SIGMA_DET * math.sqrt(n_atoms / EXPERIMENT_N_ATOMS)


def resolve_params(name: str, params: Dict[str, Any], profile: str) -> ScenarioParams:
    """Validate a parameter block and fill every unset size from the profile."""
    if name not in SCENARIO_PARAMS:
        raise ConfigError(f"Unknown scenario {name!r}")
    model = SCENARIO_PARAMS[name].model_validate(params)
    preset = PROFILES[profile]
    fills: Dict[str, Any] = {}
    if model.n_atoms is None:
        fills["n_atoms"] = ORACLE_DEFAULT_ATOMS if name == "oracle-compare" else preset["n_atoms"]
    if model.n_traj is None:
        fills["n_traj"] = preset["n_traj"]
    if model.block_size is None:
        fills["block_size"] = get_settings().block_size
    for key in ("shots", "n_traj_calib"):
        if key in type(model).model_fields and getattr(model, key) is None:
            fills[key] = preset[key]
    if "sigma_det" in type(model).model_fields and model.sigma_det is None:
        fills["sigma_det"] = scaled_detection_noise(fills.get("n_atoms", model.n_atoms))
    # record times index the table rows, so they must match the engine's sorted order
    for key in ("times_ms", "candidate_times_ms"):
        if key in type(model).model_fields:
            fills[key] = sorted(getattr(model, key))
    return model.model_copy(update=fills)


def base_config(p: ScenarioParams, seed: int, namespace: str, **changes) -> SimConfig:
    values = dict(
        n_atoms=p.n_atoms,
        c2=p.c2,
        q0=p.q_over_c2 * abs(p.c2),
        gamma=p.gamma,
        dt=p.dt,
        n_traj=p.n_traj,
        seed=seed,
        integrator=p.integrator,
        q_ramp=p.q_ramp,
        seed_namespace=namespace,
        block_size=p.block_size,
    )
    values.update(changes)
    return SimConfig(**values)


def readout_rng(seed: int, namespace: str, index: int, offset: int = 0) -> np.random.Generator:
    return make_rng(seed_derive(seed, namespace, index, READOUT_STREAM + offset))


def _std_over_sqrt_n(values: np.ndarray, n_atoms: float) -> float:
    return float(np.std(values)) / math.sqrt(n_atoms)


# squeeze-scan

def run_squeeze_scan(p, seed: int, workers: int) -> ScenarioResult:
    name = "squeeze-scan"
    config = base_config(p, seed, name, record_times=tuple(t * MS for t in p.times_ms))
    if p.quench_hold_ms > 0:
        config = quench_schedule(config, p.quench_hold_ms * MS, post_factor=p.q_over_c2)
    ensemble = integrate(config, workers=workers)
    noise = NoiseConfig(delta_eta=p.delta_eta, delta_theta=p.delta_theta, sigma_det=p.sigma_det)

    rows = []
    for index, t_ms in enumerate(p.times_ms):
        psi = ensemble.at(index)
        theta_s = optimal_alignment_angle(psi) if p.alignment == "optimal" else ALIGNMENT_ANGLE
        psi = spinor_phase_rotation(psi, theta_s)
        n_t = atom_number(psi)
        batch = measure_ensemble(psi, noise, readout_rng(seed, name, index))
        xi_yz, xi_xz = measured_squeezing(batch, n_t)
        obs = classical_observables(psi)
        rows.append({
            "t_ms": t_ms,
            "n_atoms": n_t,
            "theta_s": theta_s,
            "var_qyz": float(np.var(batch.qyz)),
            "var_qxz": float(np.var(batch.qxz)),
            "var_qyz_over_n": float(np.var(batch.qyz)) / n_t,
            "var_qxz_over_n": float(np.var(batch.qxz)) / n_t,
            "xi2_yz_db": xi_yz,
            "xi2_xz_db": xi_xz,
            "xi2_yz_stderr_db": variance_stderr_db(batch.qyz),
            "xi2_xz_stderr_db": variance_stderr_db(batch.qxz),
            "intrinsic_xi2_yz_db": squeezing_parameter(np.std(obs["Qyz"]), n_t),
            "intrinsic_xi2_xz_db": squeezing_parameter(np.std(obs["Qxz"]), n_t),
            "undepleted_db": float(undepleted_squeezing_db(p.c2, t_ms * MS)),
        })
    table = pd.DataFrame(rows)
    mean_xi = 0.5 * (table["xi2_yz_db"] + table["xi2_xz_db"])
    best = int(mean_xi.idxmin())
    summary = {
        "n_traj": int(ensemble.alive.sum()),
        "n_aborted": ensemble.n_aborted,
        "best_t_ms": float(table["t_ms"][best]),
        "best_xi2_yz_db": float(table["xi2_yz_db"][best]),
        "best_xi2_xz_db": float(table["xi2_xz_db"][best]),
        "max_channel_gap_db": float(np.max(np.abs(table["xi2_yz_db"] - table["xi2_xz_db"]))),
    }
    return ScenarioResult(table, summary)


# gain-map

@dataclass
class GainMapResult:
    points: List[PhasePoint]
    squeeze_time: float
    n_atoms: float
    shots: int
    gains: List[GainResult]
    scatter: List[Tuple[Tuple[float, float], float]]
    qyz: np.ndarray  # (n_points, shots)
    qxz: np.ndarray
    polar_gains: List[GainResult] = field(default_factory=list)
    polar_scatter: List[Tuple[Tuple[float, float], float]] = field(default_factory=list)
    calibration: List[Tuple[float, float, float]] = field(default_factory=list)
    ray_thetas: List[float] = field(default_factory=list)


def sweep_values(count: int, phi_max_over_pi: float) -> np.ndarray:
    limit = phi_max_over_pi * math.pi
    return np.linspace(-limit, limit, count)


def ray_angles(n_rays: int) -> np.ndarray:
    """Ray directions in (0, pi), offset from both axes so every ray carries phi1 and phi2 information."""
    return (np.arange(n_rays) + 0.5) * math.pi / n_rays


def phase_points(p: GainMapParams) -> List[PhasePoint]:
    """Encoded phases in measurement order: ray by ray (alpha ascending), or grid rows of fixed phi2."""
    if p.sweep == "rays":
        alphas = sweep_values(p.alpha_points, p.phi_max_over_pi)
        return [PhasePoint.from_polar(float(a), float(theta)) for theta in ray_angles(p.n_rays) for a in alphas]
    phis = sweep_values(p.grid_points, p.phi_max_over_pi)
    return [PhasePoint(phi1=float(phi1), phi2=float(phi2)) for phi2 in phis for phi1 in phis]


def point_fits(p: GainMapParams, qyz: np.ndarray, qxz: np.ndarray) -> List[ResponseFit]:
    """
    Response fit used at each phase point.

    Rays: both channels against the signed alpha of their ray. Grid: Q_yz
    against phi1 along the point's row, Q_xz against phi2 along its column.
    """
    if p.sweep == "rays":
        alphas = sweep_values(p.alpha_points, p.phi_max_over_pi)
        fits = []
        for r, theta in enumerate(ray_angles(p.n_rays)):
            rows = slice(r * p.alpha_points, (r + 1) * p.alpha_points)
            fit = fit_response(alphas, {"Qyz": qyz[rows], "Qxz": qxz[rows]}, "alpha", float(theta))
            fits.extend([fit] * p.alpha_points)
        return fits
    size = p.grid_points
    phis = sweep_values(size, p.phi_max_over_pi)
    grid_yz = qyz.reshape(size, size, -1)
    grid_xz = qxz.reshape(size, size, -1)
    rows = [fit_response(phis, {"Qyz": grid_yz[j]}, "phi1")["Qyz"] for j in range(size)]
    cols = [fit_response(phis, {"Qxz": grid_xz[:, i]}, "phi2")["Qxz"] for i in range(size)]
    return [ResponseFit({"Qyz": rows[j], "Qxz": cols[i]}) for j in range(size) for i in range(size)]


def _measure_points(psi, points, noise, seed, name, offset, layer, shots):
    per_point = min(shots, len(psi) // len(points))
    if per_point < MIN_SHOTS:
        raise StatisticsError(
            f"{len(psi)} surviving trajectories cannot cover {len(points)} phase points",
            {"survivors": len(psi), "points": len(points)},
        )
    if per_point < shots:
        logger.warning(f"Aborted trajectories leave {per_point} of {shots} shots per phase point")
    qyz = np.zeros((len(points), per_point))
    qxz = np.zeros((len(points), per_point))
    batches = []
    for index, point in enumerate(points):
        encoded = encode_phases(psi[index * per_point:(index + 1) * per_point], point)
        batch = measure_ensemble(encoded, noise, readout_rng(seed, name, index, offset), layer=layer)
        qyz[index] = batch.qyz
        qxz[index] = batch.qxz
        batches.append(batch)
    return qyz, qxz, batches


def _gains(points, fits, n_atoms, state, p: GainMapParams, noise, shots) -> List[GainResult]:
    gains = []
    for point, fit in zip(points, fits):
        d1, d2 = sensitivity(fit, point)
        gains.append(GainResult(
            phi1=point.phi1,
            phi2=point.phi2,
            delta_phi1=d1,
            delta_phi2=d2,
            sql_phi1=sql(n_atoms),
            sql_phi2=sql(n_atoms),
            zeta_db=gain(d1, d2, n_atoms, p.reference),
            n_atoms=n_atoms,
            shots=shots,
            probe=state,
            reference=p.reference,
            noise=noise.model_dump(),
        ))
    return gains


def gain_map(p: GainMapParams, seed: int, workers: int = 1) -> GainMapResult:
    """Full pipeline over the phase sweep: quench, squeeze, align, encode, measure, fit, gain."""
    name = "gain-map"
    noise = NoiseConfig(
        delta_eta=p.delta_eta,
        delta_theta=p.delta_theta,
        sigma_det=p.sigma_det,
        crosstalk_convention=p.crosstalk_convention,
    )
    hold = p.quench_hold_ms * MS
    calibration: List[Tuple[float, float, float]] = []
    squeeze_time = None if p.squeeze_time_ms is None else p.squeeze_time_ms * MS
    if squeeze_time is None:
        calib = base_config(
            p, seed, name,
            n_traj=p.n_traj_calib,
            stream=CALIBRATION_STREAM,
            record_times=tuple(t * MS for t in p.candidate_times_ms),
        )
        calib = quench_schedule(calib, hold, post_factor=p.q_over_c2)
        calibration = noisy_squeezing_scan(calib, noise, workers=workers, readout_stream=READOUT_STREAM + 2)
        squeeze_time = best_squeezing_time(calibration)
        logger.info(f"Near-optimal squeezing time {squeeze_time / MS:.1f} ms")

    points = phase_points(p)
    n_shots_total = p.shots * len(points)
    squeezed_config = base_config(
        p, seed, name, n_traj=n_shots_total, stream=SQUEEZED_STREAM, record_times=(squeeze_time,)
    )
    squeezed = integrate(quench_schedule(squeezed_config, hold, post_factor=p.q_over_c2), workers=workers)
    psi = spinor_phase_rotation(squeezed.at(0), ALIGNMENT_ANGLE)
    n_atoms = atom_number(psi)

    qyz, qxz, batches = _measure_points(psi, points, noise, seed, name, 0, p.readout_layer, p.shots)
    shots = qyz.shape[1]
    gains = _gains(points, point_fits(p, qyz, qxz), n_atoms, "squeezed", p, noise, shots)
    result = GainMapResult(
        points=points,
        squeeze_time=squeeze_time,
        n_atoms=n_atoms,
        shots=shots,
        gains=gains,
        scatter=[scatter_summary(batch, n_atoms) for batch in batches],
        qyz=qyz,
        qxz=qxz,
        calibration=calibration,
        ray_thetas=[float(theta) for theta in ray_angles(p.n_rays)] if p.sweep == "rays" else [],
    )

    if p.include_polar:
        polar_config = base_config(p, seed, name, n_traj=n_shots_total, stream=POLAR_STREAM, record_times=(0.0,))
        polar = integrate(polar_config, workers=workers).at(0)
        p_yz, p_xz, p_batches = _measure_points(polar, points, noise, seed, name, 1, p.readout_layer, p.shots)
        polar_atoms = float(p.n_atoms)
        result.polar_gains = _gains(points, point_fits(p, p_yz, p_xz), polar_atoms, "polar", p, noise, p_yz.shape[1])
        result.polar_scatter = [scatter_summary(batch, polar_atoms) for batch in p_batches]
    return result


def run_gain_map(p, seed: int, workers: int) -> ScenarioResult:
    result = gain_map(p, seed, workers)
    rows = []
    for k, (point, g) in enumerate(zip(result.points, result.gains)):
        (center_yz, center_xz), radius = result.scatter[k]
        row = {
            "phi1": g.phi1,
            "phi2": g.phi2,
            "phi1_over_pi": g.phi1 / math.pi,
            "phi2_over_pi": g.phi2 / math.pi,
            "alpha": point.alpha,
            "theta": point.theta,
        }
        if result.ray_thetas:
            ray = k // p.alpha_points
            row["ray"] = ray
            row["ray_theta"] = result.ray_thetas[ray]
            row["ray_alpha"] = float(sweep_values(p.alpha_points, p.phi_max_over_pi)[k % p.alpha_points])
        row.update({
            "delta_phi1": g.delta_phi1,
            "delta_phi2": g.delta_phi2,
            "sql_phi1": g.sql_phi1,
            "sql_phi2": g.sql_phi2,
            "zeta_db": g.zeta_db,
            "mean_qyz": float(result.qyz[k].mean()),
            "mean_qxz": float(result.qxz[k].mean()),
            "std_qyz": float(result.qyz[k].std()),
            "std_qxz": float(result.qxz[k].std()),
            "center_yz_over_n": center_yz,
            "center_xz_over_n": center_xz,
            "radius_over_n": radius,
        })
        if result.polar_gains:
            row["polar_zeta_db"] = result.polar_gains[k].zeta_db
            row["polar_radius_over_n"] = result.polar_scatter[k][1]
        rows.append(row)
    table = pd.DataFrame(rows)
    zeta = table["zeta_db"].to_numpy()
    summary = {
        "sweep": p.sweep,
        "squeeze_time_ms": result.squeeze_time / MS,
        "n_atoms": result.n_atoms,
        "shots": result.shots,
        "n_points": len(result.points),
        "reference": p.reference,
        "zeta_min_db": float(zeta.min()),
        "zeta_max_db": float(zeta.max()),
        "zeta_median_db": float(np.median(zeta)),
        "fraction_in_band": float(np.mean((zeta >= GAIN_BAND_DB[0]) & (zeta <= GAIN_BAND_DB[1]))),
        "fraction_in_envelope": float(np.mean((zeta >= GAIN_ENVELOPE_DB[0]) & (zeta <= GAIN_ENVELOPE_DB[1]))),
    }
    if result.polar_gains:
        summary["polar_zeta_mean_db"] = float(table["polar_zeta_db"].mean())
    extra = {}
    if result.ray_thetas:
        columns = ["zeta_db"] + (["polar_zeta_db"] if result.polar_gains else [])
        per_ray = table.groupby("ray_theta")[columns].agg(["mean", "min", "max"])
        per_ray.columns = [f"{column}_{stat}" for column, stat in per_ray.columns]
        extra["rays"] = per_ray.reset_index()
        summary["zeta_mean_by_theta_db"] = {
            f"{theta:.4f}": float(value) for theta, value in per_ray["zeta_db_mean"].items()
        }
    if result.calibration:
        extra["calibration"] = pd.DataFrame(
            [{"t_ms": t / MS, "xi2_yz_db": a, "xi2_xz_db": b} for t, a, b in result.calibration]
        )
    return ScenarioResult(table, summary, extra)


# calibrate-crosstalk

def _polar_samples(p, seed: int, name: str, workers: int) -> np.ndarray:
    config = base_config(p, seed, name, stream=POLAR_STREAM, record_times=(0.0,))
    return integrate(config, workers=workers).at(0)


def run_calibrate_crosstalk(p, seed: int, workers: int) -> ScenarioResult:
    name = "calibrate-crosstalk"
    psi = _polar_samples(p, seed, name, workers)
    n_atoms = float(p.n_atoms)
    rows = []
    for delta_eta in p.delta_etas:
        noise = NoiseConfig(delta_eta=delta_eta, sigma_det=p.sigma_det, crosstalk_convention=p.crosstalk_convention)
        # common readout stream so the sweep differs only in noise strength
        batch = measure_ensemble(psi, noise, readout_rng(seed, name, 0))
        var_yz, var_xz = float(np.var(batch.qyz)), float(np.var(batch.qxz))
        rows.append({
            "delta_eta": delta_eta,
            "std_qyz_over_sqrt_n": _std_over_sqrt_n(batch.qyz, n_atoms),
            "std_qxz_over_sqrt_n": _std_over_sqrt_n(batch.qxz, n_atoms),
            "xi2_yz_db": squeezing_parameter(math.sqrt(var_yz), n_atoms),
            "xi2_xz_db": squeezing_parameter(math.sqrt(var_xz), n_atoms),
            "xi2_stderr_db": variance_stderr_db(batch.qyz),
            "polar_zeta_db": polar_gain_estimate(var_yz, var_xz, n_atoms),
        })
    table = pd.DataFrame(rows)
    summary = {
        "n_atoms": n_atoms,
        "shots": len(psi),
        "sigma_det": p.sigma_det,
        "monotonic_yz": bool(np.all(np.diff(table["std_qyz_over_sqrt_n"]) >= 0)),
        "monotonic_xz": bool(np.all(np.diff(table["std_qxz_over_sqrt_n"]) >= 0)),
    }
    return ScenarioResult(table, summary)


# calibrate-pump-phase

def run_calibrate_pump_phase(p, seed: int, workers: int) -> ScenarioResult:
    name = "calibrate-pump-phase"
    config = base_config(p, seed, name, record_times=(p.squeeze_time_ms * MS,))
    psi = spinor_phase_rotation(integrate(config, workers=workers).at(0), ALIGNMENT_ANGLE)
    n_atoms = atom_number(psi)
    rows = []
    for fraction in p.delta_thetas_over_2pi:
        noise = NoiseConfig(
            delta_eta=p.delta_eta,
            delta_theta=fraction * 2.0 * math.pi,
            sigma_det=p.sigma_det,
            phase_correlation=p.phase_correlation,
        )
        batch = measure_ensemble(psi, noise, readout_rng(seed, name, 0))
        xi_yz, xi_xz = measured_squeezing(batch, n_atoms)
        rows.append({
            "delta_theta_over_2pi": fraction,
            "std_qyz_over_sqrt_n": _std_over_sqrt_n(batch.qyz, n_atoms),
            "std_qxz_over_sqrt_n": _std_over_sqrt_n(batch.qxz, n_atoms),
            "xi2_yz_db": xi_yz,
            "xi2_xz_db": xi_xz,
        })
    table = pd.DataFrame(rows)
    summary = {"n_atoms": n_atoms, "shots": len(psi), "squeeze_time_ms": p.squeeze_time_ms}
    return ScenarioResult(table, summary)


# detect-calib

SPLIT_SPINOR = ((1.0 / math.sqrt(2.0), 0.0), (0.0, 0.0), (1.0 / math.sqrt(2.0), 0.0))


def run_detect_calib(p, seed: int, workers: int) -> ScenarioResult:
    """Number-difference noise of (|+1> + |-1>)/sqrt2 per atom against the sqrt(N) projection noise."""
    name = "detect-calib"
    rows = []
    for index, n_atoms in enumerate(p.atom_numbers):
        config = base_config(
            p, seed, name,
            n_atoms=n_atoms,
            n_traj=p.shots,
            stream=index,
            record_times=(0.0,),
            initial_state="coherent",
            initial_spinor=SPLIT_SPINOR,
        )
        psi = integrate(config, workers=workers).at(0)
        difference = np.abs(psi[:, 0]) ** 2 - np.abs(psi[:, 2]) ** 2
        difference = difference + p.sigma_det * readout_rng(seed, name, index).standard_normal(len(difference))
        std = float(np.std(difference, ddof=1))
        corrected = math.sqrt(max(std ** 2 - p.sigma_det ** 2, 0.0))
        stderr = std / math.sqrt(2.0 * (len(difference) - 1))
        rows.append({
            "n_atoms": n_atoms,
            "std_diff": std,
            "std_diff_corrected": corrected,
            "std_diff_stderr": stderr,
            "sqrt_n": math.sqrt(n_atoms),
            "within_3se": abs(corrected - math.sqrt(n_atoms)) <= 3.0 * stderr,
        })
    table = pd.DataFrame(rows)
    summary = {"shots": p.shots, "sigma_det": p.sigma_det, "all_within_3se": bool(table["within_3se"].all())}
    return ScenarioResult(table, summary)


# rf-calib

RF_SPINOR = ((0.0, -0.5), (1.0 / math.sqrt(2.0), 0.0), (0.0, -0.5))


def run_rf_calib(p, seed: int, workers: int) -> ScenarioResult:
    """<N_0>/N of (-i|+1> + sqrt2|0> - i|-1>)/2 after a further small rotation about x by alpha."""
    name = "rf-calib"
    config = base_config(
        p, seed, name,
        n_traj=p.shots,
        record_times=(0.0,),
        initial_state="coherent",
        initial_spinor=RF_SPINOR,
    )
    psi = integrate(config, workers=workers).at(0)
    rows = []
    for alpha in p.alphas:
        # continuing the preparation rotation; exp(+i alpha F_x) raises <N_0>
        rotated = encode_phases(psi, PhasePoint(phi1=-alpha, phi2=0.0))
        fraction = (np.abs(rotated[:, 1]) ** 2 - 0.5) / p.n_atoms
        rows.append({
            "alpha": alpha,
            "n0_fraction": float(fraction.mean()),
            "n0_fraction_stderr": float(fraction.std(ddof=1) / math.sqrt(len(fraction))),
        })
    table = pd.DataFrame(rows)
    slope, intercept = np.polyfit(table["alpha"], table["n0_fraction"], 1)
    summary = {"n_atoms": p.n_atoms, "shots": p.shots, "slope": float(slope), "intercept": float(intercept)}
    return ScenarioResult(table, summary)


# oracle-compare

def exact_moments(
    n_atoms: int, c2: float, q: float, times: List[float], observables, theta_s: float = 0.0
) -> List[Dict[str, Tuple[float, float]]]:
    """Exact (mean, variance) per observable at each time, after the spinor phase rotation ``theta_s``."""
    basis = fock.build_basis(n_atoms)
    hamiltonian = fock.hamiltonian(basis, c2, q)
    operators = {name: fock.operator_matrix(name, basis) for name in observables}
    state = fock.polar_state(basis)
    elapsed = 0.0
    out = []
    for t in times:
        state = fock.evolve_exact(state, hamiltonian, t - elapsed)
        elapsed = t
        aligned = fock.spinor_rotate_exact(state, theta_s) if theta_s else state
        out.append({name: fock.moments_exact(aligned, op) for name, op in operators.items()})
    return out


def run_oracle_compare(p, seed: int, workers: int) -> ScenarioResult:
    name = "oracle-compare"
    times = [t * MS for t in p.times_ms]
    q = p.q_over_c2 * abs(p.c2)
    theta_s = ALIGNMENT_ANGLE if p.aligned else 0.0
    exact = exact_moments(p.n_atoms, p.c2, q, times, p.observables, theta_s)
    config = base_config(p, seed, name, record_times=tuple(times))
    ensemble = integrate(config, workers=workers)
    survivors = spinor_phase_rotation(ensemble.survivors, theta_s)
    moments = moments_from_amplitudes(ensemble.times, survivors, ensemble.n_aborted, observables=p.observables)

    rows = []
    for k, t_ms in enumerate(p.times_ms):
        for obs in p.observables:
            exact_mean, exact_var = exact[k][obs]
            twa_mean, twa_var = float(moments.means[obs][k]), float(moments.variances[obs][k])
            mean_err, var_err = float(moments.mean_stderr[obs][k]), float(moments.variance_stderr[obs][k])
            var_tol = max(0.05 * abs(exact_var), 3.0 * var_err)
            mean_tol = max(0.05 * abs(exact_mean), 3.0 * mean_err)
            rows.append({
                "t_ms": t_ms,
                "observable": obs,
                "exact_mean": exact_mean,
                "twa_mean": twa_mean,
                "twa_mean_stderr": mean_err,
                "exact_var": exact_var,
                "twa_var": twa_var,
                "twa_var_stderr": var_err,
                "var_rel_dev": (twa_var - exact_var) / exact_var if exact_var else 0.0,
                "mean_ok": abs(twa_mean - exact_mean) <= mean_tol,
                "var_ok": abs(twa_var - exact_var) <= var_tol,
            })
    table = pd.DataFrame(rows)
    summary = {
        "n_atoms": p.n_atoms,
        "n_traj": moments.n_traj,
        "theta_s": theta_s,
        "basis_dim": fock.build_basis(p.n_atoms).dim,
        "all_within_tolerance": bool(table["mean_ok"].all() and table["var_ok"].all()),
    }
    return ScenarioResult(table, summary, {"twa_moments": moments.table()})


# kunkel-compare

def run_kunkel_compare(p, seed: int, workers: int) -> ScenarioResult:
    name = "kunkel-compare"
    config = base_config(p, seed, name, record_times=tuple(t * MS for t in p.times_ms))
    ensemble = integrate(config, workers=workers)
    rows = []
    for index, t_ms in enumerate(p.times_ms):
        psi = ensemble.at(index)
        psi = spinor_phase_rotation(psi, optimal_alignment_angle(psi))
        n_t = atom_number(psi)
        obs = classical_observables(psi)
        protocol = measure_ensemble(psi, NoiseConfig(), readout_rng(seed, name, index))
        kunkel_yz, kunkel_xz = kunkel_measure(psi, readout_rng(seed, name, index, 1))
        rows.append({
            "t_ms": t_ms,
            "intrinsic_xi2_yz_db": squeezing_parameter(np.std(obs["Qyz"]), n_t),
            "intrinsic_xi2_xz_db": squeezing_parameter(np.std(obs["Qxz"]), n_t),
            "protocol_xi2_yz_db": squeezing_parameter(np.std(protocol.qyz), n_t),
            "protocol_xi2_xz_db": squeezing_parameter(np.std(protocol.qxz), n_t),
            "kunkel_xi2_yz_db": squeezing_parameter(np.std(kunkel_yz), n_t),
            "kunkel_xi2_xz_db": squeezing_parameter(np.std(kunkel_xz), n_t),
        })
    table = pd.DataFrame(rows)
    summary = {
        "n_atoms": p.n_atoms,
        "n_traj": int(ensemble.alive.sum()),
        "kunkel_min_db": float(table[["kunkel_xi2_yz_db", "kunkel_xi2_xz_db"]].min().min()),
        "protocol_min_db": float(table[["protocol_xi2_yz_db", "protocol_xi2_xz_db"]].min().min()),
    }
    return ScenarioResult(table, summary)


RUNNERS: Dict[str, Callable[[Any, int, int], ScenarioResult]] = {
    "squeeze-scan": run_squeeze_scan,
    "gain-map": run_gain_map,
    "calibrate-crosstalk": run_calibrate_crosstalk,
    "calibrate-pump-phase": run_calibrate_pump_phase,
    "detect-calib": run_detect_calib,
    "rf-calib": run_rf_calib,
    "oracle-compare": run_oracle_compare,
    "kunkel-compare": run_kunkel_compare,
}


# Output

def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_outputs(out_dir: Path, name: str, result: ScenarioResult) -> Dict[str, str]:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        table_path = out_dir / f"{name}.csv"
        result.table.to_csv(table_path, index=False)
        written.append(table_path)
        for key, frame in result.extra_tables.items():
            path = out_dir / f"{name}_{key}.csv"
            frame.to_csv(path, index=False)
            written.append(path)
        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(_jsonable(result.summary), indent=2, sort_keys=True))
        written.append(summary_path)
    except OSError as e:
        raise OutputError(f"Cannot write results to {out_dir}: {e}")
    return {path.name: sha256_file(path) for path in written}


def run_scenario(scenario: Scenario) -> Tuple[RunManifest, ScenarioResult]:
    """Run one scenario end to end and write its tables, summary and manifest under ``scenario.out_dir``."""
    params = resolve_params(scenario.name, scenario.params, scenario.profile)
    logger.info(f"Running {scenario.name} (profile {scenario.profile}, seed {scenario.seed}, {scenario.workers} worker(s))")
    result = RUNNERS[scenario.name](params, scenario.seed, scenario.workers)
    out_dir = Path(scenario.out_dir)
    files = write_outputs(out_dir, scenario.name, result)
    manifest = RunManifest(
        scenario=scenario.name,
        schema_version=SCHEMA_VERSION,
        code_version=__version__,
        rng_algorithm=RNG_ALGORITHM,
        seed=scenario.seed,
        profile=scenario.profile,
        workers=scenario.workers,
        resolved_params=params.model_dump(),
        timestamp=datetime.now(timezone.utc).isoformat(),
        files=files,
    )
    try:
        (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    except OSError as e:
        raise OutputError(f"Cannot write manifest to {out_dir}: {e}")
    logger.info(f"Wrote {len(files)} result files and manifest to {out_dir}")
    return manifest, result


def load_manifest(path) -> RunManifest:
    try:
        return RunManifest.model_validate_json(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read manifest {path}: {e}")


def replay_manifest(manifest: RunManifest, out_dir, workers: Optional[int] = None) -> Tuple[RunManifest, List[str]]:
    """Re-run a recorded scenario; returns the new manifest and the names of files whose checksum changed."""
    scenario = Scenario(
        name=manifest.scenario,
        params=manifest.resolved_params,
        out_dir=str(out_dir),
        seed=manifest.seed,
        workers=workers or manifest.workers,
        profile=manifest.profile,
    )
    replayed, _ = run_scenario(scenario)
    mismatched = sorted(
        name for name, digest in manifest.files.items() if replayed.files.get(name) != digest
    )
    if mismatched:
        logger.error(f"Replay differs from the recorded run in {mismatched}")
    return replayed, mismatched
