"""
Estimation layer: probe preparation (quench, spinor alignment), two-phase
encoding, quartic response fits, error-propagation sensitivities, SQL
references and the joint metrological gain.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg as linalg

from errors import ConfigError, DomainError, FitError, SensitivityError, StatisticsError
from fock import SINGLE_PARTICLE
from measurement import MeasurementBatch, measure_ensemble, measured_squeezing
from schemas import NoiseConfig, PhasePoint, SimConfig
from seeding import READOUT_STREAM, make_rng, seed_derive
from twa import atom_number, classical_observables, integrate

logger = logging.getLogger(__name__)

# psi_0 -> psi_0 e^{-i theta_s} turning the squeezed quadrature of the q=|c2| state onto Q_yz and Q_xz
ALIGNMENT_ANGLE = -0.25 * math.pi
QUENCH_PRE_FACTOR = 13.0
MIN_SWEEP_POINTS = 6
MIN_SHOTS = 2
SLOPE_FLOOR = 1e-9
TEN_LOG10_2 = 10.0 * math.log10(2.0)


def rotation_matrix(p: PhasePoint) -> np.ndarray:
    generator = p.phi1 * SINGLE_PARTICLE["Lx"] + p.phi2 * SINGLE_PARTICLE["Ly"]
    return linalg.expm(-1j * generator)


def encode_phases(psi: np.ndarray, p: PhasePoint) -> np.ndarray:
    """Apply exp(-i(phi1 F_x + phi2 F_y)) to every (psi_+1, psi_0, psi_-1) row."""
    if p.alpha > math.pi:
        raise ConfigError(f"Encoded rotation angle {p.alpha:.3f} exceeds pi")
    if p.phi1 == 0 and p.phi2 == 0:
        return np.array(psi, dtype=complex, copy=True)
    return np.asarray(psi, dtype=complex) @ rotation_matrix(p).T


def spinor_phase_rotation(psi: np.ndarray, theta_s: float) -> np.ndarray:
    out = np.array(psi, dtype=complex, copy=True)
    out[..., 1] *= np.exp(-1j * theta_s)
    return out


def optimal_alignment_angle(psi: np.ndarray) -> float:
    """
    Spinor phase minimizing Var Q_yz(theta) + Var Q_xz(theta) over the ensemble ``psi`` (n, 3).

    Under psi_0 -> psi_0 e^{-i theta}: Q_yz -> cos Q_yz - sin L_x and
    Q_xz -> cos Q_xz + sin L_y.
    """
    obs = classical_observables(np.asarray(psi))

    def cov(a, b):
        return float(np.mean((a - a.mean()) * (b - b.mean())))

    quad = cov(obs["Qyz"], obs["Qyz"]) + cov(obs["Qxz"], obs["Qxz"])
    spin = cov(obs["Lx"], obs["Lx"]) + cov(obs["Ly"], obs["Ly"])
    cross = cov(obs["Qyz"], obs["Lx"]) - cov(obs["Qxz"], obs["Ly"])
    delta = math.atan2(cross, 0.5 * (quad - spin))
    theta = 0.5 * (math.pi - delta)
    # period pi; report in (-pi/2, pi/2]
    return theta - math.pi if theta > 0.5 * math.pi else theta


def quench_schedule(
    config: SimConfig,
    hold_time: float,
    pre_factor: float = QUENCH_PRE_FACTOR,
    post_factor: float = 1.0,
    ramp: Optional[bool] = None,
) -> SimConfig:
    """
    Hold at q = pre_factor |c2| for ``hold_time``, then quench to q = post_factor |c2|.

    Record times of ``config`` are read as times after the quench and are
    shifted by the hold.
    """
    if hold_time < 0:
        raise ConfigError("quench hold time must be non-negative")
    changes = {
        "q0": post_factor * abs(config.c2),
        "q_pre": pre_factor * abs(config.c2) if hold_time > 0 else None,
        "t_quench": hold_time,
        "record_times": tuple(hold_time + t for t in config.record_times),
    }
    if ramp is not None:
        changes["q_ramp"] = ramp
    return config.with_changes(**changes)


@dataclass(frozen=True)
class ChannelFit:
    """Quartic mean and linear-free quartic std of one observable against its sweep variable."""

    variable: str  # "phi1", "phi2" or "alpha"
    mean_coeffs: np.ndarray  # ascending powers of x/scale
    std_coeffs: np.ndarray  # powers 0, 2, 3, 4 of x/scale
    scale: float
    domain: Tuple[float, float]
    theta: float = 0.0
    residual_rms: Tuple[float, float] = (0.0, 0.0)

    def mean(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x) / self.scale, self.mean_coeffs)

    def derivative(self, x):
        slope = np.polynomial.polynomial.polyder(self.mean_coeffs)
        return np.polynomial.polynomial.polyval(np.asarray(x) / self.scale, slope) / self.scale

    def std(self, x):
        s = np.asarray(x) / self.scale
        c0, c2, c3, c4 = self.std_coeffs
        return c0 + c2 * s ** 2 + c3 * s ** 3 + c4 * s ** 4


@dataclass(frozen=True)
class ResponseFit:
    channels: Dict[str, ChannelFit] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ChannelFit:
        return self.channels[name]


def _lstsq(design: np.ndarray, target: np.ndarray, what: str) -> Tuple[np.ndarray, float]:
    coeffs, _, rank, singular = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        raise FitError(
            f"Rank-deficient design for the {what} fit",
            {"rank": int(rank), "columns": design.shape[1], "singular_values": singular.tolist()},
        )
    residual = target - design @ coeffs
    return coeffs, float(np.sqrt(np.mean(residual ** 2)))


def fit_channel(sweep, shots, variable: str = "alpha", theta: float = 0.0) -> ChannelFit:
    """
    Fit one observable; ``shots`` has one row of single-shot values per sweep value.

    The mean is a full quartic, the standard deviation a quartic without
    linear term.
    """
    sweep = np.asarray(sweep, dtype=float)
    shots = np.asarray(shots, dtype=float)
    if len(np.unique(sweep)) < MIN_SWEEP_POINTS:
        raise FitError(f"Need at least {MIN_SWEEP_POINTS} distinct sweep values", {"distinct": int(len(np.unique(sweep)))})
    if shots.ndim != 2 or shots.shape[0] != len(sweep) or shots.shape[1] < MIN_SHOTS:
        raise FitError(f"Need at least {MIN_SHOTS} shots per sweep value", {"shape": list(shots.shape)})
    scale = float(np.max(np.abs(sweep))) or 1.0
    s = sweep / scale
    means = shots.mean(axis=1)
    stds = shots.std(axis=1, ddof=1)

    mean_coeffs, mean_rms = _lstsq(np.vander(s, 5, increasing=True), means, "mean")
    std_design = np.column_stack([np.ones_like(s), s ** 2, s ** 3, s ** 4])
    std_coeffs, std_rms = _lstsq(std_design, stds, "standard deviation")

    fit = ChannelFit(
        variable=variable,
        mean_coeffs=mean_coeffs,
        std_coeffs=std_coeffs,
        scale=scale,
        domain=(float(sweep.min()), float(sweep.max())),
        theta=theta,
        residual_rms=(mean_rms, std_rms),
    )
    dense = np.linspace(fit.domain[0], fit.domain[1], 201)
    if np.any(fit.std(dense) <= 0):
        raise FitError("Fitted standard deviation is not positive on the sweep domain", {"std_coeffs": std_coeffs.tolist()})
    return fit


def fit_response(
    sweep,
    samples: Dict[str, np.ndarray],
    variables: Union[str, Dict[str, str]] = "alpha",
    theta: float = 0.0,
) -> ResponseFit:
    """Quartic fits for each observable in ``samples`` (``{"Qyz": shots, "Qxz": shots}``)."""
    if isinstance(variables, str):
        variables = {name: variables for name in samples}
    return ResponseFit({name: fit_channel(sweep, shots, variables[name], theta) for name, shots in samples.items()})


def _phase_slope(channel: ChannelFit, p: PhasePoint, phase: str) -> Tuple[float, float]:
    """(std, d<Q>/d phase) of a channel at ``p``."""
    if channel.variable == "alpha":
        # signed distance along the ray through the origin
        x = p.phi1 * math.cos(channel.theta) + p.phi2 * math.sin(channel.theta)
        projection = math.cos(channel.theta) if phase == "phi1" else math.sin(channel.theta)
        if abs(projection) < SLOPE_FLOOR:
            raise SensitivityError(f"Ray at theta={channel.theta:.3f} carries no {phase} information")
        slope = float(channel.derivative(x)) / projection
    else:
        if channel.variable != phase:
            raise SensitivityError(f"Channel swept in {channel.variable} cannot resolve {phase}")
        x = p.phi1 if phase == "phi1" else p.phi2
        slope = float(channel.derivative(x))
    low, high = channel.domain
    margin = 1e-9 * max(1.0, abs(low), abs(high))
    if not low - margin <= x <= high + margin:
        raise SensitivityError(f"{phase} point {x:.4g} lies outside the fitted domain [{low:.4g}, {high:.4g}]")
    return float(channel.std(x)), slope


def sensitivity(fit: ResponseFit, p: PhasePoint) -> Tuple[float, float]:
    """(dphi1, dphi2) = (dQ_yz / |d<Q_yz>/dphi1|, dQ_xz / |d<Q_xz>/dphi2|) from the fitted curves."""
    out = []
    for name, phase in (("Qyz", "phi1"), ("Qxz", "phi2")):
        spread, slope = _phase_slope(fit[name], p, phase)
        if abs(slope) < SLOPE_FLOOR:
            raise SensitivityError(f"Response slope of {name} vanishes at {p}", {"slope": slope})
        out.append(spread / abs(slope))
    return out[0], out[1]


def sql(n_atoms: float, mode: str = "single") -> float:
    if not n_atoms >= 1:
        raise DomainError(f"SQL needs at least one atom, got {n_atoms}")
    if mode == "single":
        return 1.0 / (2.0 * math.sqrt(n_atoms))
    if mode == "joint":
        return 1.0 / math.sqrt(2.0 * n_atoms)
    raise ConfigError(f"Unknown SQL mode {mode!r}")


def gain(delta_phi1: float, delta_phi2: float, n_atoms: float, reference: str = "joint") -> float:
    """zeta in dB against the joint two-phase SQL; the split-ensemble reference is 3 dB higher."""
    if not (delta_phi1 > 0 and delta_phi2 > 0):
        raise DomainError("phase uncertainties must be positive", {"delta_phi1": delta_phi1, "delta_phi2": delta_phi2})
    reference_variance = 2.0 * sql(n_atoms, "single") ** 2
    zeta = -10.0 * math.log10((delta_phi1 ** 2 + delta_phi2 ** 2) / reference_variance)
    if reference == "split":
        return zeta + TEN_LOG10_2
    if reference != "joint":
        raise ConfigError(f"Unknown SQL reference {reference!r}")
    return zeta


def scatter_summary(batch: MeasurementBatch, n_atoms: float) -> Tuple[Tuple[float, float], float]:
    """Center (<Q_yz>/N, <Q_xz>/N) and radius sqrt3 sqrt(Var Q_yz + Var Q_xz)/N of a shot cloud."""
    if len(batch) < MIN_SHOTS:
        raise StatisticsError(f"Scatter summary needs at least {MIN_SHOTS} shots, got {len(batch)}")
    center = (float(np.mean(batch.qyz)) / n_atoms, float(np.mean(batch.qxz)) / n_atoms)
    radius = math.sqrt(3.0) * math.sqrt(float(np.var(batch.qyz)) + float(np.var(batch.qxz))) / n_atoms
    return center, radius


def polar_gain_estimate(var_yz: float, var_xz: float, n_atoms: float) -> float:
    """Small-angle gain of a probe with the polar response slope 2N in each channel."""
    slope = 2.0 * n_atoms
    return gain(math.sqrt(var_yz) / slope, math.sqrt(var_xz) / slope, n_atoms)


def undepleted_squeezing_db(c2: float, t) -> np.ndarray:
    """Two-mode squeezing law in the undepleted pump limit at q = |c2|: 20 log10 e^{-|c2| t}."""
    return -20.0 / math.log(10.0) * abs(c2) * np.asarray(t, dtype=float)


def noisy_squeezing_scan(
    config: SimConfig,
    noise: NoiseConfig,
    workers: int = 1,
    alignment: str = "fixed",
    readout_stream: int = READOUT_STREAM,
) -> List[Tuple[float, float, float]]:
    """
    Measured squeezing (t after the quench, xi2_yz, xi2_xz) at every record time of ``config``.

    Used to pick the squeezing time of a probe under the same readout noise
    it will be measured with.
    """
    ensemble = integrate(config, workers=workers)
    scan = []
    for index, t in enumerate(ensemble.times):
        psi = ensemble.at(index)
        theta_s = optimal_alignment_angle(psi) if alignment == "optimal" else ALIGNMENT_ANGLE
        psi = spinor_phase_rotation(psi, theta_s)
        rng = make_rng(seed_derive(config.seed, config.seed_namespace, index, readout_stream))
        batch = measure_ensemble(psi, noise, rng)
        xi_yz, xi_xz = measured_squeezing(batch, atom_number(psi))
        scan.append((t - config.t_quench, xi_yz, xi_xz))
        logger.debug(f"t={1e3 * (t - config.t_quench):.1f} ms: xi2 = ({xi_yz:.2f}, {xi_xz:.2f}) dB")
    return scan


def best_squeezing_time(scan: List[Tuple[float, float, float]]) -> float:
    """Time with the lowest channel-averaged measured xi2."""
    return min(scan, key=lambda row: 0.5 * (row[1] + row[2]))[0]
