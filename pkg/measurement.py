"""
Microwave readout of Q_yz and Q_xz in a single shot.

Two interchangeable layers map trajectory amplitudes onto detectable
populations:

* ``ideal``: split the signal into a_S/a_A, split the m=0 pump into two
  halves with relative phase pi/2, add readout noise, mix each signal with its
  pump on a 50/50 coupling.
* ``pulses``: the seven-pulse program on the eight hyperfine levels. With the
  default angles it reproduces the ideal layer amplitude by amplitude.

Both end with ``readout``: populations, detection noise on the two
population differences, division by the pump splitting amplitudes.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from errors import ConfigError, DomainError
from schemas import NoiseConfig, PulseCoupling, PulseProgram, PulseStep

logger = logging.getLogger(__name__)

SQRT_HALF = 1.0 / math.sqrt(2.0)

# (F, m) of every extended mode, in storage order
LEVELS: Tuple[Tuple[int, int], ...] = ((1, -1), (1, 0), (1, 1), (2, -2), (2, -1), (2, 0), (2, 1), (2, 2))
MODE_INDEX = {level: i for i, level in enumerate(LEVELS)}

# Population differences read out per channel: (bright port, partner port)
YZ_PORTS = ((2, -1), (2, -2))
XZ_PORTS = ((2, 1), (2, 2))


@dataclass(frozen=True)
class ExtendedAmplitudes:
    """Amplitudes of the eight hyperfine modes, shape (..., 8), order ``LEVELS``."""

    modes: np.ndarray

    @classmethod
    def from_spinor(cls, psi: np.ndarray) -> "ExtendedAmplitudes":
        psi = np.asarray(psi, dtype=complex)
        modes = np.zeros(psi.shape[:-1] + (len(LEVELS),), dtype=complex)
        modes[..., MODE_INDEX[(1, 1)]] = psi[..., 0]
        modes[..., MODE_INDEX[(1, 0)]] = psi[..., 1]
        modes[..., MODE_INDEX[(1, -1)]] = psi[..., 2]
        return cls(modes)

    def amplitude(self, level: Tuple[int, int]) -> np.ndarray:
        return self.modes[..., MODE_INDEX[level]]

    def population(self, level: Tuple[int, int]) -> np.ndarray:
        return np.abs(self.amplitude(level)) ** 2

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.modes) ** 2

    @property
    def total(self) -> np.ndarray:
        return self.populations.sum(axis=-1)


@dataclass(frozen=True)
class MeasurementBatch:
    """Shot-by-shot readout of a batch; ``qyz``/``qxz`` are in atoms."""

    qyz: np.ndarray
    qxz: np.ndarray
    populations: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.qyz)


def split_signal(psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """a_S = (psi_+1 + psi_-1)/sqrt2, a_A = (psi_+1 - psi_-1)/sqrt2."""
    return SQRT_HALF * (psi[..., 0] + psi[..., 2]), SQRT_HALF * (psi[..., 0] - psi[..., 2])


def draw_pump_phases(noise: NoiseConfig, rng: np.random.Generator, shape) -> Tuple[np.ndarray, np.ndarray]:
    if noise.delta_theta == 0:
        return np.zeros(shape), np.zeros(shape)
    theta1 = noise.delta_theta * rng.standard_normal(shape)
    if noise.phase_correlation == "common":
        return theta1, theta1
    return theta1, noise.delta_theta * rng.standard_normal(shape)


def pump_splitting(noise: NoiseConfig, n0: float) -> Tuple[float, float, float]:
    """
    Effective (eps1, eps2, leftover fraction) for a pump of ``n0`` atoms.

    ``residual_pump`` atoms stay behind in |1,0> and are taken out of both
    pumps in proportion; a larger nominal leftover 1 - eps1^2 - eps2^2 wins.
    """
    nominal = noise.eps1 ** 2 + noise.eps2 ** 2
    leftover = max(0.0, 1.0 - nominal)
    if noise.residual_pump > 0 and n0 > 0:
        leftover = max(leftover, min(noise.residual_pump / n0, 1.0))
    if nominal <= 0:
        return 0.0, 0.0, leftover
    shrink = math.sqrt((1.0 - leftover) / nominal)
    return shrink * noise.eps1, shrink * noise.eps2, leftover


def split_pump(psi0, noise: NoiseConfig, rng: np.random.Generator):
    """(pump1, pump2, residual): i eps1 e^{i theta1} psi0, eps2 e^{i theta2} psi0 and the leftover m=0 amplitude."""
    psi0 = np.asarray(psi0, dtype=complex)
    eps1, eps2, leftover = pump_splitting(noise, float(np.mean(np.abs(psi0) ** 2)))
    theta1, theta2 = draw_pump_phases(noise, rng, psi0.shape)
    pump1 = 1j * eps1 * np.exp(1j * theta1) * psi0
    pump2 = eps2 * np.exp(1j * theta2) * psi0
    return pump1, pump2, math.sqrt(leftover) * psi0


def draw_crosstalk(noise: NoiseConfig, rng: np.random.Generator, shape) -> Tuple[np.ndarray, np.ndarray]:
    if noise.delta_eta == 0:
        zero = np.zeros(shape, dtype=complex)
        return zero, zero
    # total_power: <|eta|^2> = delta_eta^2; per_quadrature: real and imaginary parts each of std delta_eta
    scale = noise.delta_eta * SQRT_HALF if noise.crosstalk_convention == "total_power" else noise.delta_eta
    draws = rng.standard_normal(tuple(shape) + (2, 2))
    eta = scale * (draws[..., 0] + 1j * draws[..., 1])
    return eta[..., 0], eta[..., 1]


def add_crosstalk(a_s, a_a, noise: NoiseConfig, rng: np.random.Generator):
    eta_s, eta_a = draw_crosstalk(noise, rng, np.shape(a_s))
    return a_s + eta_s, a_a + eta_a


def homodyne_outputs(a_s, a_a, pump1, pump2, residual=None) -> ExtendedAmplitudes:
    """50/50 mixing of each signal with its pump; the leftover pump stays in |1,0>."""
    a_s = np.asarray(a_s, dtype=complex)
    modes = np.zeros(a_s.shape + (len(LEVELS),), dtype=complex)
    modes[..., MODE_INDEX[(2, -2)]] = SQRT_HALF * (a_s + pump1)
    modes[..., MODE_INDEX[(2, -1)]] = SQRT_HALF * 1j * (a_s - pump1)
    modes[..., MODE_INDEX[(2, 2)]] = SQRT_HALF * (a_a - pump2)
    modes[..., MODE_INDEX[(2, 1)]] = SQRT_HALF * (a_a + pump2)
    if residual is not None:
        modes[..., MODE_INDEX[(1, 0)]] = residual
    return ExtendedAmplitudes(modes)


def readout(
    outputs: ExtendedAmplitudes,
    noise: NoiseConfig,
    rng: np.random.Generator,
    detection: Tuple[bool, bool] = (True, True),
) -> MeasurementBatch:
    """Q_yz = (N_2,-1 - N_2,-2)/eps1 and Q_xz = (N_2,+1 - N_2,+2)/eps2, with detection noise on each difference."""
    if noise.eps1 <= 0 or noise.eps2 <= 0:
        raise ConfigError("readout needs non-zero pump splitting amplitudes")
    populations = outputs.populations
    diff_yz = populations[..., MODE_INDEX[YZ_PORTS[0]]] - populations[..., MODE_INDEX[YZ_PORTS[1]]]
    diff_xz = populations[..., MODE_INDEX[XZ_PORTS[0]]] - populations[..., MODE_INDEX[XZ_PORTS[1]]]
    if noise.sigma_det > 0:
        jitter = noise.sigma_det * rng.standard_normal(diff_yz.shape + (2,))
        if detection[0]:
            diff_yz = diff_yz + jitter[..., 0]
        if detection[1]:
            diff_xz = diff_xz + jitter[..., 1]
    return MeasurementBatch(
        qyz=np.atleast_1d(diff_yz / noise.eps1),
        qxz=np.atleast_1d(diff_xz / noise.eps2),
        populations=populations.reshape(-1, len(LEVELS)),
    )


# Pulse layer

def coupling_unitary(angle: float, phase: float) -> np.ndarray:
    """2x2 rotation on (|1,i>, |2,j>) by ``angle`` about an equatorial axis at ``phase``."""
    c, s = math.cos(0.5 * angle), math.sin(0.5 * angle)
    return np.array(
        [[c, -1j * np.exp(-1j * phase) * s], [-1j * np.exp(1j * phase) * s, c]],
        dtype=complex,
    )


def solve_split_angles(eps1: float = SQRT_HALF, eps2: float = SQRT_HALF) -> Tuple[float, float, float]:
    """
    Angles of the three pump-splitting couplings so that |2,-1> ends with
    eps1^2 and |2,+1> with eps2^2 of the m=0 atoms; the rest stays in |1,0>.

    The third coupling is fixed at pi/2. With x = cos(a1/2)cos(a2/2) and
    y = sin(a1/2): x + y = sqrt2 eps1 and x^2 + y^2 = 1 - eps2^2.
    """
    if eps1 < 0 or eps2 < 0 or eps1 ** 2 + eps2 ** 2 > 1.0 + 1e-12:
        raise ConfigError(f"Invalid pump splitting eps1={eps1}, eps2={eps2}")
    total = math.sqrt(2.0) * eps1
    norm = 1.0 - eps2 ** 2
    spread = math.sqrt(max(2.0 * norm - total ** 2, 0.0))
    x, y = 0.5 * (total + spread), 0.5 * (total - spread)
    phi1 = 2.0 * math.asin(max(-1.0, min(1.0, y)))
    c1 = math.cos(0.5 * phi1)
    phi2 = 2.0 * math.acos(max(-1.0, min(1.0, x / c1))) if c1 > 0 else 0.0
    return phi1, phi2, 0.5 * math.pi


def default_pulse_program(eps1: float = SQRT_HALF, eps2: float = SQRT_HALF) -> PulseProgram:
    phi1, phi2, phi3 = solve_split_angles(eps1, eps2)
    half_pi = 0.5 * math.pi
    steps = (
        PulseStep(label="transfer (1,-1) to (2,0); split pump into (2,-1)", couplings=(
            PulseCoupling(levels=(-1, 0), angle=math.pi, phase=0.0),
            PulseCoupling(levels=(0, -1), angle=phi1, phase=half_pi),
        )),
        PulseStep(label="form a_S/a_A on (2,0)-(1,+1); split pump into (2,+1)", couplings=(
            PulseCoupling(levels=(1, 0), angle=half_pi, phase=0.0),
            PulseCoupling(levels=(0, 1), angle=phi2, phase=half_pi),
        )),
        PulseStep(label="return (2,0) to (1,-1); finish pump transfer into (2,-1)", couplings=(
            PulseCoupling(levels=(-1, 0), angle=math.pi, phase=math.pi),
            PulseCoupling(levels=(0, -1), angle=phi3, phase=half_pi),
        )),
        PulseStep(label="homodyne a_S with pump 1", couplings=(PulseCoupling(levels=(-1, -1), angle=half_pi, phase=math.pi),)),
        PulseStep(label="homodyne a_A with pump 2", couplings=(PulseCoupling(levels=(1, 1), angle=half_pi, phase=half_pi),)),
        PulseStep(label="shelve (1,-1) in (2,-2)", couplings=(PulseCoupling(levels=(-1, -2), angle=math.pi, phase=half_pi),)),
        PulseStep(label="shelve (1,+1) in (2,+2)", couplings=(PulseCoupling(levels=(1, 2), angle=math.pi, phase=half_pi),)),
    )
    return PulseProgram(steps=steps, noise_after=3)


DEFAULT_PULSES = default_pulse_program()


def load_pulse_program(source: Union[str, Path, dict, list]) -> PulseProgram:
    """
    Pulse program from JSON text, a JSON file, or already-parsed data.

    Accepted shapes: ``{"steps": [{"couplings": [{"levels": [i, j], "angle": a, "phase": p}]}]}``
    or a bare list of steps, each a list of couplings.
    """
    try:
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith(("{", "["))):
            source = Path(source).read_text()
        data = json.loads(source) if isinstance(source, str) else source
        if isinstance(data, list):
            data = {"steps": [{"couplings": step} if isinstance(step, list) else step for step in data]}
        return PulseProgram.model_validate(data)
    except (OSError, json.JSONDecodeError, ValidationError, TypeError) as e:
        raise ConfigError(f"Malformed pulse program: {e}")


def apply_pulse(ext: ExtendedAmplitudes, pulse: PulseStep) -> ExtendedAmplitudes:
    modes = ext.modes.copy()
    for coupling in pulse.couplings:
        lower = MODE_INDEX[(1, coupling.levels[0])]
        upper = MODE_INDEX[(2, coupling.levels[1])]
        u = coupling_unitary(coupling.angle, coupling.phase)
        a, b = modes[..., lower].copy(), modes[..., upper].copy()
        modes[..., lower] = u[0, 0] * a + u[0, 1] * b
        modes[..., upper] = u[1, 0] * a + u[1, 1] * b
    return ExtendedAmplitudes(modes)


def pulse_sequence(ext: ExtendedAmplitudes, pulses: Union[PulseProgram, Sequence[PulseStep]]) -> ExtendedAmplitudes:
    steps = pulses.steps if isinstance(pulses, PulseProgram) else pulses
    for pulse in steps:
        if not isinstance(pulse, PulseStep):
            raise ConfigError(f"Malformed pulse spec: {pulse!r}")
        ext = apply_pulse(ext, pulse)
    return ext


def inject_readout_noise(ext: ExtendedAmplitudes, noise: NoiseConfig, rng: np.random.Generator) -> ExtendedAmplitudes:
    """Crosstalk on the signal levels and phase jitter on the two pump levels, mid-sequence."""
    modes = ext.modes.copy()
    shape = modes.shape[:-1]
    theta1, theta2 = draw_pump_phases(noise, rng, shape)
    eta_s, eta_a = draw_crosstalk(noise, rng, shape)
    modes[..., MODE_INDEX[(1, -1)]] += eta_s
    modes[..., MODE_INDEX[(1, 1)]] += eta_a
    modes[..., MODE_INDEX[(2, -1)]] *= np.exp(1j * theta1)
    modes[..., MODE_INDEX[(2, 1)]] *= np.exp(1j * theta2)
    return ExtendedAmplitudes(modes)


def ideal_outputs(psi: np.ndarray, noise: NoiseConfig, rng: np.random.Generator) -> ExtendedAmplitudes:
    a_s, a_a = split_signal(psi)
    pump1, pump2, residual = split_pump(psi[..., 1], noise, rng)
    a_s, a_a = add_crosstalk(a_s, a_a, noise, rng)
    return homodyne_outputs(a_s, a_a, pump1, pump2, residual)


def pulsed_outputs(
    psi: np.ndarray, noise: NoiseConfig, rng: np.random.Generator, program: Optional[PulseProgram] = None
) -> ExtendedAmplitudes:
    if program is None:
        eps1, eps2, _ = pump_splitting(noise, float(np.mean(np.abs(np.asarray(psi)[..., 1]) ** 2)))
        program = default_pulse_program(eps1, eps2)
    ext = pulse_sequence(ExtendedAmplitudes.from_spinor(psi), program.steps[: program.noise_after])
    ext = inject_readout_noise(ext, noise, rng)
    return pulse_sequence(ext, program.steps[program.noise_after:])


def measure_ensemble(
    psi: np.ndarray,
    noise: NoiseConfig,
    rng: np.random.Generator,
    layer: str = "ideal",
    program: Optional[PulseProgram] = None,
) -> MeasurementBatch:
    """Readout of every trajectory in ``psi`` (shape (n, 3)), one shot each."""
    psi = np.atleast_2d(psi)
    if layer == "ideal":
        outputs = ideal_outputs(psi, noise, rng)
    elif layer == "pulses":
        outputs = pulsed_outputs(psi, noise, rng, program)
    else:
        raise ConfigError(f"Unknown readout layer {layer!r}")
    return readout(outputs, noise, rng)


def kunkel_measure(psi: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Readout that first mixes each signal mode 50/50 with an empty level.

    The vacuum partner carries its own half quantum of Wigner noise, so the
    measured variance is (signal variance + vacuum variance)/2.
    """
    psi = np.atleast_2d(psi)
    a_s, a_a = split_signal(psi)
    draws = rng.standard_normal(a_s.shape + (2, 2))
    vacuum = 0.5 * (draws[..., 0] + 1j * draws[..., 1])
    a_s = SQRT_HALF * (a_s + vacuum[..., 0])
    a_a = SQRT_HALF * (a_a + vacuum[..., 1])
    psi0 = psi[..., 1]
    return 2.0 * np.imag(np.conj(a_s) * psi0), 2.0 * np.real(np.conj(a_a) * psi0)


def squeezing_parameter(delta_q, n_atoms):
    """xi^2 = 20 log10(dQ / sqrt(N)) in dB."""
    delta_q = np.asarray(delta_q, dtype=float)
    n_atoms = np.asarray(n_atoms, dtype=float)
    if np.any(~(delta_q > 0)) or np.any(~(n_atoms > 0)):
        raise DomainError("squeezing parameter needs positive dQ and N", {"delta_q": delta_q.tolist(), "n_atoms": n_atoms.tolist()})
    value = 20.0 * np.log10(delta_q / np.sqrt(n_atoms))
    return float(value) if value.ndim == 0 else value


def measured_squeezing(batch: MeasurementBatch, n_atoms: float) -> Tuple[float, float]:
    return (
        squeezing_parameter(np.std(batch.qyz), n_atoms),
        squeezing_parameter(np.std(batch.qxz), n_atoms),
    )


def variance_stderr_db(samples: np.ndarray) -> float:
    """Standard error of 10 log10(Var) from the sample fourth moment."""
    centered = samples - samples.mean()
    variance = (centered ** 2).mean()
    if variance <= 0:
        return 0.0
    spread = math.sqrt(max((centered ** 4).mean() - variance ** 2, 0.0) / len(samples))
    return float(10.0 / math.log(10.0) * spread / variance)
