"""
Truncated Wigner engine for the three-mode spinor condensate.

Amplitudes are complex arrays whose last axis holds (psi_+1, psi_0, psi_-1)
in units of sqrt(atoms); every function here is vectorized over the leading
axes so one call advances a whole block of trajectories.

Trajectories are grouped into blocks of ``SimConfig.block_size``. Block ``b``
draws all of its randomness from the Philox stream
``seed_derive(seed, seed_namespace, b, stream)``, and blocks are concatenated
in index order before any reduction, so results do not depend on how many
worker processes ran the blocks.
"""
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import AbortBudgetExceeded, OutputError
from fock import SINGLE_PARTICLE
from schemas import SimConfig
from seeding import make_rng, seed_derive

logger = logging.getLogger(__name__)

POPULATIONS = ("N+1", "N0", "N-1")
QUADRATURES = ("Qyz", "Qxz", "Lx", "Ly")
MOMENT_OBSERVABLES = POPULATIONS + QUADRATURES + ("Lz",)
# symmetric-ordering offsets of a single mode
POPULATION_MEAN_OFFSET = 0.5
POPULATION_VARIANCE_OFFSET = 0.25


def sample_initial(n_atoms: int, rng: np.random.Generator, size: Optional[int] = None, spinor=None) -> np.ndarray:
    """
    Wigner samples of the initial state.

    Polar: psi_+-1 = (a + ib)/2, psi_0 = sqrt(N) + (a' + ib')/2.
    With ``spinor`` every mode gets the coherent amplitude sqrt(N) z_m plus
    the same half-quantum of vacuum noise.
    """
    shape = (1 if size is None else size, 3)
    noise = rng.standard_normal(shape + (2,))
    psi = 0.5 * (noise[..., 0] + 1j * noise[..., 1])
    if spinor is None:
        psi[:, 1] += math.sqrt(n_atoms)
    else:
        psi += math.sqrt(n_atoms) * np.asarray(spinor, dtype=complex)
    return psi[0] if size is None else psi


def drift(psi: np.ndarray, c2_eff: float, q: float, gamma: float = 0.0) -> np.ndarray:
    """Deterministic part of the loss-including Wigner equations; c2_eff = c2(t)/N(t)."""
    p, z, m = psi[..., 0], psi[..., 1], psi[..., 2]
    n_p = p.real ** 2 + p.imag ** 2
    n_z = z.real ** 2 + z.imag ** 2
    n_m = m.real ** 2 + m.imag ** 2
    out = np.empty_like(psi)
    out[..., 0] = -1j * c2_eff * (z * z * np.conj(m) + (n_p - n_m + n_z) * p) - 0.5 * gamma * p
    out[..., 1] = -1j * c2_eff * (2.0 * p * m * np.conj(z) + (n_p + n_m) * z) + 1j * q * z - 0.5 * gamma * z
    out[..., 2] = -1j * c2_eff * (z * z * np.conj(p) + (n_m - n_p + n_z) * m) - 0.5 * gamma * m
    return out


def rates_at(t: float, config: SimConfig) -> Tuple[float, float]:
    """(c2(t)/N(t), q(t)) including loss, c2 decay and the compensating q ramp."""
    n_t = config.n_atoms * math.exp(-config.gamma * t)
    c2_t = config.c2 * math.exp(-config.c2_decay * t)
    q_base = config.q_pre if (config.q_pre is not None and t < config.t_quench) else config.q0
    return c2_t / n_t, q_base * math.exp(-config.q_decay * t)


def wiener_increment(rng: np.random.Generator, shape: Tuple[int, ...], dt: float) -> np.ndarray:
    """Complex increment with <dxi* dxi> = dt."""
    draws = rng.standard_normal(shape + (2,))
    return (draws[..., 0] + 1j * draws[..., 1]) * math.sqrt(0.5 * dt)


def step(psi: np.ndarray, t: float, config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    dt = config.dt
    c2_eff, q = rates_at(t, config)
    slope = drift(psi, c2_eff, q, config.gamma)
    if config.gamma > 0:
        kick = math.sqrt(0.5 * config.gamma) * wiener_increment(rng, psi.shape, dt)
    else:
        kick = 0.0
    if config.integrator == "heun":
        predicted = psi + slope * dt + kick
        c2_next, q_next = rates_at(t + dt, config)
        slope = 0.5 * (slope + drift(predicted, c2_next, q_next, config.gamma))
    return psi + slope * dt + kick


@dataclass(frozen=True)
class BlockResult:
    snapshots: np.ndarray  # (n, n_times, 3)
    alive: np.ndarray


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Amplitude snapshots of every trajectory at every record time."""

    times: Tuple[float, ...]
    snapshots: np.ndarray  # (n_traj, n_times, 3)
    alive: np.ndarray
    n_aborted: int
    config: SimConfig

    @property
    def survivors(self) -> np.ndarray:
        return self.snapshots[self.alive]

    def at(self, time_index: int) -> np.ndarray:
        return self.snapshots[self.alive, time_index]


def record_steps(config: SimConfig) -> List[int]:
    return [int(round(t / config.dt)) for t in config.record_times]


def _integrate_block(config: SimConfig, block: int) -> BlockResult:
    start = block * config.block_size
    size = min(config.block_size, config.n_traj - start)
    rng = make_rng(seed_derive(config.seed, config.seed_namespace, block, config.stream))
    spinor = None
    if config.initial_state == "coherent":
        spinor = [complex(re, im) for re, im in config.initial_spinor]
    psi = sample_initial(config.n_atoms, rng, size=size, spinor=spinor)

    targets = record_steps(config)
    snapshots = np.zeros((size, len(targets), 3), dtype=complex)
    alive = np.ones(size, dtype=bool)
    current = 0
    for slot, target in enumerate(targets):
        while current < target:
            with np.errstate(over="ignore", invalid="ignore"):
                psi = step(psi, current * config.dt, config, rng)
            current += 1
            bad = ~np.isfinite(psi).all(axis=1)
            if bad.any():
                psi[bad] = 0.0
                alive &= ~bad
        snapshots[:, slot] = psi
    return BlockResult(snapshots=snapshots, alive=alive)


def _run_block(args) -> BlockResult:
    return _integrate_block(*args)


def integrate(config: SimConfig, workers: int = 1) -> TrajectoryEnsemble:
    """Integrate ``config.n_traj`` trajectories and keep snapshots at each record time."""
    n_blocks = -(-config.n_traj // config.block_size)
    logger.info(
        f"Integrating {config.n_traj} trajectories, N={config.n_atoms}, "
        f"{record_steps(config)[-1]} steps, {n_blocks} blocks on {workers} worker(s)"
    )
    started = time.perf_counter()
    jobs = [(config, block) for block in range(n_blocks)]
    if workers > 1 and n_blocks > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_blocks)) as executor:
            blocks = list(executor.map(_run_block, jobs))
    else:
        blocks = [_run_block(job) for job in jobs]

    snapshots = np.concatenate([b.snapshots for b in blocks], axis=0)
    alive = np.concatenate([b.alive for b in blocks])
    n_aborted = int((~alive).sum())
    if n_aborted:
        logger.warning(f"{n_aborted} of {config.n_traj} trajectories aborted on non-finite amplitudes")
    if n_aborted > config.abort_budget * config.n_traj:
        raise AbortBudgetExceeded(n_aborted, config.n_traj, config.abort_budget)

    ensemble = TrajectoryEnsemble(
        times=tuple(config.record_times), snapshots=snapshots, alive=alive, n_aborted=n_aborted, config=config
    )
    logger.info(f"Ensemble finished in {time.perf_counter() - started:.2f}s")
    if config.dump_path:
        dump_trajectories(ensemble, config.dump_path)
    return ensemble


def dump_trajectories(ensemble: TrajectoryEnsemble, path: str) -> None:
    n_traj, n_times, _ = ensemble.snapshots.shape
    flat = ensemble.snapshots.reshape(-1, 3)
    frame = pd.DataFrame(
        {
            "trajectory": np.repeat(np.arange(n_traj), n_times),
            "t": np.tile(np.asarray(ensemble.times), n_traj),
            "alive": np.repeat(ensemble.alive, n_times),
        }
    )
    for column, label in enumerate(("p1", "z0", "m1")):
        frame[f"{label}_re"] = flat[:, column].real
        frame[f"{label}_im"] = flat[:, column].imag
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OutputError(f"Cannot write trajectory dump to {path}: {e}")
    logger.info(f"Wrote trajectory dump to {path}")


def classical_observables(psi: np.ndarray) -> Dict[str, np.ndarray]:
    """Weyl symbols psi^dag M psi of every spin-1 bilinear, over the leading axes of ``psi``."""
    conj = np.conj(psi)
    return {
        name: np.einsum("...i,ij,...j->...", conj, matrix, psi).real
        for name, matrix in SINGLE_PARTICLE.items()
    }


@dataclass(frozen=True)
class EnsembleMoments:
    times: Tuple[float, ...]
    n_traj: int
    n_aborted: int
    means: Dict[str, np.ndarray]
    variances: Dict[str, np.ndarray]
    mean_stderr: Dict[str, np.ndarray]
    variance_stderr: Dict[str, np.ndarray]
    flags: List[str] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        columns = {"t": np.asarray(self.times)}
        for name in self.means:
            columns[f"mean_{name}"] = self.means[name]
            columns[f"var_{name}"] = self.variances[name]
            columns[f"mean_stderr_{name}"] = self.mean_stderr[name]
            columns[f"var_stderr_{name}"] = self.variance_stderr[name]
        return pd.DataFrame(columns)


def moments_from_amplitudes(
    times, psi: np.ndarray, n_aborted: int = 0, observables=MOMENT_OBSERVABLES
) -> EnsembleMoments:
    """
    Reduce (n_traj, n_times, 3) amplitudes to corrected moments.

    Populations get the symmetric-ordering corrections (mean - 1/2,
    variance - 1/4). Quadrature bilinears are reported with their raw
    ensemble variance.
    """
    n_traj = psi.shape[0]
    values = classical_observables(psi)
    means, variances, mean_err, var_err = {}, {}, {}, {}
    flags: List[str] = []
    for name in observables:
        sample = values[name]
        mean = sample.mean(axis=0)
        centered = sample - mean
        variance = (centered ** 2).mean(axis=0)
        fourth = (centered ** 4).mean(axis=0)
        mean_err[name] = np.sqrt(variance / n_traj)
        var_err[name] = np.sqrt(np.maximum(fourth - variance ** 2, 0.0) / n_traj)
        if name in POPULATIONS:
            mean = mean - POPULATION_MEAN_OFFSET
            variance = variance - POPULATION_VARIANCE_OFFSET
        if np.any(variance < 0):
            flags.append(f"negative corrected variance for {name}")
        means[name] = mean
        variances[name] = variance
    if flags:
        logger.warning("; ".join(flags))
    return EnsembleMoments(
        times=tuple(times),
        n_traj=n_traj,
        n_aborted=n_aborted,
        means=means,
        variances=variances,
        mean_stderr=mean_err,
        variance_stderr=var_err,
        flags=flags,
    )


def run_ensemble(config: SimConfig, workers: int = 1) -> EnsembleMoments:
    ensemble = integrate(config, workers=workers)
    return moments_from_amplitudes(ensemble.times, ensemble.survivors, ensemble.n_aborted)


def atom_number(psi: np.ndarray) -> float:
    """Ensemble-mean atom number with the 1/2-per-mode ordering offset removed."""
    return float(np.mean((np.abs(psi) ** 2).sum(axis=-1))) - 3 * POPULATION_MEAN_OFFSET
