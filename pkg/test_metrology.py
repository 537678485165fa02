import math

import numpy as np
import pytest

import metrology
from errors import ConfigError, DomainError, FitError, SensitivityError, StatisticsError
from measurement import MeasurementBatch
from schemas import NoiseConfig, PhasePoint, SimConfig
from seeding import make_rng, seed_derive
from twa import classical_observables, integrate, sample_initial


N_ATOMS = 1000
MEAN_FIELD_POLAR = np.array([0.0, math.sqrt(N_ATOMS), 0.0], dtype=complex)


def rng(index=0):
    return make_rng(seed_derive(21, "engine", index))


def test_encode_identity_and_unitarity():
    psi = sample_initial(N_ATOMS, rng(), size=50)
    assert np.array_equal(metrology.encode_phases(psi, PhasePoint()), psi)
    encoded = metrology.encode_phases(psi, PhasePoint(phi1=0.3, phi2=-0.2))
    assert np.allclose(np.linalg.norm(encoded, axis=1), np.linalg.norm(psi, axis=1))


def test_encode_small_angle_response():
    phi = 1e-3
    obs = classical_observables(metrology.encode_phases(MEAN_FIELD_POLAR, PhasePoint(phi1=phi)))
    assert obs["Qyz"] == pytest.approx(2 * N_ATOMS * phi, rel=1e-3)
    assert obs["Qxz"] == pytest.approx(0.0, abs=1e-9)
    obs = classical_observables(metrology.encode_phases(MEAN_FIELD_POLAR, PhasePoint(phi2=phi)))
    assert obs["Qxz"] == pytest.approx(-2 * N_ATOMS * phi, rel=1e-3)


def test_encode_rejects_rotation_beyond_pi():
    with pytest.raises(ConfigError):
        metrology.encode_phases(MEAN_FIELD_POLAR, PhasePoint.from_polar(3.5, 0.2))


def test_phase_point_polar_coordinates():
    p = PhasePoint.from_polar(0.2, 0.25 * math.pi)
    assert p.alpha == pytest.approx(0.2)
    assert p.theta == pytest.approx(0.25 * math.pi)
    assert PhasePoint().theta == 0.0


def test_spinor_phase_rotation_only_touches_zero_mode():
    psi = sample_initial(N_ATOMS, rng(), size=10)
    out = metrology.spinor_phase_rotation(psi, 0.4)
    assert np.array_equal(out[:, 0], psi[:, 0])
    assert np.array_equal(out[:, 2], psi[:, 2])
    assert np.allclose(out[:, 1], psi[:, 1] * np.exp(-0.4j))


def test_optimal_alignment_minimizes_summed_variance():
    generator = rng(3)
    n = 4000
    psi = np.zeros((n, 3), dtype=complex)
    psi[:, 1] = math.sqrt(N_ATOMS)
    # correlated quadrature noise with a squeezed direction away from the axes
    a_s = np.exp(0.6j) * (0.1 * generator.standard_normal(n) + 1j * 1.5 * generator.standard_normal(n))
    a_a = np.exp(-0.6j) * (1.5 * generator.standard_normal(n) + 1j * 0.1 * generator.standard_normal(n))
    psi[:, 0] = (a_s + a_a) / math.sqrt(2.0)
    psi[:, 2] = (a_s - a_a) / math.sqrt(2.0)

    def spread(theta):
        obs = classical_observables(metrology.spinor_phase_rotation(psi, theta))
        return obs["Qyz"].var() + obs["Qxz"].var()

    best = metrology.optimal_alignment_angle(psi)
    assert -0.5 * math.pi < best <= 0.5 * math.pi
    grid = np.linspace(-0.5 * math.pi, 0.5 * math.pi, 721)
    assert spread(best) <= min(spread(t) for t in grid) * (1 + 1e-6)


def test_quench_schedule():
    config = SimConfig(n_atoms=100, c2=-20.0, q0=5.0, record_times=(0.01, 0.02))
    held = metrology.quench_schedule(config, 0.005)
    assert held.q_pre == pytest.approx(13 * 20.0)
    assert held.q0 == pytest.approx(20.0)
    assert held.t_quench == 0.005
    assert held.record_times == pytest.approx((0.015, 0.025))
    assert held.t_end == pytest.approx(0.025)
    direct = metrology.quench_schedule(config, 0.0, post_factor=2.0, ramp=False)
    assert direct.q_pre is None
    assert direct.q0 == pytest.approx(40.0)
    assert direct.q_ramp is False
    with pytest.raises(ConfigError):
        metrology.quench_schedule(config, -1.0)


def linear_shots(sweep, slope, spread, shots=40, offset=0.0):
    """Shots whose sample mean is exactly slope*x + offset and whose sample std is exactly ``spread``."""
    z = rng(7).standard_normal(shots)
    z = (z - z.mean()) / z.std(ddof=1)
    return np.array([offset + slope * x + spread * z for x in sweep])


def test_fit_and_sensitivity_of_linear_response():
    sweep = np.linspace(-0.1, 0.1, 11)
    fit_yz = metrology.fit_channel(sweep, linear_shots(sweep, 2 * N_ATOMS, 20.0), "phi1")
    fit_xz = metrology.fit_channel(sweep, linear_shots(sweep, -2 * N_ATOMS, 30.0), "phi2")
    assert fit_yz.derivative(0.03) == pytest.approx(2 * N_ATOMS, rel=1e-9)
    assert fit_yz.std(0.03) == pytest.approx(20.0, rel=1e-9)
    d1, d2 = metrology.sensitivity(metrology.ResponseFit({"Qyz": fit_yz, "Qxz": fit_xz}), PhasePoint(phi1=0.03, phi2=-0.05))
    assert d1 == pytest.approx(20.0 / (2 * N_ATOMS))
    assert d2 == pytest.approx(30.0 / (2 * N_ATOMS))


def test_ray_fit_projects_slope():
    theta = 0.25 * math.pi
    sweep = np.linspace(-0.1, 0.1, 9)
    # along the ray <Q_yz> = 2N phi1 = 2N alpha cos(theta)
    fit = metrology.fit_response(
        sweep,
        {"Qyz": linear_shots(sweep, 2 * N_ATOMS * math.cos(theta), 20.0),
         "Qxz": linear_shots(sweep, -2 * N_ATOMS * math.sin(theta), 20.0)},
        "alpha",
        theta,
    )
    d1, d2 = metrology.sensitivity(fit, PhasePoint.from_polar(0.05, theta))
    assert d1 == pytest.approx(20.0 / (2 * N_ATOMS))
    assert d2 == pytest.approx(20.0 / (2 * N_ATOMS))


def test_fit_errors():
    sweep = np.linspace(-0.1, 0.1, 5)
    with pytest.raises(FitError):
        metrology.fit_channel(sweep, linear_shots(sweep, 1.0, 1.0))
    sweep = np.linspace(-0.1, 0.1, 8)
    with pytest.raises(FitError):
        metrology.fit_channel(sweep, linear_shots(sweep, 1.0, 1.0)[:, :1])
    with pytest.raises(FitError):
        metrology.fit_channel(sweep, np.ones((8, 10)))


def test_sensitivity_errors():
    sweep = np.linspace(-0.1, 0.1, 8)
    flat = metrology.fit_channel(sweep, linear_shots(sweep, 0.0, 1.0), "phi1")
    steep = metrology.fit_channel(sweep, linear_shots(sweep, 100.0, 1.0), "phi2")
    with pytest.raises(SensitivityError):
        metrology.sensitivity(metrology.ResponseFit({"Qyz": flat, "Qxz": steep}), PhasePoint())
    with pytest.raises(SensitivityError):
        metrology.sensitivity(metrology.ResponseFit({"Qyz": steep, "Qxz": steep}), PhasePoint())
    wide = metrology.fit_channel(sweep, linear_shots(sweep, 100.0, 1.0), "phi1")
    with pytest.raises(SensitivityError):
        metrology.sensitivity(metrology.ResponseFit({"Qyz": wide, "Qxz": steep}), PhasePoint(phi1=0.5))


def test_sql_values():
    assert metrology.sql(100) == pytest.approx(0.05)
    assert metrology.sql(100, "joint") == pytest.approx(1 / math.sqrt(200))
    with pytest.raises(DomainError):
        metrology.sql(0.5)
    with pytest.raises(ConfigError):
        metrology.sql(100, "heisenberg")


def test_gain_references():
    sql = metrology.sql(N_ATOMS)
    assert metrology.gain(sql, sql, N_ATOMS) == pytest.approx(0.0, abs=1e-12)
    assert metrology.gain(sql / 2, sql / 2, N_ATOMS) == pytest.approx(20 * math.log10(2))
    assert metrology.gain(sql, sql, N_ATOMS, "split") == pytest.approx(10 * math.log10(2))
    with pytest.raises(DomainError):
        metrology.gain(0.0, sql, N_ATOMS)
    with pytest.raises(ConfigError):
        metrology.gain(sql, sql, N_ATOMS, "other")


def test_polar_gain_estimate():
    assert metrology.polar_gain_estimate(N_ATOMS, N_ATOMS, N_ATOMS) == pytest.approx(0.0)
    assert metrology.polar_gain_estimate(2 * N_ATOMS, 2 * N_ATOMS, N_ATOMS) == pytest.approx(-10 * math.log10(2))


def test_scatter_summary():
    batch = MeasurementBatch(qyz=np.array([100.0, 300.0]), qxz=np.array([-50.0, -50.0]))
    (center_yz, center_xz), radius = metrology.scatter_summary(batch, 100.0)
    assert (center_yz, center_xz) == pytest.approx((2.0, -0.5))
    assert radius == pytest.approx(math.sqrt(3.0) * 100.0 / 100.0)
    with pytest.raises(StatisticsError):
        metrology.scatter_summary(MeasurementBatch(qyz=np.array([1.0]), qxz=np.array([1.0])), 100.0)


def test_undepleted_squeezing_law():
    c2 = -2 * math.pi * 3.8
    assert metrology.undepleted_squeezing_db(c2, 0.0) == 0.0
    assert metrology.undepleted_squeezing_db(c2, 0.01) == pytest.approx(-8.686 * abs(c2) * 0.01, rel=1e-3)


def test_engine_follows_undepleted_law_at_10_ms():
    c2 = -2 * math.pi * 3.8
    expected = float(metrology.undepleted_squeezing_db(c2, 0.01))
    assert expected == pytest.approx(-2.07, abs=0.01)
    config = SimConfig(n_atoms=26000, c2=c2, q0=abs(c2), gamma=0.0, n_traj=4000, block_size=1000, record_times=(0.01,), seed=5)
    psi = metrology.spinor_phase_rotation(integrate(config).at(0), metrology.ALIGNMENT_ANGLE)
    observables = classical_observables(psi)
    for name in ("Qyz", "Qxz"):
        xi2 = 10 * math.log10(observables[name].var() / 26000)
        assert xi2 == pytest.approx(expected, abs=0.35)


def test_aligned_state_squeezes_both_channels():
    c2 = -2 * math.pi * 3.8
    config = SimConfig(n_atoms=N_ATOMS, c2=c2, q0=abs(c2), gamma=0.0, n_traj=2000, block_size=500, record_times=(0.02,), seed=4)
    psi = integrate(config).at(0)
    fixed = classical_observables(metrology.spinor_phase_rotation(psi, metrology.ALIGNMENT_ANGLE))
    for name in ("Qyz", "Qxz"):
        xi2 = 10 * math.log10(fixed[name].var() / N_ATOMS)
        # undepleted law gives about -4 dB at 20 ms
        assert -5.5 < xi2 < -2.5
    best = metrology.optimal_alignment_angle(psi)
    assert best == pytest.approx(metrology.ALIGNMENT_ANGLE, abs=0.15)


def test_best_squeezing_time():
    scan = [(0.01, -2.0, -2.5), (0.02, -4.0, -3.8), (0.03, -3.0, -3.5)]
    assert metrology.best_squeezing_time(scan) == 0.02


def test_noisy_squeezing_scan_runs_after_quench():
    config = SimConfig(n_atoms=N_ATOMS, gamma=0.0, n_traj=400, block_size=200, record_times=(0.0, 0.02), seed=9)
    scan = metrology.noisy_squeezing_scan(metrology.quench_schedule(config, 0.005), NoiseConfig())
    assert [t for t, _, _ in scan] == pytest.approx([0.0, 0.02])
    assert scan[1][1] < scan[0][1] - 1.0
