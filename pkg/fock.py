"""
Exact Fock-space representation of a single-mode spin-1 condensate.

The basis at fixed atom number N enumerates occupation triples
(n_+1, n_0, n_-1) with n_+1 descending first and n_0 descending second, so
for N=1 the order is (1,0,0), (0,1,0), (0,0,1). The closed-form position of a
triple is r(r+1)/2 + (r - n_0) with r = N - n_+1.

Operators are second-quantized bilinears sum_{m,m'} M[m,m'] a_m^dag a_m'
built from the 3x3 single-particle matrices in ``SINGLE_PARTICLE`` (basis
order m = +1, 0, -1), plus the quartic spin-mixing Hamiltonian.

Exact evolution: when the generator conserves L_z (the spin-mixing
Hamiltonian does) the state is propagated sector by sector with dense
exponentials of the magnetization blocks. Otherwise a dense exponential is
used up to ``DENSE_THRESHOLD`` basis states and
``scipy.sparse.linalg.expm_multiply`` above it.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Tuple

import numpy as np
import scipy.linalg as linalg
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply
from scipy.special import gammaln

from errors import ConfigError, NumericalError, UsageError

logger = logging.getLogger(__name__)

MAX_ATOMS = 250
DENSE_THRESHOLD = 2000
NORM_TOLERANCE = 1e-10
HERMITIAN_TOLERANCE = 1e-12
VARIANCE_FLOOR = -1e-9

_S = 1.0 / np.sqrt(2.0)

# Single-particle matrices in the basis (m=+1, m=0, m=-1); entry [m, m'] multiplies a_m^dag a_m'.
SINGLE_PARTICLE: Dict[str, np.ndarray] = {
    "Lx": _S * np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex),
    "Ly": _S * np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex),
    "Lz": np.diag([1.0, 0.0, -1.0]).astype(complex),
    "Qyz": _S * np.array([[0, -1j, 0], [1j, 0, 1j], [0, -1j, 0]], dtype=complex),
    "Qxz": _S * np.array([[0, 1, 0], [1, 0, -1], [0, -1, 0]], dtype=complex),
    "Qxx": np.array([[-1 / 3, 0, 1], [0, 2 / 3, 0], [1, 0, -1 / 3]], dtype=complex),
    "Qyy": np.array([[-1 / 3, 0, -1], [0, 2 / 3, 0], [-1, 0, -1 / 3]], dtype=complex),
    "Qzz": np.diag([2 / 3, -4 / 3, 2 / 3]).astype(complex),
    "N+1": np.diag([1.0, 0.0, 0.0]).astype(complex),
    "N0": np.diag([0.0, 1.0, 0.0]).astype(complex),
    "N-1": np.diag([0.0, 0.0, 1.0]).astype(complex),
}
OPERATOR_TAGS = tuple(SINGLE_PARTICLE)


@dataclass(frozen=True, eq=False)
class FockBasis:
    n_atoms: int
    states: np.ndarray  # (dim, 3) occupations (n_+1, n_0, n_-1)
    index: Dict[Tuple[int, int, int], int] = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.states)

    def index_of(self, occupations: np.ndarray) -> np.ndarray:
        """Vectorized position of occupation rows; inverse of the enumeration."""
        occupations = np.asarray(occupations)
        r = self.n_atoms - occupations[..., 0]
        return r * (r + 1) // 2 + (r - occupations[..., 1])

    @property
    def magnetization(self) -> np.ndarray:
        return self.states[:, 0] - self.states[:, 2]


@dataclass(frozen=True, eq=False)
class FockState:
    basis: FockBasis
    coeffs: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


@dataclass(frozen=True, eq=False)
class SparseOperator:
    basis: FockBasis
    matrix: sp.csr_matrix
    hermitian: bool
    name: str = ""
    conserves_lz: bool = False

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        return self.matrix @ coeffs


def _enumerate(n_atoms: int) -> FockBasis:
    rows = [
        (n_plus, n_zero, n_atoms - n_plus - n_zero)
        for n_plus in range(n_atoms, -1, -1)
        for n_zero in range(n_atoms - n_plus, -1, -1)
    ]
    states = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return FockBasis(n_atoms=n_atoms, states=states, index={row: i for i, row in enumerate(rows)})


@lru_cache(maxsize=32)
def build_basis(n_atoms: int, allow_vacuum: bool = False) -> FockBasis:
    lower = 0 if allow_vacuum else 1
    if not isinstance(n_atoms, (int, np.integer)) or not lower <= n_atoms <= MAX_ATOMS:
        raise ConfigError(f"Atom number must be an integer in [{lower}, {MAX_ATOMS}], got {n_atoms}")
    return _enumerate(int(n_atoms))


def _bilinear(basis: FockBasis, single: np.ndarray) -> sp.csr_matrix:
    occ = basis.states
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    for m in range(3):
        for mp in range(3):
            coef = single[m, mp]
            if coef == 0:
                continue
            if m == mp:
                source = np.arange(basis.dim)
                rows.append(source)
                cols.append(source)
                vals.append(coef * occ[:, m])
                continue
            source = np.nonzero(occ[:, mp] > 0)[0]
            new = occ[source].copy()
            amplitude = np.sqrt(new[:, mp].astype(float))
            new[:, mp] -= 1
            amplitude = amplitude * np.sqrt(new[:, m] + 1.0)
            new[:, m] += 1
            rows.append(basis.index_of(new))
            cols.append(source)
            vals.append(coef * amplitude)
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(basis.dim, basis.dim),
        dtype=complex,
    )
    return matrix.tocsr()


@lru_cache(maxsize=256)
def _cached_bilinear(name: str, n_atoms: int, allow_vacuum: bool) -> sp.csr_matrix:
    return _bilinear(build_basis(n_atoms, allow_vacuum), SINGLE_PARTICLE[name])


def is_hermitian(matrix: sp.spmatrix, tol: float = HERMITIAN_TOLERANCE) -> bool:
    difference = matrix - matrix.getH()
    if difference.nnz == 0:
        return True
    return float(np.max(np.abs(difference.data))) <= tol


def operator_matrix(name: str, basis: FockBasis) -> SparseOperator:
    if name not in SINGLE_PARTICLE:
        raise UsageError(f"Unknown operator tag {name!r}; expected one of {OPERATOR_TAGS}")
    matrix = _cached_bilinear(name, basis.n_atoms, basis.n_atoms == 0)
    return SparseOperator(
        basis=basis,
        matrix=matrix,
        hermitian=True,
        name=name,
        conserves_lz=name not in ("Lx", "Ly", "Qyz", "Qxz", "Qxx", "Qyy"),
    )


def hamiltonian(basis: FockBasis, c2: float, q: float) -> SparseOperator:
    """Single-mode spin-mixing Hamiltonian with quadratic Zeeman shift q."""
    if not (np.isfinite(c2) and np.isfinite(q)):
        raise ConfigError("c2 and q must be finite")
    n_atoms = max(basis.n_atoms, 1)
    occ = basis.states.astype(float)
    n_plus, n_zero, n_minus = occ[:, 0], occ[:, 1], occ[:, 2]
    prefactor = c2 / (2.0 * n_atoms)
    diagonal = prefactor * ((n_plus - n_minus) ** 2 + (2.0 * n_zero - 1.0) * (n_plus + n_minus)) - q * n_zero

    # a_+1^dag a_-1^dag a_0 a_0
    source = np.nonzero(basis.states[:, 1] >= 2)[0]
    new = basis.states[source].copy()
    amplitude = np.sqrt(n_zero[source] * (n_zero[source] - 1.0) * (n_plus[source] + 1.0) * (n_minus[source] + 1.0))
    new[:, 1] -= 2
    new[:, 0] += 1
    new[:, 2] += 1
    target = basis.index_of(new)
    pair = sp.coo_matrix(
        (2.0 * prefactor * amplitude, (target, source)), shape=(basis.dim, basis.dim), dtype=complex
    ).tocsr()
    matrix = (sp.diags(diagonal.astype(complex)) + pair + pair.getH()).tocsr()
    return SparseOperator(basis=basis, matrix=matrix, hermitian=True, name="H", conserves_lz=True)


def _check_norm(before: float, after: np.ndarray, what: str) -> None:
    drift = abs(float(np.linalg.norm(after)) - before)
    if not np.isfinite(drift) or drift > NORM_TOLERANCE:
        raise NumericalError(f"{what} lost unitarity", {"norm_before": before, "norm_drift": drift})


def _exponential_action(matrix: sp.csr_matrix, coeffs: np.ndarray, scale: complex) -> np.ndarray:
    if matrix.shape[0] <= DENSE_THRESHOLD:
        return linalg.expm(scale * matrix.toarray()) @ coeffs
    return expm_multiply(scale * matrix, coeffs)


def evolve_exact(state: FockState, H: SparseOperator, t: float) -> FockState:
    """exp(-i H t)|psi>, block by magnetization sector when H conserves L_z."""
    if not H.hermitian:
        raise UsageError("evolve_exact needs a hermitian generator")
    coeffs = np.asarray(state.coeffs, dtype=complex)
    if t == 0:
        return FockState(state.basis, coeffs.copy())
    before = float(np.linalg.norm(coeffs))
    if H.conserves_lz:
        out = np.zeros_like(coeffs)
        magnetization = state.basis.magnetization
        for sector in np.unique(magnetization[np.abs(coeffs) > 0]):
            members = np.nonzero(magnetization == sector)[0]
            block = H.matrix[members][:, members].toarray()
            out[members] = linalg.expm(-1j * t * block) @ coeffs[members]
        logger.debug(f"Sector-wise exact evolution over dim {state.basis.dim}")
    else:
        out = _exponential_action(H.matrix, coeffs, -1j * t)
    _check_norm(before, out, "evolve_exact")
    return FockState(state.basis, out)


def rotate_exact(state: FockState, phi1: float, phi2: float) -> FockState:
    """Apply exp(-i(phi1 L_x + phi2 L_y))."""
    coeffs = np.asarray(state.coeffs, dtype=complex)
    if phi1 == 0 and phi2 == 0:
        return FockState(state.basis, coeffs.copy())
    generator = phi1 * operator_matrix("Lx", state.basis).matrix + phi2 * operator_matrix("Ly", state.basis).matrix
    out = _exponential_action(generator.tocsr(), coeffs, -1j)
    _check_norm(float(np.linalg.norm(coeffs)), out, "rotate_exact")
    return FockState(state.basis, out)


def spinor_rotate_exact(state: FockState, theta_s: float) -> FockState:
    """Apply exp(-i theta_s N_0): psi_0 -> psi_0 exp(-i theta_s) at mean-field level."""
    phases = np.exp(-1j * theta_s * state.basis.states[:, 1])
    return FockState(state.basis, phases * state.coeffs)


def moments_exact(state: FockState, op: SparseOperator) -> Tuple[float, float]:
    if not op.hermitian:
        raise UsageError("moments_exact needs a hermitian operator")
    applied = op.apply(state.coeffs)
    mean = float(np.vdot(state.coeffs, applied).real)
    variance = float(np.vdot(applied, applied).real) - mean ** 2
    if variance < 0:
        if variance < VARIANCE_FLOOR:
            raise NumericalError("negative variance beyond round-off", {"variance": variance, "operator": op.name})
        variance = 0.0
    return mean, variance


def qfi_diagonal(state: FockState) -> Tuple[float, float]:
    """Small-angle quantum Fisher information diagonal (4 Var L_x, 4 Var L_y) of a pure state."""
    if state.basis.n_atoms == 0:
        return 0.0, 0.0
    _, var_x = moments_exact(state, operator_matrix("Lx", state.basis))
    _, var_y = moments_exact(state, operator_matrix("Ly", state.basis))
    return 4.0 * var_x, 4.0 * var_y


def polar_state(basis: FockBasis) -> FockState:
    coeffs = np.zeros(basis.dim, dtype=complex)
    coeffs[basis.index[(0, basis.n_atoms, 0)]] = 1.0
    return FockState(basis, coeffs)


def coherent_state(basis: FockBasis, spinor) -> FockState:
    """Every atom in the single-particle spinor (z_+1, z_0, z_-1)."""
    spinor = np.asarray(spinor, dtype=complex)
    spinor = spinor / np.linalg.norm(spinor)
    occ = basis.states
    log_weight = gammaln(basis.n_atoms + 1) - gammaln(occ + 1).sum(axis=1)
    coeffs = np.exp(0.5 * log_weight).astype(complex)
    for m in range(3):
        with np.errstate(divide="ignore", invalid="ignore"):
            coeffs *= np.where(occ[:, m] > 0, spinor[m] ** occ[:, m], 1.0)
    return FockState(basis, coeffs / np.linalg.norm(coeffs))


def commutator(a: SparseOperator, b: SparseOperator) -> sp.csr_matrix:
    return (a.matrix @ b.matrix - b.matrix @ a.matrix).tocsr()
