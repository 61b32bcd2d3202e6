"""Dense Hermitian linear algebra used throughout the key-rate machinery.

All operators are plain ``numpy`` complex arrays.  Functions validate their
inputs and return fresh arrays; nothing here mutates its arguments.
"""

from __future__ import annotations

from functools import reduce
from typing import Sequence

import numpy as np

HERMITIAN_TOL = 1e-10
PSD_TOL = 1e-9
LOG_FLOOR = 1e-12


class ValidationError(ValueError):
    """Raised when an operator violates a structural precondition."""


class DomainError(ValueError):
    """Raised when a function is evaluated outside its mathematical domain."""


def dag(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def hermitize(m: np.ndarray) -> np.ndarray:
    """Return ``(M + M^dagger) / 2``."""
    m = np.asarray(m)
    return 0.5 * (m + dag(m))


def check_square(m) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ValidationError(f"expected a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix has non-finite entries")
    return m


def check_hermitian(m, tol: float = HERMITIAN_TOL) -> np.ndarray:
    m = check_square(m)
    dev = np.max(np.abs(m - dag(m)))
    if dev > tol:
        raise ValidationError(f"matrix is not Hermitian (max deviation {dev:.3e})")
    return m


def is_hermitian(m, tol: float = HERMITIAN_TOL) -> bool:
    try:
        check_hermitian(m, tol)
    except ValidationError:
        return False
    return True


def is_psd(m, tol: float = PSD_TOL) -> bool:
    m = check_hermitian(m, max(tol, HERMITIAN_TOL))
    return bool(np.linalg.eigvalsh(hermitize(m))[0] >= -tol)


def check_density(rho, dims: Sequence[int] | None = None, tol: float = PSD_TOL) -> np.ndarray:
    """Validate a (possibly subnormalized) density operator."""
    rho = check_hermitian(rho)
    if dims is not None and int(np.prod(dims)) != rho.shape[0]:
        raise ValidationError(f"subsystem dims {tuple(dims)} do not multiply to {rho.shape[0]}")
    evals = np.linalg.eigvalsh(hermitize(rho))
    if evals[0] < -tol:
        raise ValidationError(f"density operator has negative eigenvalue {evals[0]:.3e}")
    tr = float(np.real(np.trace(rho)))
    if tr < -tol or tr > 1 + tol:
        raise ValidationError(f"density operator trace {tr} outside [0, 1]")
    return rho


def eig_hermitian(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix.

    Returns
    -------
    evals : ndarray
        Real eigenvalues in descending order.
    evecs : ndarray
        Unitary matrix whose columns are the matching eigenvectors.
    """
    m = check_hermitian(m)
    w, v = np.linalg.eigh(hermitize(m))
    return w[::-1].copy(), v[:, ::-1].copy()


def _eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # unchecked variant for inner loops
    return np.linalg.eigh(hermitize(m))


def apply_spectral(m: np.ndarray, fn) -> np.ndarray:
    w, v = _eigh(m)
    return hermitize((v * fn(w)) @ dag(v))


def matrix_log(m, floor: float = LOG_FLOOR) -> np.ndarray:
    """Base-2 matrix logarithm of a PSD operator.

    Eigenvalues below ``floor`` are raised to ``floor`` before the log is
    taken, so singular inputs give a finite (large negative) result on their
    kernel.
    """
    if floor <= 0:
        raise DomainError("floor must be positive")
    m = check_hermitian(m)
    w, v = _eigh(m)
    if w[0] < -PSD_TOL:
        raise DomainError(f"matrix_log of operator with eigenvalue {w[0]:.3e}")
    return hermitize((v * np.log2(np.maximum(w, floor))) @ dag(v))


def tensor(*ops) -> np.ndarray:
    """Kronecker product of one or more matrices (or vectors)."""
    if not ops:
        raise ValidationError("tensor needs at least one operand")
    return reduce(np.kron, [np.asarray(o) for o in ops])


def partial_trace(rho, dims: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Trace out every subsystem not listed in ``keep``.

    ``dims`` lists the subsystem dimensions in tensor order; ``keep`` holds
    the indices of the subsystems that survive (returned in ascending order).
    """
    rho = check_square(rho)
    dims = [int(d) for d in dims]
    if any(d <= 0 for d in dims) or int(np.prod(dims)) != rho.shape[0]:
        raise ValidationError(f"dims {dims} incompatible with matrix of size {rho.shape[0]}")
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise ValidationError("keep must be non-empty")
    if keep[0] < 0 or keep[-1] >= len(dims):
        raise ValidationError(f"subsystem index out of range for {len(dims)} subsystems")
    n = len(dims)
    t = rho.reshape(dims + dims)
    traced = [i for i in range(n) if i not in keep]
    # trace the highest index first so earlier axis numbers stay valid
    for count, i in enumerate(sorted(traced, reverse=True)):
        remaining = n - count
        t = np.trace(t, axis1=i, axis2=i + remaining)
    d = int(np.prod([dims[k] for k in keep]))
    return t.reshape(d, d)


def entropy_terms(sigma: np.ndarray, floor: float = LOG_FLOOR) -> float:
    """``Tr(sigma log2 sigma)`` with clamped eigenvalues (zero eigenvalues contribute 0)."""
    w = np.linalg.eigvalsh(hermitize(sigma))
    w = np.where(w < floor, 0.0, w)
    nz = w > 0
    return float(np.sum(w[nz] * np.log2(w[nz])))


def rel_entropy(rho, sigma, floor: float = LOG_FLOOR) -> float:
    """Quantum relative entropy ``D(rho || sigma)`` in bits.

    Computed as ``Tr(rho log2 rho) - Tr(rho log2 sigma)`` with both logs
    clamped at ``floor``.
    """
    rho = check_hermitian(rho)
    sigma = check_hermitian(sigma)
    if rho.shape != sigma.shape:
        raise ValidationError(f"dimension mismatch {rho.shape} vs {sigma.shape}")
    first = entropy_terms(rho, floor)
    second = float(np.real(np.trace(rho @ matrix_log(sigma, floor))))
    return first - second


def basis_ket(index: int, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return v


def projector(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=complex).reshape(-1)
    return np.outer(vec, np.conj(vec))


def hermitian_basis(dim: int) -> list[np.ndarray]:
    """Orthonormal Hermitian basis of ``dim x dim`` matrices.

    Order: diagonal units ``|i><i|``, then for each ``i < j`` the pair
    ``(|i><j| + |j><i|)/sqrt2`` and ``i(|i><j| - |j><i|)/sqrt2``.
    """
    basis = []
    for i in range(dim):
        m = np.zeros((dim, dim), dtype=complex)
        m[i, i] = 1.0
        basis.append(m)
    s = 1.0 / np.sqrt(2.0)
    for i in range(dim):
        for j in range(i + 1, dim):
            re = np.zeros((dim, dim), dtype=complex)
            re[i, j] = re[j, i] = s
            im = np.zeros((dim, dim), dtype=complex)
            im[i, j] = 1j * s
            im[j, i] = -1j * s
            basis.append(re)
            basis.append(im)
    return basis


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return hermitize(a)


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ dag(g)
    return hermitize(rho / np.real(np.trace(rho)))
