"""Trojan-horse leakage model for phase-encoded sources.

Eve's back-reflected pulse is a coherent state whose phase copies the
encoding phase.  In source-replacement form the leak only enters through the
Gram matrix of the joint (signal x leak) states, which fixes the reduced
state of the sender's register.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hermitian import ValidationError, hermitian_basis, hermitize, tensor
from .protocols import STATE_LABELS, ProtocolSpec, signal_kets


def coherent_overlap(alpha: complex, beta: complex) -> complex:
    """Inner product ``<beta|alpha>`` of two coherent states."""
    alpha = complex(alpha)
    beta = complex(beta)
    return complex(np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * abs(beta) ** 2 + np.conj(beta) * alpha))


@dataclass(frozen=True)
class SourceEnsemble:
    labels: tuple[str, ...]
    probabilities: np.ndarray
    signal_kets: tuple[np.ndarray, ...]
    leak_amplitudes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if abs(p.sum() - 1.0) > 1e-12 or np.any(p < 0):
            raise ValidationError("ensemble probabilities must be non-negative and sum to 1")
        for k in self.signal_kets:
            if abs(np.linalg.norm(k) - 1.0) > 1e-12:
                raise ValidationError("signal kets must be normalized")


def build_ensemble_bb84(p_z: float, mu_out: float) -> SourceEnsemble:
    """The four phase-encoded states with their Trojan-horse reflections.

    Leak amplitudes are ``+sqrt(mu)``, ``-sqrt(mu)``, ``+i sqrt(mu)`` and
    ``-i sqrt(mu)`` for ``z+, z-, x+, x-``.
    """
    if not 0.0 < p_z < 1.0:
        raise ValidationError(f"p_Z must lie in (0, 1), got {p_z}")
    if mu_out < 0:
        raise ValidationError("mu_out must be non-negative")
    p_x = 1.0 - p_z
    s = np.sqrt(mu_out)
    return SourceEnsemble(
        labels=STATE_LABELS,
        probabilities=np.array([p_z / 2, p_z / 2, p_x / 2, p_x / 2]),
        signal_kets=tuple(signal_kets()),
        leak_amplitudes=np.array([s, -s, 1j * s, -1j * s]),
    )


def reduced_register_state(ens: SourceEnsemble) -> np.ndarray:
    """Sender register state ``rho_A`` with ``(rho_A)_ij = sqrt(p_i p_j) <psi_j|psi_i>``."""
    p = np.asarray(ens.probabilities, dtype=float)
    n = len(p)
    rho = np.empty((n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            sig = np.vdot(ens.signal_kets[j], ens.signal_kets[i])
            leak = coherent_overlap(ens.leak_amplitudes[i], ens.leak_amplitudes[j])
            rho[i, j] = np.sqrt(p[i] * p[j]) * sig * leak
    return hermitize(rho)


def register_state(spec: ProtocolSpec, mu_out_a: float, mu_out_b: float | None = None) -> np.ndarray:
    """Register state fixed by tomography: ``rho_A`` (BB84) or ``rho_A x rho_B`` (MDI)."""
    rho_a = reduced_register_state(build_ensemble_bb84(spec.p_z, mu_out_a))
    if spec.name == "BB84":
        return rho_a
    mu_b = mu_out_a if mu_out_b is None else mu_out_b
    rho_b = reduced_register_state(build_ensemble_bb84(spec.p_z, mu_b))
    return tensor(rho_a, rho_b)


def tomography_constraint_values(reg: np.ndarray, spec: ProtocolSpec) -> list[tuple[int, float]]:
    """``theta_j = Tr(Theta_j rho_reg)`` for each Hermitian tomography observable."""
    reg = np.asarray(reg, dtype=complex)
    d = spec.register_dim
    if reg.shape != (d, d):
        raise ValidationError(f"register state must be {d}x{d}, got {reg.shape}")
    return [(j, float(np.real(np.trace(t @ reg)))) for j, t in enumerate(hermitian_basis(d))]


def delta_bloch(mu_out: float) -> float:
    """Leak-induced deviation ``(1 - exp(-mu) cos(mu)) / 2``."""
    if mu_out < 0:
        raise ValidationError("mu_out must be non-negative")
    return 0.5 * (1.0 - np.exp(-mu_out) * np.cos(mu_out))


def delta_bloch_mdi(mu_out_a: float, mu_out_b: float) -> float:
    """Two-party deviation, with the cosine squared after halving the summed intensity."""
    if mu_out_a < 0 or mu_out_b < 0:
        raise ValidationError("mu_out must be non-negative")
    total = mu_out_a + mu_out_b
    return 0.5 * (1.0 - np.exp(-total) * np.cos(0.5 * total) ** 2)


def register_kernel(reg: np.ndarray, tol: float = 1e-14) -> np.ndarray | None:
    """Projector onto the numerically exact kernel of the register state, or ``None``.

    Every compatible joint state vanishes on ``kernel x (rest)``; stating that
    as an explicit zero-valued constraint lets the solver work on the face.
    """
    w, v = np.linalg.eigh(hermitize(np.asarray(reg, dtype=complex)))
    ker = v[:, w <= tol * max(float(w[-1]), 1.0)]
    if ker.shape[1] == 0:
        return None
    return hermitize(ker @ ker.conj().T)


def register_preconditioner(
    reg: np.ndarray, rest_dim: int, tol: float = 1e-14, floor: float = 1e-6
) -> np.ndarray:
    """Congruence ``T = sqrt(r * rho_reg) x I`` (identity on the kernel).

    Under ``rho = T omega T^dagger`` the register marginal of ``omega`` is
    close to maximally mixed on the support, which keeps the semidefinite
    subproblems well conditioned when the register state has tiny
    eigenvalues.  Eigenvalues are floored at ``floor * lambda_max`` so the
    congruence itself stays well conditioned.
    """
    w, v = np.linalg.eigh(hermitize(np.asarray(reg, dtype=complex)))
    top = max(float(w[-1]), 1e-300)
    support = w > tol * max(top, 1.0)
    r = int(np.sum(support))
    scale = np.where(support, np.sqrt(r * np.maximum(w, floor * top)), 1.0)
    t_reg = (v * scale) @ v.conj().T
    return np.kron(t_reg, np.eye(rest_dim))
