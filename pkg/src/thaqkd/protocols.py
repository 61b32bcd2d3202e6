"""Operator content of the BB84 and MDI protocols in source-replacement form.

Register conventions
--------------------
Alice's (and, for MDI, Bob's) register index ``i`` labels the prepared state:
``0 = z+``, ``1 = z-``, ``2 = x+``, ``3 = x-``.

BB84 receiver space is a qubit plus vacuum (dim 3).  Index 0 is the vacuum,
indices 1 and 2 carry the qubit written in the ``{z+, z-}`` basis, so an
identity channel maps Alice's signal states onto Bob's POVM eigenstates.

The MDI relay register C is classical: ``0 = Psi-``, ``1 = Psi+``,
``2 = failure``.  Joint states are block diagonal in C.

Kraus operators map ``rho`` to ``key (2) x rho-space x basis flag (2)`` as in
the announcement/sifting model; the key maps pinch the leading key register.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hermitian import (
    LOG_FLOOR,
    ValidationError,
    basis_ket,
    check_hermitian,
    dag,
    hermitian_basis,
    hermitize,
    projector,
    rel_entropy,
    tensor,
)

STATE_LABELS = ("z+", "z-", "x+", "x-")
BB84_OUTCOMES = ("H", "V", "+", "-", "null")
MDI_OUTCOMES = ("psi-", "psi+", "null")

_S2 = 1.0 / np.sqrt(2.0)


def signal_kets() -> list[np.ndarray]:
    """The four single-photon signal kets in the ``{|1>_L|0>_M, |0>_L|1>_M}`` basis."""
    return [
        np.array([_S2, _S2], dtype=complex),
        np.array([_S2, -_S2], dtype=complex),
        np.array([_S2, 1j * _S2], dtype=complex),
        np.array([_S2, -1j * _S2], dtype=complex),
    ]


def receiver_qubit_kets() -> list[np.ndarray]:
    """Signal kets expressed in the ``{z+, z-}`` basis (Bob's qubit frame)."""
    kets = signal_kets()
    frame = np.column_stack(kets[:2])
    return [dag(frame) @ k for k in kets]


def _check_pz(p_z: float) -> None:
    if not 0.0 < p_z < 1.0:
        raise ValidationError(f"p_Z must lie in (0, 1), got {p_z}")


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    p_z: float
    dims: tuple[int, ...]
    povms_a: tuple[np.ndarray, ...]
    povms_b: tuple[np.ndarray, ...]
    povms_c: tuple[np.ndarray, ...]
    tomography_ops: tuple[np.ndarray, ...]
    kraus_ops: tuple[np.ndarray, ...]
    key_maps: tuple[np.ndarray, ...]
    kraus_labels: tuple[str, ...] = ("Z", "X")
    c_blocks: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def p_x(self) -> float:
        return 1.0 - self.p_z

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def register_dim(self) -> int:
        """Dimension of the part fixed by tomography (A, or A x B for MDI)."""
        return self.dim // self.c_blocks if self.name == "MDI" else self.dims[0]

    def joint_povm(self, j: int, i: int, k: int | None = None) -> np.ndarray:
        """``P_j^A x P_i^B (x P_k^C)`` on the full input space."""
        if self.name == "BB84":
            return tensor(self.povms_a[j], self.povms_b[i])
        return tensor(self.povms_a[j], self.povms_b[i], self.povms_c[k])

    def select_kraus(self, labels: Sequence[str]) -> "ProtocolSpec":
        """Copy keeping only the Kraus operators (key-generating bases) in ``labels``."""
        keep = [n for n, lab in enumerate(self.kraus_labels) if lab in labels]
        if not keep:
            raise ValidationError(f"no Kraus operators match {labels}")
        return ProtocolSpec(
            name=self.name,
            p_z=self.p_z,
            dims=self.dims,
            povms_a=self.povms_a,
            povms_b=self.povms_b,
            povms_c=self.povms_c,
            tomography_ops=self.tomography_ops,
            kraus_ops=tuple(self.kraus_ops[n] for n in keep),
            key_maps=self.key_maps,
            kraus_labels=tuple(self.kraus_labels[n] for n in keep),
            c_blocks=self.c_blocks,
            meta=dict(self.meta),
        )


def _key_sifting(indices: Sequence[int], dim_a: int) -> np.ndarray:
    """``sum_a |a>_key x |idx_a><idx_a|_A`` as a (2*dim_a, dim_a) matrix."""
    out = np.zeros((2 * dim_a, dim_a), dtype=complex)
    for key, idx in enumerate(indices):
        out += tensor(basis_ket(key, 2).reshape(2, 1), projector(basis_ket(idx, dim_a)))
    return out


def build_bb84(p_z: float = 0.5) -> ProtocolSpec:
    """Single-photon BB84 with passive basis choice at Bob."""
    _check_pz(p_z)
    p_x = 1.0 - p_z
    dim_a, dim_b = 4, 3
    povms_a = tuple(projector(basis_ket(i, dim_a)) for i in range(dim_a))
    weights = (p_z, p_z, p_x, p_x)
    povms_b = []
    for w, q in zip(weights, receiver_qubit_kets()):
        padded = np.zeros(dim_b, dtype=complex)
        padded[1:] = q
        povms_b.append(w * projector(padded))
    povms_b.append(np.eye(dim_b, dtype=complex) - sum(povms_b))
    tomography = tuple(tensor(t, np.eye(dim_b)) for t in hermitian_basis(dim_a))

    qubit = np.diag([0.0, 1.0, 1.0]).astype(complex)
    flag = [basis_ket(0, 2).reshape(2, 1), basis_ket(1, 2).reshape(2, 1)]
    k_z = tensor(_key_sifting((0, 1), dim_a), np.sqrt(p_z) * qubit, flag[0])
    k_x = tensor(_key_sifting((2, 3), dim_a), np.sqrt(p_x) * qubit, flag[1])
    rest = dim_a * dim_b * 2
    key_maps = (
        tensor(np.diag([1.0, 0.0]), np.eye(rest)).astype(complex),
        tensor(np.diag([0.0, 1.0]), np.eye(rest)).astype(complex),
    )
    return ProtocolSpec(
        name="BB84",
        p_z=p_z,
        dims=(dim_a, dim_b),
        povms_a=povms_a,
        povms_b=tuple(hermitize(p) for p in povms_b),
        povms_c=(),
        tomography_ops=tomography,
        kraus_ops=(k_z, k_x),
        key_maps=key_maps,
    )


def bell_states() -> dict[str, np.ndarray]:
    """Bell states on two single-photon polarization qubits (H = 0, V = 1)."""
    hv = np.kron(basis_ket(0, 2), basis_ket(1, 2))
    vh = np.kron(basis_ket(1, 2), basis_ket(0, 2))
    hh = np.kron(basis_ket(0, 2), basis_ket(0, 2))
    vv = np.kron(basis_ket(1, 2), basis_ket(1, 2))
    return {
        "psi-": (hv - vh) * _S2,
        "psi+": (hv + vh) * _S2,
        "phi+": (hh + vv) * _S2,
        "phi-": (hh - vv) * _S2,
    }


def build_mdi(p_z: float = 0.5) -> ProtocolSpec:
    """Single-photon-pair MDI-QKD with a classical relay announcement register."""
    _check_pz(p_z)
    dim_a = dim_b = 4
    dim_c = 3
    povms_a = tuple(projector(basis_ket(i, dim_a)) for i in range(dim_a))
    povms_b = tuple(projector(basis_ket(i, dim_b)) for i in range(dim_b))
    povms_c = tuple(projector(basis_ket(k, dim_c)) for k in range(dim_c))
    tomography = tuple(tensor(t, np.eye(dim_c)) for t in hermitian_basis(dim_a * dim_b))

    success = np.diag([1.0, 1.0, 0.0]).astype(complex)
    flag = [basis_ket(0, 2).reshape(2, 1), basis_ket(1, 2).reshape(2, 1)]
    k_z = tensor(_key_sifting((0, 1), dim_a), np.diag([1.0, 1.0, 0.0, 0.0]), success, flag[0])
    k_x = tensor(_key_sifting((2, 3), dim_a), np.diag([0.0, 0.0, 1.0, 1.0]), success, flag[1])
    rest = dim_a * dim_b * dim_c * 2
    key_maps = (
        tensor(np.diag([1.0, 0.0]), np.eye(rest)).astype(complex),
        tensor(np.diag([0.0, 1.0]), np.eye(rest)).astype(complex),
    )
    return ProtocolSpec(
        name="MDI",
        p_z=p_z,
        dims=(dim_a, dim_b, dim_c),
        povms_a=povms_a,
        povms_b=povms_b,
        povms_c=povms_c,
        tomography_ops=tomography,
        kraus_ops=(k_z.astype(complex), k_x.astype(complex)),
        key_maps=key_maps,
        c_blocks=dim_c,
    )


def bell_povm_on_qubits() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Relay POVM on two polarization qubits: Psi-, Psi+ and the completion."""
    b = bell_states()
    p_minus = projector(b["psi-"])
    p_plus = projector(b["psi+"])
    return p_minus, p_plus, np.eye(4, dtype=complex) - p_minus - p_plus


def _range_basis(k: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    u, s, _ = np.linalg.svd(k, full_matrices=False)
    return u[:, s > tol * max(1.0, s[0] if s.size else 0.0)]


class GZMaps:
    """The post-processing map ``G`` and the key map ``Z`` of a protocol.

    Evaluation of ``f`` and its gradient uses a compressed representation:
    each Kraus operator is restricted to its own range, where the pinching
    acts blockwise.  ``apply_G`` / ``apply_Z`` keep the full output space.
    """

    def __init__(self, spec: ProtocolSpec, floor: float = LOG_FLOOR):
        self.spec = spec
        self.floor = floor
        self.dim = spec.dim
        self._blocks = self._compress()

    def _compress(self):
        blocks = []
        for k in self.spec.kraus_ops:
            parts, labels = [], []
            for j, z in enumerate(self.spec.key_maps):
                v = _range_basis(z @ k)
                parts.append(v)
                labels.extend([j] * v.shape[1])
            v = np.hstack(parts)
            if np.max(np.abs(v @ (dag(v) @ k) - k)) > 1e-10:
                raise ValidationError("key maps do not cover the Kraus range")
            labels = np.asarray(labels)
            blocks.append((dag(v) @ k, labels[:, None] == labels[None, :], v))
        for a in range(len(blocks)):
            for b in range(a + 1, len(blocks)):
                if np.max(np.abs(dag(blocks[a][2]) @ blocks[b][2]), initial=0.0) > 1e-10:
                    raise ValidationError("Kraus ranges overlap; compressed evaluation unsupported")
        return [(kc, mask) for kc, mask, _ in blocks]

    # -- full-space maps -------------------------------------------------

    def _check_input(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (self.dim, self.dim):
            raise ValidationError(f"expected {self.dim}x{self.dim} input, got {rho.shape}")
        return rho

    def apply_G(self, rho) -> np.ndarray:
        rho = self._check_input(rho)
        return hermitize(sum(k @ rho @ dag(k) for k in self.spec.kraus_ops))

    def apply_Z(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=complex)
        out_dim = self.spec.key_maps[0].shape[0]
        if sigma.shape != (out_dim, out_dim):
            raise ValidationError(f"expected {out_dim}x{out_dim} input, got {sigma.shape}")
        return hermitize(sum(z @ sigma @ z for z in self.spec.key_maps))

    def apply_G_adjoint(self, x) -> np.ndarray:
        return hermitize(sum(dag(k) @ x @ k for k in self.spec.kraus_ops))

    # -- objective -------------------------------------------------------

    def _spectral_terms(self, rho: np.ndarray):
        for kc, mask in self._blocks:
            sigma = hermitize(kc @ rho @ dag(kc))
            yield kc, sigma, np.where(mask, sigma, 0.0)

    def objective_f(self, rho) -> float:
        """``f(rho) = D(G(rho) || Z(G(rho)))`` in bits."""
        rho = self._check_input(rho)
        total = 0.0
        for _, sigma, pinched in self._spectral_terms(rho):
            w1 = np.linalg.eigvalsh(sigma)
            w2 = np.linalg.eigvalsh(pinched)
            total += _xlogx(w1, self.floor) - _xlogx(w2, self.floor)
        return float(total)

    def gradient_f(self, rho) -> np.ndarray:
        """``G^dagger[log2 G(rho)] - G^dagger[log2 Z(G(rho))]``."""
        rho = self._check_input(rho)
        grad = np.zeros((self.dim, self.dim), dtype=complex)
        for kc, sigma, pinched in self._spectral_terms(rho):
            diff = _log2m(sigma, self.floor) - _log2m(pinched, self.floor)
            grad += dag(kc) @ diff @ kc
        return hermitize(grad)

    def objective_direct(self, rho) -> float:
        """Reference evaluation through the full output space."""
        g = self.apply_G(rho)
        return rel_entropy(g, self.apply_Z(g), self.floor)


def _xlogx(w: np.ndarray, floor: float) -> float:
    w = np.where(w < floor, 0.0, w)
    nz = w > 0
    return float(np.sum(w[nz] * np.log2(w[nz])))


def _log2m(m: np.ndarray, floor: float) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.log2(np.maximum(w, floor))) @ dag(v)


def povm_sum_residual(povms: Sequence[np.ndarray]) -> float:
    total = sum(povms)
    return float(np.max(np.abs(total - np.eye(total.shape[0]))))


def validate_spec(spec: ProtocolSpec, tol: float = 1e-10) -> None:
    """Check completeness, positivity and key-map algebra of a protocol."""
    for name, povms in (("A", spec.povms_a), ("B", spec.povms_b), ("C", spec.povms_c)):
        if not povms:
            continue
        if povm_sum_residual(povms) > tol:
            raise ValidationError(f"POVM {name} does not sum to identity")
        for p in povms:
            check_hermitian(p, tol)
            if np.linalg.eigvalsh(p)[0] < -tol:
                raise ValidationError(f"POVM {name} element not PSD")
    kk = sum(dag(k) @ k for k in spec.kraus_ops)
    if np.linalg.eigvalsh(hermitize(kk))[-1] > 1 + tol:
        raise ValidationError("sum of K^dagger K exceeds identity")
    z1, z2 = spec.key_maps
    ident = np.eye(z1.shape[0])
    if np.max(np.abs(z1 + z2 - ident)) > tol or np.max(np.abs(z1 @ z2)) > tol:
        raise ValidationError("key maps are not complementary orthogonal projectors")
