"""Lossless single-photon BB84 key rates versus error rate.

The receiver sees each emitted single photon through a depolarizing channel
that produces bit error ``e`` in both bases.  Rates are reported per sifted
bit so they compare directly with ``1 - h2(e_X') - h2(e_Z)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np

from .gllp import binary_entropy, ideal_single_photon_rate
from .hermitian import ValidationError, basis_ket, partial_trace
from .protocols import GZMaps, build_bb84, receiver_qubit_kets
from .solver import FW_TOL, ConstraintSet, frank_wolfe
from .source import (
    build_ensemble_bb84,
    reduced_register_state,
    register_kernel,
    register_preconditioner,
    tomography_constraint_values,
)


@dataclass(frozen=True)
class SinglePhotonPoint:
    mu_out: float
    e: float
    numerical: float  # certified, per sifted bit, may be negative before flooring
    gllp: float
    gap: float
    iterations: int


def depolarized_state(reg: np.ndarray, e: float) -> np.ndarray:
    """Joint register/receiver state after a depolarizing channel with bit error ``e``.

    The receiver space is vacuum plus qubit; the vacuum component is unused.
    """
    if not 0.0 <= e <= 0.5:
        raise ValidationError("error rate must lie in [0, 0.5]")
    kets = [np.concatenate([[0.0], k]) for k in receiver_qubit_kets()]
    rho = np.zeros((12, 12), dtype=complex)
    for i in range(4):
        for j in range(4):
            rho += reg[i, j] * np.kron(np.outer(basis_ket(i, 4), basis_ket(j, 4)), np.outer(kets[i], kets[j].conj()))
    q = 2.0 * e
    mixed = np.diag([0.0, 0.5, 0.5]).astype(complex)
    return (1.0 - q) * rho + q * np.kron(partial_trace(rho, [4, 3], [0]), mixed)


def single_photon_constraints(mu_out: float, e: float, p_z: float = 0.5) -> ConstraintSet:
    spec = build_bb84(p_z)
    reg = reduced_register_state(build_ensemble_bb84(p_z, mu_out))
    rho = depolarized_state(reg, e)
    cons = ConstraintSet(dim=spec.dim, precondition=register_preconditioner(reg, 3))
    for op, (j, val) in zip(spec.tomography_ops, tomography_constraint_values(reg, spec)):
        cons.add_equality(op, val, f"tomography[{j}]")
    ker = register_kernel(reg)
    if ker is not None:
        cons.add_equality(np.kron(ker, np.eye(3)), 0.0, "register-kernel")
    for a in range(4):
        for o in range(len(spec.povms_b)):
            op = spec.joint_povm(a, o)
            v = float(np.real(np.trace(op @ rho)))
            cons.add_interval(op, v, v, f"observed[{a},{o}]")
    return cons


def single_photon_point(mu_out: float, e: float, p_z: float = 0.5, tol: float = FW_TOL) -> SinglePhotonPoint:
    spec = build_bb84(p_z).select_kraus(["Z"])
    gz = GZMaps(spec)
    rep = frank_wolfe(
        gz.objective_f,
        gz.gradient_f,
        single_photon_constraints(mu_out, e, p_z),
        tol=tol,
        tol_scale=lambda r: float(np.real(np.trace(gz.apply_G(r)))),
        dim_out=spec.kraus_ops[0].shape[0],
    )
    p_pass = p_z**2
    numerical = (rep.f_lower_certified - p_pass * binary_entropy(e)) / p_pass
    return SinglePhotonPoint(
        mu_out=mu_out,
        e=e,
        numerical=numerical,
        gllp=ideal_single_photon_rate(e, e, mu_out),
        gap=rep.gap / p_pass,
        iterations=rep.iterations,
    )


def single_photon_curve(mu_out: float, e_grid, p_z: float = 0.5, tol: float = FW_TOL) -> list[SinglePhotonPoint]:
    return [single_photon_point(mu_out, float(e), p_z, tol) for e in e_grid]


def curve_to_csv(points) -> str:
    names = [f.name for f in fields(SinglePhotonPoint)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for p in points:
        w.writerow([repr(float(getattr(p, n))) if n != "iterations" else p.iterations for n in names])
    return buf.getvalue()
