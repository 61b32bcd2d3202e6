"""Refined-GLLP analytic key rates with Trojan-horse leakage.

The leak enters only through the Bloch-sphere inflation of the single-photon
phase error: ``e_X -> e_X'`` with the deviation ``Delta' = Delta / Y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hermitian import DomainError, ValidationError
from .source import delta_bloch, delta_bloch_mdi


def binary_entropy(x: float) -> float:
    """``h2(x)`` in bits, with ``h2(0) = h2(1) = 0``."""
    x = float(x)
    if not 0.0 <= x <= 1.0 or np.isnan(x):
        raise DomainError(f"binary entropy argument {x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return 0.0
    return float(-x * np.log2(x) - (1.0 - x) * np.log2(1.0 - x))


def ex_prime(e_x: float, delta_prime: float) -> float:
    """Phase error inflated by the source deviation ``delta_prime``.

    ``delta_prime`` is clamped to ``[0, 0.5]`` and the result to ``[0, 0.5]``.
    """
    if not 0.0 <= e_x <= 0.5:
        raise DomainError(f"e_X = {e_x} outside [0, 0.5]")
    d = min(max(float(delta_prime), 0.0), 0.5)
    val = (
        e_x
        + 4.0 * d * (1.0 - d) * (1.0 - 2.0 * e_x)
        + 4.0 * (1.0 - 2.0 * d) * np.sqrt(d * (1.0 - d) * e_x * (1.0 - e_x))
    )
    return float(min(max(val, 0.0), 0.5))


def _delta_prime(delta: float, y: float) -> float:
    # a vanishing yield bound leaves nothing to hide the leak in
    if y <= 0.0:
        return 0.5
    return min(delta / y, 0.5)


def ideal_single_photon_rate(e_z: float, e_x: float, mu_out: float, y: float = 1.0) -> float:
    """``1 - h2(e_X') - h2(e_Z)`` floored at 0, for lossless single photons."""
    for name, v in (("e_Z", e_z), ("e_X", e_x)):
        if not 0.0 <= v <= 0.5:
            raise DomainError(f"{name} = {v} outside [0, 0.5]")
    if not 0.0 < y <= 1.0:
        raise DomainError(f"yield {y} outside (0, 1]")
    exp_ = ex_prime(e_x, _delta_prime(delta_bloch(mu_out), y))
    return max(0.0, 1.0 - binary_entropy(exp_) - binary_entropy(e_z))


@dataclass(frozen=True)
class GllpInputs:
    """Statistics consumed by the analytic rates.

    For MDI the fields carry the two-party quantities: ``gain`` is the
    Z-basis signal gain, ``p1`` the (1,1)-photon probability, ``y1`` the
    Z-basis (1,1) yield and ``e_x`` the (1,1) X-basis bit error.
    """

    gain: float
    qber: float
    p1: float
    y1: float
    e_x: float
    p_z: float = 0.5
    f_ec: float = 1.16
    y1_x: float | None = None  # X-basis single-photon yield (BB84 Delta' uses the minimum)

    def __post_init__(self):
        for name in ("gain", "qber", "p1", "y1", "e_x", "p_z"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} = {v} outside [0, 1]")
        if self.y1_x is not None and not 0.0 <= self.y1_x <= 1.0:
            raise ValidationError(f"y1_x = {self.y1_x} outside [0, 1]")
        if self.f_ec < 1.0:
            raise ValidationError("error-correction efficiency must be >= 1")

    def _clamped_ex(self) -> float:
        return min(self.e_x, 0.5)

    def _clamped_qber(self) -> float:
        return min(self.qber, 0.5)


def _rate(inp: GllpInputs, delta: float, y_delta: float) -> float:
    exp_ = ex_prime(inp._clamped_ex(), _delta_prime(delta, y_delta))
    pz2 = inp.p_z**2
    secret = pz2 * inp.p1 * inp.y1 * (1.0 - binary_entropy(exp_))
    leak = pz2 * inp.gain * inp.f_ec * binary_entropy(inp._clamped_qber())
    return max(0.0, secret - leak)


def gllp_bb84_rate(inputs: GllpInputs, mu_out: float) -> float:
    """Decoy BB84 rate ``p_Z^2 p1 Y1 [1 - h2(e_X')] - p_Z^2 Q f h2(E)``, floored at 0."""
    y = inputs.y1 if inputs.y1_x is None else min(inputs.y1, inputs.y1_x)
    return _rate(inputs, delta_bloch(mu_out), y)


def gllp_mdi_rate(inputs: GllpInputs, mu_out_a: float, mu_out_b: float) -> float:
    """MDI rate with the two-party deviation and ``Delta' = Delta / Y11^Z``."""
    return _rate(inputs, delta_bloch_mdi(mu_out_a, mu_out_b), inputs.y1)
