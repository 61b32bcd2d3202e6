"""Weak-coherent-pulse channel simulation for BB84 and MDI-QKD.

Every simulated table is a conditional distribution ``P[sent -> outcome]``
after the four-detector click pattern has been squashed onto a small outcome
alphabet by a deletion matrix.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .hermitian import ValidationError
from .protocols import BB84_OUTCOMES, MDI_OUTCOMES, STATE_LABELS

# Pattern index = b1*8 + b2*4 + b3*2 + b4.
# BB84 detector order (b1..b4) = (Z+, Z-, X+, X-) i.e. (H, V, +, -).
# MDI detector order (b1..b4) = (3H, 3V, 4H, 4V).
DELETION_BB84 = np.array(
    [
        [0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0.5, 0, 0, 0],  # H
        [0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0.5, 0, 0, 0],  # V
        [0, 0, 1, 0.5, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],  # +
        [0, 1, 0, 0.5, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],  # -
        [1, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1],  # discard
    ],
    dtype=float,
).T

_PSI_MINUS = np.array([0, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0], dtype=float)
_PSI_PLUS = np.array([0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0], dtype=float)
DELETION_MDI = np.stack([_PSI_MINUS, _PSI_PLUS, 1.0 - _PSI_MINUS - _PSI_PLUS]).T

# polarization angle of each encoded state in the MDI channel model
MDI_ANGLES = {"z+": 0.0, "z-": np.pi / 2, "x+": np.pi / 4, "x-": -np.pi / 4}


@dataclass(frozen=True)
class ChannelParams:
    distance_km: float = 0.0
    loss_db_per_km: float = 0.2
    eta_d: float = 1.0
    theta: float = 0.0
    p_dark: float = 0.0

    def __post_init__(self):
        if self.distance_km < 0:
            raise ValidationError("distance must be non-negative")
        if self.loss_db_per_km <= 0:
            raise ValidationError("loss coefficient must be positive")
        if not 0.0 < self.eta_d <= 1.0:
            raise ValidationError("detector efficiency must lie in (0, 1]")
        if not 0.0 <= self.p_dark < 1.0:
            raise ValidationError("dark-count probability must lie in [0, 1)")

    @property
    def transmittance(self) -> float:
        return self.eta_d * 10.0 ** (-self.loss_db_per_km * self.distance_km / 10.0)

    @property
    def e_d(self) -> float:
        return float(np.sin(self.theta) ** 2)

    @classmethod
    def from_misalignment(cls, e_d: float, **kw) -> "ChannelParams":
        if not 0.0 <= e_d <= 1.0:
            raise ValidationError("misalignment error must lie in [0, 1]")
        return cls(theta=float(np.arcsin(np.sqrt(e_d))), **kw)


@dataclass(frozen=True)
class IntensitySet:
    mu: float
    nu1: float = 0.02
    nu2: float = 0.001

    def __post_init__(self):
        if not (self.mu > self.nu1 > self.nu2 >= 0):
            raise ValidationError(
                f"intensities must satisfy mu > nu1 > nu2 >= 0, got {self.mu}, {self.nu1}, {self.nu2}"
            )

    @property
    def values(self) -> tuple[float, float, float]:
        return (self.mu, self.nu1, self.nu2)


@dataclass
class DetectionStats:
    """Conditional outcome tables keyed by intensity (BB84) or intensity pair (MDI)."""

    protocol: str
    intensities: tuple[float, ...]
    tables: dict = field(default_factory=dict)

    @property
    def outcomes(self) -> tuple[str, ...]:
        return BB84_OUTCOMES if self.protocol == "BB84" else MDI_OUTCOMES

    def sent_labels(self) -> list[str]:
        if self.protocol == "BB84":
            return list(STATE_LABELS)
        return [f"{a}|{b}" for a in STATE_LABELS for b in STATE_LABELS]

    def keys(self) -> list:
        if self.protocol == "BB84":
            return list(self.intensities)
        return [(a, b) for a in self.intensities for b in self.intensities]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["intensity", "sent", "outcome", "probability"])
        for key in self.keys():
            label = repr(float(key)) if self.protocol == "BB84" else f"{key[0]!r}/{key[1]!r}"
            table = self.tables[key]
            for r, sent in enumerate(self.sent_labels()):
                for c, out in enumerate(self.outcomes):
                    w.writerow([label, sent, out, repr(float(table[r, c]))])
        return buf.getvalue()

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.protocol.encode())
        for key in self.keys():
            h.update(np.asarray(key, dtype=float).tobytes())
            h.update(np.ascontiguousarray(self.tables[key]).tobytes())
        return h.hexdigest()


def bb84_detector_amplitudes(sent: str, params: ChannelParams, mu: float, p_z: float = 0.5) -> np.ndarray:
    """Amplitudes reaching Bob's (Z+, Z-, X+, X-) detectors for a passive-basis receiver."""
    th = params.theta
    al = np.pi / 4 - th
    sz, sx = np.sqrt(p_z), np.sqrt(1.0 - p_z)
    table = {
        "z+": (sz * np.cos(th), sz * np.sin(th), sx * np.cos(al), sx * np.sin(al)),
        "z-": (-sz * np.sin(th), sz * np.cos(th), sx * np.sin(al), -sx * np.cos(al)),
        "x+": (sz * np.sin(al), sz * np.cos(al), sx * np.cos(th), -sx * np.sin(th)),
        "x-": (sz * np.cos(al), -sz * np.sin(al), sx * np.sin(th), sx * np.cos(th)),
    }
    if sent not in table:
        raise ValidationError(f"unknown state label {sent!r}")
    return np.sqrt(mu * params.transmittance) * np.array(table[sent], dtype=complex)


def click_probability(amplitude, p_dark: float):
    """``1 - (1 - p_d) exp(-|alpha|^2)``; vectorizes over ``amplitude``."""
    if not 0.0 <= p_dark < 1.0:
        raise ValidationError("dark-count probability must lie in [0, 1)")
    # 1 - (1-p)e^{-x} written to keep precision for tiny x
    x = np.abs(amplitude) ** 2
    return p_dark - (1.0 - p_dark) * np.expm1(-x)


def pattern_distribution(click_probs) -> np.ndarray:
    """Distribution over the 16 click patterns of four independent detectors.

    Accepts shape ``(..., 4)`` and returns ``(..., 16)``; pattern index
    ``b1*8 + b2*4 + b3*2 + b4``.
    """
    p = np.asarray(click_probs, dtype=float)
    if p.shape[-1] != 4:
        raise ValidationError("need exactly four click probabilities")
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("click probabilities must lie in [0, 1]")
    bits = (np.arange(16)[:, None] >> np.array([3, 2, 1, 0])[None, :]) & 1
    factors = np.where(bits == 1, p[..., None, :], 1.0 - p[..., None, :])
    return np.prod(factors, axis=-1)


def _squash(p_raw: np.ndarray, deletion: np.ndarray) -> np.ndarray:
    p_raw = np.asarray(p_raw, dtype=float)
    if p_raw.shape[-1] != 16:
        raise ValidationError("raw table must have 16 pattern columns")
    if np.max(np.abs(p_raw.sum(axis=-1) - 1.0)) > 1e-9:
        raise ValidationError("raw pattern rows must sum to 1")
    return p_raw @ deletion


def squash_bb84(p_raw) -> np.ndarray:
    """Map a ``(4, 16)`` raw pattern table to the ``(4, 5)`` squashed outcome table."""
    return _squash(p_raw, DELETION_BB84)


def squash_mdi(p_raw) -> np.ndarray:
    """Map raw patterns to the relay outcomes (Psi-, Psi+, discard)."""
    return _squash(p_raw, DELETION_MDI)


def mdi_detector_amplitudes(
    sent_a: str,
    sent_b: str,
    phi,
    params_a: ChannelParams,
    params_b: ChannelParams,
    mu_a: float,
    mu_b: float,
) -> np.ndarray:
    """Amplitudes at the relay's (3H, 3V, 4H, 4V) detectors.

    Each sender's pulse is split into H and V modes by its polarization
    angle (encoding angle plus channel misalignment); ``phi`` is the relative
    phase of the two pulses and may be an array (result shape ``(..., 4)``).
    """
    try:
        ang_a = MDI_ANGLES[sent_a] + params_a.theta
        ang_b = MDI_ANGLES[sent_b] + params_b.theta
    except KeyError as exc:
        raise ValidationError(f"unknown state label {exc.args[0]!r}") from None
    ra = np.sqrt(mu_a * params_a.transmittance / 2.0)
    rb = np.sqrt(mu_b * params_b.transmittance / 2.0)
    ph = np.exp(1j * np.asarray(phi, dtype=float))
    a_h, a_v = ra * np.cos(ang_a), ra * np.sin(ang_a)
    b_h, b_v = rb * np.cos(ang_b) * ph, rb * np.sin(ang_b) * ph
    return np.stack(
        [a_h + 1j * b_h, a_v + 1j * b_v, 1j * a_h + b_h, 1j * a_v + b_v],
        axis=-1,
    )


def phase_grid(n: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n) / n


def bb84_table(params: ChannelParams, mu: float, p_z: float = 0.5) -> np.ndarray:
    raw = np.stack(
        [
            pattern_distribution(click_probability(bb84_detector_amplitudes(s, params, mu, p_z), params.p_dark))
            for s in STATE_LABELS
        ]
    )
    return squash_bb84(raw)


def mdi_table(
    params_a: ChannelParams,
    params_b: ChannelParams,
    mu_a: float,
    mu_b: float,
    n_phase: int = 64,
) -> np.ndarray:
    """``(16, 3)`` squashed table; row ``4*i + j`` for Alice state ``i``, Bob state ``j``.

    Pattern probabilities are averaged over a uniform relative phase with the
    periodic trapezoidal rule on ``n_phase`` points.
    """
    phis = phase_grid(n_phase)
    rows = []
    for sa in STATE_LABELS:
        for sb in STATE_LABELS:
            amp = mdi_detector_amplitudes(sa, sb, phis, params_a, params_b, mu_a, mu_b)
            # dark counts are per detector; both parties' detectors are the relay's
            clicks = click_probability(amp, params_a.p_dark)
            rows.append(pattern_distribution(clicks).mean(axis=0))
    return squash_mdi(np.stack(rows))


def simulate_stats(
    protocol: str,
    intensities: IntensitySet,
    params,
    p_z: float = 0.5,
    n_phase: int = 64,
) -> DetectionStats:
    """Full conditional outcome tables for every intensity (pair).

    ``params`` is a single :class:`ChannelParams` for BB84 and a pair
    ``(alice_side, bob_side)`` for MDI.
    """
    protocol = protocol.upper()
    values = intensities.values
    stats = DetectionStats(protocol=protocol, intensities=values)
    if protocol == "BB84":
        for mu in values:
            stats.tables[mu] = bb84_table(params, mu, p_z)
    elif protocol == "MDI":
        pa, pb = params
        for ma in values:
            for mb in values:
                stats.tables[(ma, mb)] = mdi_table(pa, pb, ma, mb, n_phase)
    else:
        raise ValidationError(f"unknown protocol {protocol!r}")
    return stats


def stats_from_csv(text: str, protocol: str) -> DetectionStats:
    """Inverse of :meth:`DetectionStats.to_csv`."""
    protocol = protocol.upper()
    rows = list(csv.DictReader(io.StringIO(text)))
    outcomes = BB84_OUTCOMES if protocol == "BB84" else MDI_OUTCOMES
    sent = list(STATE_LABELS) if protocol == "BB84" else [f"{a}|{b}" for a in STATE_LABELS for b in STATE_LABELS]
    tables: dict = {}
    order: list = []
    for row in rows:
        if protocol == "BB84":
            key = float(row["intensity"])
        else:
            a, b = row["intensity"].split("/")
            key = (float(a), float(b))
        if key not in tables:
            tables[key] = np.zeros((len(sent), len(outcomes)))
            order.append(key)
        tables[key][sent.index(row["sent"]), outcomes.index(row["outcome"])] = float(row["probability"])
    if protocol == "BB84":
        values = tuple(order)
    else:
        values = tuple(dict.fromkeys(k[0] for k in order))
    return DetectionStats(protocol=protocol, intensities=values, tables=tables)


def row_stochastic_residual(tables: Iterable[np.ndarray] | Mapping) -> float:
    if isinstance(tables, Mapping):
        tables = tables.values()
    return max(float(np.max(np.abs(t.sum(axis=1) - 1.0))) for t in tables)
