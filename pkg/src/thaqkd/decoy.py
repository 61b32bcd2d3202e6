"""Decoy-state linear programs for single-photon statistics.

For each observable, the yields ``Y_n`` (or ``Y_nm`` for MDI) of the
photon-number components are unknowns in ``[0, 1]``.  Each intensity gives a
two-sided constraint: the truncated Poisson mixture cannot exceed the observed
value, and may fall short of it by at most the Poisson tail mass beyond the
cutoff.  Minimizing and maximizing ``Y_1`` (``Y_11``) bounds the
single-photon statistic.

Every returned bound is the value of an explicitly checked dual certificate,
so a lower bound never exceeds the true minimum (and an upper bound never
undercuts the true maximum) even if the LP solver's primal answer is off.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import factorial
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .channel import BB84_OUTCOMES, MDI_OUTCOMES, DetectionStats
from .hermitian import ValidationError
from .protocols import STATE_LABELS

DEFAULT_CUTOFF = 10


class LPError(RuntimeError):
    pass


class InfeasibleLP(LPError):
    pass


class UnboundedLP(LPError):
    pass


def poisson_pn(mu: float, n: int) -> float:
    """Poisson mass ``mu^n e^{-mu} / n!``."""
    if mu < 0 or n < 0:
        raise ValidationError("need mu >= 0 and n >= 0")
    if mu == 0:
        return 1.0 if n == 0 else 0.0
    return float(np.exp(n * np.log(mu) - mu - np.log(float(factorial(n)))))


def poisson_vector(mu: float, cutoff: int) -> np.ndarray:
    return np.array([poisson_pn(mu, n) for n in range(cutoff + 1)])


@dataclass
class LinearProgram:
    """``min c.x`` s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``lo <= x <= hi`` (finite box)."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    row_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        self.lo = np.zeros(n) if self.lo is None else np.asarray(self.lo, dtype=float)
        self.hi = np.ones(n) if self.hi is None else np.asarray(self.hi, dtype=float)
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValidationError("variable bounds must be finite (certificates rely on a bounded box)")


@dataclass
class LPResult:
    optimum: float  # primal objective reported by the solver
    certified: float  # dual-certified lower bound on the minimum
    x: np.ndarray
    y_ub: np.ndarray
    y_eq: np.ndarray

    @property
    def gap(self) -> float:
        return self.optimum - self.certified


def dual_bound(lp: LinearProgram, y_ub: np.ndarray, y_eq: np.ndarray) -> float:
    """Lower bound on ``min c.x`` implied by any multipliers (``y_ub`` is clipped to ``<= 0``)."""
    r = lp.c.copy()
    total = 0.0
    if lp.A_ub is not None and len(y_ub):
        y_ub = np.minimum(y_ub, 0.0)
        r -= lp.A_ub.T @ y_ub
        total += float(lp.b_ub @ y_ub)
    if lp.A_eq is not None and len(y_eq):
        r -= lp.A_eq.T @ y_eq
        total += float(lp.b_eq @ y_eq)
    total += float(np.sum(np.minimum(r * lp.lo, r * lp.hi)))
    return total


def _row_scale(a: np.ndarray | None, b: np.ndarray | None) -> np.ndarray | None:
    # HiGHS uses absolute tolerances; rows whose data sit near 1e-8 need rescaling
    if a is None:
        return None
    mag = np.maximum(np.abs(b), 1e-12 * np.max(np.abs(a), axis=1))
    return 1.0 / np.maximum(mag, 1e-300)


_LP_ATTEMPTS = (
    ("highs", {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}),
    ("highs-ds", {}),
    ("highs-ipm", {}),
)


def lp_solve(lp: LinearProgram) -> LPResult:
    """Solve ``lp`` with HiGHS and attach a verified dual bound."""
    s_ub = _row_scale(lp.A_ub, lp.b_ub)
    s_eq = _row_scale(lp.A_eq, lp.b_eq)
    data = dict(
        A_ub=None if s_ub is None else lp.A_ub * s_ub[:, None],
        b_ub=None if s_ub is None else lp.b_ub * s_ub,
        A_eq=None if s_eq is None else lp.A_eq * s_eq[:, None],
        b_eq=None if s_eq is None else lp.b_eq * s_eq,
        bounds=np.column_stack([lp.lo, lp.hi]),
    )
    # tight tolerances first; HiGHS occasionally stalls on them, and since the
    # returned bound is re-certified from the duals a looser retry is safe
    for method, options in _LP_ATTEMPTS:
        res = linprog(lp.c, method=method, options=options, **data)
        if res.status in (0, 2, 3):
            break
    if res.status == 2:
        raise InfeasibleLP(_infeasibility_diagnostic(lp))
    if res.status == 3:
        raise UnboundedLP("linear program is unbounded")
    if res.status != 0:
        raise LPError(f"LP solver failed: {res.message}")
    y_ub = np.asarray(res.ineqlin.marginals) * s_ub if s_ub is not None else np.zeros(0)
    y_eq = np.asarray(res.eqlin.marginals) * s_eq if s_eq is not None else np.zeros(0)
    cert = dual_bound(lp, y_ub, y_eq)
    return LPResult(optimum=float(res.fun), certified=cert, x=np.asarray(res.x), y_ub=y_ub, y_eq=y_eq)


def _infeasibility_diagnostic(lp: LinearProgram) -> str:
    """Name the constraint row furthest from satisfiable when the others are relaxed."""
    if lp.A_ub is None:
        return "linear program is infeasible"
    worst, name = 0.0, None
    for r in range(lp.A_ub.shape[0]):
        a = lp.A_ub[r]
        smallest = float(np.sum(np.minimum(a * lp.lo, a * lp.hi)))
        viol = smallest - lp.b_ub[r]
        if viol > worst:
            worst = viol
            name = lp.row_names[r] if r < len(lp.row_names) else f"row {r}"
    if name is None:
        # rows individually satisfiable: report the pair with the tightest conflict
        return "linear program is infeasible (statistics inconsistent with any yield vector)"
    return f"linear program is infeasible: constraint {name} violated by {worst:.3e}"


def _decoy_lp(weights: np.ndarray, gammas: np.ndarray, target: int, sense: str, slack: float, names) -> LinearProgram:
    # weights: (n_intensities, n_vars) truncated Poisson mixture coefficients
    if sense not in ("min", "max"):
        raise ValidationError("sense must be 'min' or 'max'")
    tails = 1.0 - weights.sum(axis=1)
    n_vars = weights.shape[1]
    c = np.zeros(n_vars)
    c[target] = 1.0 if sense == "min" else -1.0
    a_ub = np.vstack([weights, -weights])
    b_ub = np.concatenate([gammas + slack, -(gammas - np.maximum(tails, 0.0) - slack)])
    row_names = [f"upper[{n}]" for n in names] + [f"lower[{n}]" for n in names]
    return LinearProgram(c=c, A_ub=a_ub, b_ub=b_ub, row_names=row_names)


def _bound_from(lp: LinearProgram, sense: str) -> float:
    res = lp_solve(lp)
    if sense == "min":
        return res.certified
    return -res.certified


def _decoy_bound(weights: np.ndarray, gammas: np.ndarray, target: int, sense: str, slack: float, names) -> float:
    # Observables close to 1 (the no-click event) leave only ~1e-8 of room between the
    # constraints and the box; solve for the complement 1 - Y instead, which has the same
    # two-sided form with gamma -> 1 - gamma.
    gammas = np.asarray(gammas, dtype=float)
    if np.max(gammas) > 0.5:
        flipped = "max" if sense == "min" else "min"
        lp = _decoy_lp(weights, 1.0 - gammas, target, flipped, slack, names)
        return 1.0 - _bound_from(lp, flipped)
    return _bound_from(_decoy_lp(weights, gammas, target, sense, slack, names), sense)


def decoy_lp_bb84(
    gammas: Sequence[float],
    intensities: Sequence[float],
    cutoff: int = DEFAULT_CUTOFF,
    sense: str = "min",
    slack: float = 1e-12,
) -> float:
    """Certified bound on the single-photon value of one observable.

    ``gammas[j]`` is the observed conditional probability at
    ``intensities[j]``.  ``sense='min'`` gives a lower bound, ``'max'`` an
    upper bound.
    """
    if cutoff < 2:
        raise ValidationError("cutoff must be at least 2")
    gammas = np.asarray(gammas, dtype=float)
    weights = np.stack([poisson_vector(mu, cutoff) for mu in intensities])
    return _decoy_bound(weights, gammas, 1, sense, slack, [f"mu={m:g}" for m in intensities])


def decoy_lp_mdi(
    gammas: dict,
    intensities: Sequence[float],
    cutoff: int = DEFAULT_CUTOFF,
    sense: str = "min",
    slack: float = 1e-12,
) -> float:
    """Certified bound on the (1,1)-photon value of one observable.

    ``gammas`` maps an intensity pair ``(mu_a, mu_b)`` to the observed
    conditional probability.
    """
    if cutoff < 1:
        raise ValidationError("cutoff must be at least 1")
    pairs = [(a, b) for a in intensities for b in intensities]
    rows, vals = [], []
    for a, b in pairs:
        rows.append(np.outer(poisson_vector(a, cutoff), poisson_vector(b, cutoff)).ravel())
        vals.append(gammas[(a, b)])
    weights = np.stack(rows)
    target = 1 * (cutoff + 1) + 1
    return _decoy_bound(weights, np.asarray(vals), target, sense, slack, [f"{a:g}/{b:g}" for a, b in pairs])


@dataclass
class DecoyBounds:
    """Single-photon interval bounds per observable.

    ``lower``/``upper`` have shape ``(n_sent, n_outcomes)`` and hold bounds on
    the conditional probability ``P(outcome | sent, single photon)``.
    ``aggregates`` holds bounds on derived statistics used by the analytic
    baseline (yields and bit errors per basis).
    """

    protocol: str
    lower: np.ndarray
    upper: np.ndarray
    aggregates: dict = field(default_factory=dict)
    mask: np.ndarray | None = None


def _table_stack(stats: DetectionStats) -> tuple[list, np.ndarray]:
    keys = stats.keys()
    return keys, np.stack([stats.tables[k] for k in keys])


def _observable_mask(protocol: str, n_sent: int, n_out: int, observables: str) -> np.ndarray:
    if observables == "all":
        return np.ones((n_sent, n_out), dtype=bool)
    if observables != "matched":
        raise ValidationError("observables must be 'all' or 'matched'")
    mask = np.zeros((n_sent, n_out), dtype=bool)
    if protocol == "BB84":
        for i in range(4):
            cols = (0, 1) if i < 2 else (2, 3)
            mask[i, list(cols)] = True
    else:
        for r in range(16):
            a, b = divmod(r, 4)
            if (a < 2) == (b < 2):
                mask[r, :2] = True
    return mask


def bb84_aggregates(p_z: float = 0.5) -> dict[str, tuple[np.ndarray, float]]:
    """Weight matrices over the (4, 5) table for basis-level single-photon statistics.

    Each entry maps a name to ``(weights, scale)``; the statistic is
    ``sum(weights * table) / scale``.  Yields are conditioned on Bob's basis
    choice, hence the division by the basis probability.
    """
    p_x = 1.0 - p_z
    w = {}
    yz = np.zeros((4, 5))
    yz[0, :2] = yz[1, :2] = 0.5
    ez = np.zeros((4, 5))
    ez[0, 1] = ez[1, 0] = 0.5
    yx = np.zeros((4, 5))
    yx[2, 2:4] = yx[3, 2:4] = 0.5
    ex = np.zeros((4, 5))
    ex[2, 3] = ex[3, 2] = 0.5
    w["yield_z"] = (yz, p_z)
    w["error_z"] = (ez, p_z)
    w["yield_x"] = (yx, p_x)
    w["error_x"] = (ex, p_x)
    return w


def mdi_aggregates() -> dict[str, tuple[np.ndarray, float]]:
    """Basis-level statistics over the (16, 3) MDI table (rows ``4*a + b``)."""
    w = {}
    yz = np.zeros((16, 3))
    ez = np.zeros((16, 3))
    yx = np.zeros((16, 3))
    ex = np.zeros((16, 3))
    for r in range(16):
        a, b = divmod(r, 4)
        if a < 2 and b < 2:
            yz[r, :2] = 0.25
            if a == b:
                ez[r, :2] = 0.25
        if a >= 2 and b >= 2:
            yx[r, :2] = 0.25
            # psi- heralds anti-correlated, psi+ correlated diagonal states
            ex[r, 0 if a == b else 1] = 0.25
    w["yield_z"] = (yz, 1.0)
    w["error_z"] = (ez, 1.0)
    w["yield_x"] = (yx, 1.0)
    w["error_x"] = (ex, 1.0)
    return w


def observed_aggregate(table: np.ndarray, weights: np.ndarray, scale: float) -> float:
    return float(np.sum(weights * table) / scale)


def compute_decoy_bounds(
    stats: DetectionStats,
    cutoff: int = DEFAULT_CUTOFF,
    observables: str = "all",
    p_z: float = 0.5,
) -> DecoyBounds:
    """Interval bounds on every (masked) single-photon observable plus basis aggregates."""
    keys, stack = _table_stack(stats)
    n_sent, n_out = stack.shape[1:]
    mask = _observable_mask(stats.protocol, n_sent, n_out, observables)
    lower = np.zeros((n_sent, n_out))
    upper = np.ones((n_sent, n_out))
    aggs = bb84_aggregates(p_z) if stats.protocol == "BB84" else mdi_aggregates()

    def bound(values: np.ndarray, sense: str) -> float:
        if stats.protocol == "BB84":
            return decoy_lp_bb84(values, stats.intensities, cutoff, sense)
        return decoy_lp_mdi(dict(zip(keys, values)), stats.intensities, cutoff, sense)

    for r in range(n_sent):
        for c in range(n_out):
            if not mask[r, c]:
                continue
            vals = stack[:, r, c]
            lower[r, c] = min(max(bound(vals, "min"), 0.0), 1.0)
            upper[r, c] = min(max(bound(vals, "max"), 0.0), 1.0)
    agg_bounds = {}
    for name, (wts, scale) in aggs.items():
        vals = np.array([np.sum(wts * t) for t in stack])
        lo = max(bound(vals, "min"), 0.0) / scale
        hi = min(bound(vals, "max"), 1.0) / scale
        agg_bounds[name] = (lo, hi)
    return DecoyBounds(protocol=stats.protocol, lower=lower, upper=upper, aggregates=agg_bounds, mask=mask)


def sent_labels(protocol: str) -> list[str]:
    if protocol == "BB84":
        return list(STATE_LABELS)
    return [f"{a}|{b}" for a in STATE_LABELS for b in STATE_LABELS]


def bounds_to_csv(bounds: DecoyBounds) -> str:
    """One row per observable (``kind=observable``) and per basis aggregate (``kind=aggregate``)."""
    outcomes = BB84_OUTCOMES if bounds.protocol == "BB84" else MDI_OUTCOMES
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "sent", "outcome", "lower", "upper"])
    for r, sent in enumerate(sent_labels(bounds.protocol)):
        for c, out in enumerate(outcomes):
            if bounds.mask is not None and not bounds.mask[r, c]:
                continue
            w.writerow(["observable", sent, out, repr(float(bounds.lower[r, c])), repr(float(bounds.upper[r, c]))])
    for name, (lo, hi) in bounds.aggregates.items():
        w.writerow(["aggregate", name, "", repr(float(lo)), repr(float(hi))])
    return buf.getvalue()
