"""End-to-end key-rate evaluation: simulate, bound, solve, assemble.

Both methods consume the same simulated statistics and decoy bounds for a
given configuration, distance and signal intensity.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .channel import ChannelParams, DetectionStats, IntensitySet, simulate_stats
from .decoy import DEFAULT_CUTOFF, DecoyBounds, LPError, compute_decoy_bounds, observed_aggregate
from .decoy import bb84_aggregates, mdi_aggregates
from .gllp import GllpInputs, binary_entropy, gllp_bb84_rate, gllp_mdi_rate
from .hermitian import ValidationError
from .protocols import GZMaps, ProtocolSpec, build_bb84, build_mdi
from .solver import ConstraintSet, InfeasibleConstraints, NumericalFailure, frank_wolfe
from .source import register_kernel, register_preconditioner, register_state, tomography_constraint_values

WORKERS_ENV = "THAQKD_WORKERS"
METHODS = ("numerical", "gllp")

CASES = {
    "bb84-reference": dict(protocol="BB84", e_d=0.01, p_dark=1e-5, eta_d=0.125, f_ec=1.2),
    "mdi-reference": dict(protocol="MDI", e_d=0.02, p_dark=8e-8, eta_d=0.495, f_ec=1.16),
}


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to evaluate key rates.

    For MDI, ``e_d`` is Alice's misalignment and ``e_d_b`` Bob's; each
    party's fibre is half the distance.  ``mu_out_b`` defaults to
    ``mu_out_a``.
    """

    protocol: str = "BB84"
    method: str = "both"
    e_d: float = 0.01
    e_d_b: float = 0.0
    p_dark: float = 1e-5
    eta_d: float = 0.125
    loss_db_per_km: float = 0.2
    f_ec: float = 1.2
    mu: float = 0.5
    nu1: float = 0.02
    nu2: float = 0.001
    mu_out_a: float = 0.0
    mu_out_b: float | None = None
    p_z: float = 0.5
    fw_tol: float = 1e-4
    fw_max_iter: int = 300
    cutoff: int = DEFAULT_CUTOFF
    observables: str = "all"  # decoy-constrained outcomes: "all" or basis-"matched" only
    n_phase: int = 64
    distances: tuple = (0.0,)
    optimize_mu: bool = True
    mu_min: float = 0.05
    mu_max: float = 1.0
    mu_step: float = 0.05
    mu_refine_step: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "protocol", self.protocol.upper())
        object.__setattr__(self, "method", self.method.lower())
        object.__setattr__(self, "distances", tuple(float(d) for d in self.distances))
        if self.protocol not in ("BB84", "MDI"):
            raise ValidationError(f"unknown protocol {self.protocol!r}")
        if self.method not in ("numerical", "gllp", "both"):
            raise ValidationError(f"unknown method {self.method!r}")
        for name in ("e_d", "e_d_b"):
            if not 0.0 <= getattr(self, name) <= 0.5:
                raise ValidationError(f"{name} must lie in [0, 0.5]")
        if not 0.0 < self.p_z < 1.0:
            raise ValidationError("p_z must lie in (0, 1)")
        if self.f_ec < 1.0:
            raise ValidationError("f_ec must be >= 1")
        if self.mu_out_a < 0 or (self.mu_out_b is not None and self.mu_out_b < 0):
            raise ValidationError("mu_out must be non-negative")
        IntensitySet(self.mu, self.nu1, self.nu2)  # validates the ordering
        if not self.distances:
            raise ValidationError("distance grid is empty")
        if any(d < 0 for d in self.distances) or list(self.distances) != sorted(self.distances):
            raise ValidationError("distance grid must be non-negative and sorted")
        if not (self.nu1 < self.mu_min <= self.mu_max and self.mu_step > 0 and self.mu_refine_step > 0):
            raise ValidationError("intensity grid must satisfy nu1 < mu_min <= mu_max with positive steps")
        if self.observables not in ("all", "matched"):
            raise ValidationError("observables must be 'all' or 'matched'")
        if self.fw_tol <= 0 or self.fw_max_iter < 1:
            raise ValidationError("solver tolerance and iteration budget must be positive")
        ChannelParams(eta_d=self.eta_d, p_dark=self.p_dark, loss_db_per_km=self.loss_db_per_km)

    @classmethod
    def from_case(cls, case: str, **overrides) -> "RunConfig":
        if case not in CASES:
            raise ValidationError(f"unknown case {case!r}; choose from {sorted(CASES)}")
        return cls(**{**CASES[case], **overrides})

    @property
    def methods(self) -> tuple[str, ...]:
        return METHODS if self.method == "both" else (self.method,)

    @property
    def mu_out_pair(self) -> tuple[float, float]:
        return self.mu_out_a, self.mu_out_a if self.mu_out_b is None else self.mu_out_b

    def intensities(self, mu: float | None = None) -> IntensitySet:
        return IntensitySet(self.mu if mu is None else mu, self.nu1, self.nu2)


@dataclass(frozen=True)
class KeyRateReport:
    distance_km: float
    method: str
    rate: float  # bits per pulse; nan when no rate could be certified
    gap: float  # solver gap f_upper - f_lower (0 for the analytic method)
    mu_signal: float
    p1: float
    p_pass: float
    leak_ec: float
    f_lower: float
    f_upper: float
    iterations: int = 0
    status: str = "ok"
    flags: str = ""
    stats_digest: str = ""
    diagnostic: str = ""


REPORT_COLUMNS = [f.name for f in fields(KeyRateReport)]
_FLOAT_COLUMNS = {"distance_km", "rate", "gap", "mu_signal", "p1", "p_pass", "leak_ec", "f_lower", "f_upper"}


def reports_to_csv(reports) -> str:
    """CSV with round-trip float formatting (``repr`` gives 17 significant digits)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        row = []
        for name in REPORT_COLUMNS:
            v = getattr(r, name)
            row.append(repr(float(v)) if name in _FLOAT_COLUMNS else v)
        w.writerow(row)
    return buf.getvalue()


def reports_from_csv(text: str) -> list[KeyRateReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw = {}
        for name in REPORT_COLUMNS:
            v = row[name]
            if name in _FLOAT_COLUMNS:
                kw[name] = float(v)
            elif name == "iterations":
                kw[name] = int(v)
            else:
                kw[name] = v
        out.append(KeyRateReport(**kw))
    return out


# -- pipeline stages ------------------------------------------------------


def channel_params(config: RunConfig, distance: float):
    """Channel description for one distance (a pair of parties for MDI)."""
    common = dict(eta_d=config.eta_d, p_dark=config.p_dark, loss_db_per_km=config.loss_db_per_km)
    if config.protocol == "BB84":
        return ChannelParams.from_misalignment(config.e_d, distance_km=distance, **common)
    half = 0.5 * distance
    return (
        ChannelParams.from_misalignment(config.e_d, distance_km=half, **common),
        ChannelParams.from_misalignment(config.e_d_b, distance_km=half, **common),
    )


@dataclass
class PointData:
    """Shared stage output: statistics and decoy bounds at one (distance, mu)."""

    distance: float
    mu: float
    stats: DetectionStats
    bounds: DecoyBounds | None
    gain: float
    qber: float
    error: str = ""


def prepare_point(config: RunConfig, distance: float, mu: float | None = None) -> PointData:
    mu = config.mu if mu is None else mu
    stats = simulate_stats(config.protocol, config.intensities(mu), channel_params(config, distance), config.p_z, config.n_phase)
    key = mu if config.protocol == "BB84" else (mu, mu)
    aggs = bb84_aggregates(config.p_z) if config.protocol == "BB84" else mdi_aggregates()
    w_y, s_y = aggs["yield_z"]
    w_e, s_e = aggs["error_z"]
    gain = observed_aggregate(stats.tables[key], w_y, s_y)
    err = observed_aggregate(stats.tables[key], w_e, s_e)
    qber = err / gain if gain > 0 else 0.5
    try:
        bounds = compute_decoy_bounds(stats, config.cutoff, config.observables, config.p_z)
        msg = ""
    except LPError as exc:
        bounds, msg = None, str(exc)
    return PointData(distance=distance, mu=mu, stats=stats, bounds=bounds, gain=gain, qber=min(qber, 0.5), error=msg)


def single_photon_probability(config: RunConfig, mu: float) -> float:
    if config.protocol == "BB84":
        return mu * math.exp(-mu)
    return mu * mu * math.exp(-2.0 * mu)


def _full_spec(config: RunConfig) -> ProtocolSpec:
    return build_bb84(config.p_z) if config.protocol == "BB84" else build_mdi(config.p_z)


def build_constraint_set(config: RunConfig, bounds: DecoyBounds) -> ConstraintSet:
    """Trace, register tomography and decoy interval constraints on the single-photon state."""
    spec = _full_spec(config)
    mu_a, mu_b = config.mu_out_pair
    reg = register_state(spec, mu_a, mu_b)
    rest = spec.dim // spec.register_dim
    if spec.name == "BB84":
        cons = ConstraintSet(dim=spec.dim, precondition=register_preconditioner(reg, rest))
    else:
        cons = ConstraintSet.interleaved(spec.dim, spec.c_blocks, precondition=register_preconditioner(reg, rest))
    for (j, val), op in zip(tomography_constraint_values(reg, spec), spec.tomography_ops):
        cons.add_equality(op, val, f"tomography[{j}]")
    ker = register_kernel(reg)
    if ker is not None:
        cons.add_equality(np.kron(ker, np.eye(rest)), 0.0, "register-kernel")
    p_state = np.array([config.p_z / 2] * 2 + [(1 - config.p_z) / 2] * 2)
    mask = bounds.mask
    if spec.name == "BB84":
        for a in range(4):
            for o in range(len(spec.povms_b)):
                if mask is not None and not mask[a, o]:
                    continue
                lo, hi = bounds.lower[a, o], bounds.upper[a, o]
                cons.add_interval(spec.joint_povm(a, o), p_state[a] * lo, p_state[a] * hi, f"decoy[{a},{o}]")
    else:
        for a in range(4):
            for b in range(4):
                w = p_state[a] * p_state[b]
                for c in range(3):
                    if mask is not None and not mask[4 * a + b, c]:
                        continue
                    lo, hi = bounds.lower[4 * a + b, c], bounds.upper[4 * a + b, c]
                    cons.add_interval(spec.joint_povm(a, b, c), w * lo, w * hi, f"decoy[{a},{b},{c}]")
    return cons


def evaluate_numerical(config: RunConfig, point: PointData, trace: bool = False) -> tuple[KeyRateReport, object]:
    p1 = single_photon_probability(config, point.mu)
    p_pass = config.p_z**2 * point.gain
    leak = config.f_ec * binary_entropy(point.qber)
    base = dict(
        distance_km=point.distance,
        method="numerical",
        mu_signal=point.mu,
        p1=p1,
        p_pass=p_pass,
        leak_ec=leak,
        stats_digest=point.stats.digest(),
    )
    if point.bounds is None:
        return KeyRateReport(rate=math.nan, gap=math.nan, f_lower=math.nan, f_upper=math.nan, status="infeasible",
                             diagnostic=point.error, **base), None
    spec = _full_spec(config).select_kraus(["Z"])
    gz = GZMaps(spec)
    try:
        cons = build_constraint_set(config, point.bounds)
        rep = frank_wolfe(
            gz.objective_f,
            gz.gradient_f,
            cons,
            tol=config.fw_tol,
            max_iter=config.fw_max_iter,
            tol_scale=lambda r: float(np.real(np.trace(gz.apply_G(r)))),
            dim_out=spec.kraus_ops[0].shape[0],
            keep_trace=trace,
        )
    except InfeasibleConstraints as exc:
        return KeyRateReport(rate=math.nan, gap=math.nan, f_lower=math.nan, f_upper=math.nan, status="infeasible",
                             diagnostic=str(exc), **base), None
    except NumericalFailure as exc:
        return KeyRateReport(rate=math.nan, gap=math.nan, f_lower=math.nan, f_upper=math.nan, status="numerical-failure",
                             diagnostic=str(exc), **base), None
    rate = assemble_rate(p1, rep.f_lower_certified, p_pass, leak)
    flags = []
    if rate == 0.0:
        flags.append("zero-rate")
    if rep.degraded:
        flags.append("degraded-subproblem")
    return KeyRateReport(
        rate=rate,
        gap=rep.gap,
        f_lower=rep.f_lower_certified,
        f_upper=rep.f_upper,
        iterations=rep.iterations,
        flags=";".join(flags),
        **base,
    ), rep


def assemble_rate(p1: float, f_lower: float, p_pass: float, leak: float) -> float:
    """``max(0, p1 f_lower - p_pass leak)``; uses the certified lower bound only."""
    return max(0.0, p1 * f_lower - p_pass * leak)


def gllp_inputs(config: RunConfig, point: PointData) -> GllpInputs:
    agg = point.bounds.aggregates
    y_z = agg["yield_z"][0]
    y_x = agg["yield_x"][0]
    e_x = min(agg["error_x"][1] / y_x, 0.5) if y_x > 0 else 0.5
    return GllpInputs(
        gain=min(point.gain, 1.0),
        qber=point.qber,
        p1=single_photon_probability(config, point.mu),
        y1=min(max(y_z, 0.0), 1.0),
        e_x=e_x,
        p_z=config.p_z,
        f_ec=config.f_ec,
        y1_x=min(max(y_x, 0.0), 1.0) if config.protocol == "BB84" else None,
    )


def _gllp(config: RunConfig, point: PointData) -> KeyRateReport:
    p1 = single_photon_probability(config, point.mu)
    base = dict(
        distance_km=point.distance,
        method="gllp",
        mu_signal=point.mu,
        p1=p1,
        p_pass=config.p_z**2 * point.gain,
        leak_ec=config.f_ec * binary_entropy(point.qber),
        gap=0.0,
        f_lower=math.nan,
        f_upper=math.nan,
        stats_digest=point.stats.digest(),
    )
    if point.bounds is None:
        return KeyRateReport(rate=math.nan, status="infeasible", diagnostic=point.error, **base)
    inp = gllp_inputs(config, point)
    mu_a, mu_b = config.mu_out_pair
    if config.protocol == "BB84":
        rate = gllp_bb84_rate(inp, mu_a)
    else:
        rate = gllp_mdi_rate(inp, mu_a, mu_b)
    return KeyRateReport(rate=rate, flags="zero-rate" if rate == 0.0 else "", **base)


def evaluate(config: RunConfig, point: PointData, method: str) -> KeyRateReport:
    if method == "numerical":
        return evaluate_numerical(config, point)[0]
    if method == "gllp":
        return _gllp(config, point)
    raise ValidationError(f"unknown method {method!r}")


def compute_keyrate(config: RunConfig, distance: float, mu: float | None = None) -> list[KeyRateReport]:
    """Rates at one distance and fixed signal intensity, one report per method."""
    point = prepare_point(config, distance, mu)
    return [evaluate(config, point, m) for m in config.methods]


def _rate_value(r: KeyRateReport) -> float:
    return r.rate if not math.isnan(r.rate) else -math.inf


def _grid(lo: float, hi: float, step: float) -> list[float]:
    n = int(math.floor((hi - lo) / step + 1e-9))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def optimize_signal_intensity(
    config: RunConfig,
    distance: float,
    method: str | None = None,
    _cache: dict | None = None,
) -> tuple[float, float, KeyRateReport]:
    """Coarse grid over ``[mu_min, mu_max]`` then one refinement around the best point.

    Ties go to the smaller intensity.  If every rate is zero the smallest grid
    intensity is returned and the report carries the ``rate-zero-on-grid`` flag.
    """
    method = method or config.methods[0]
    cache = {} if _cache is None else _cache

    def point(mu):
        if mu not in cache:
            cache[mu] = prepare_point(config, distance, mu)
        return cache[mu]

    reports: dict[float, KeyRateReport] = {}

    def rate_at(mu):
        if mu not in reports:
            reports[mu] = evaluate(config, point(mu), method)
        return _rate_value(reports[mu])

    coarse = _grid(config.mu_min, config.mu_max, config.mu_step)
    best = _argmax(coarse, rate_at)
    fine = [
        m
        for m in _grid(max(config.mu_min, best - config.mu_step), min(config.mu_max, best + config.mu_step), config.mu_refine_step)
        if m > config.nu1
    ]
    best = _argmax(sorted(set(fine) | {best}), rate_at)
    rep = reports[best]
    if all(_rate_value(r) <= 0.0 for r in reports.values()):
        best = min(reports)
        rep = reports[best]
        rep = replace(rep, flags=";".join(filter(None, [rep.flags, "rate-zero-on-grid"])))
    return best, rep.rate, rep


def _argmax(grid, fn) -> float:
    best_mu, best_val = None, -math.inf
    for mu in grid:
        v = fn(mu)
        if v > best_val:  # strict: earlier (smaller) intensities win ties
            best_mu, best_val = mu, v
    return grid[0] if best_mu is None else best_mu


def _failed(config: RunConfig, distance: float, method: str, exc: Exception) -> KeyRateReport:
    nan = math.nan
    return KeyRateReport(
        distance_km=distance, method=method, rate=nan, gap=nan, mu_signal=config.mu, p1=nan, p_pass=nan,
        leak_ec=nan, f_lower=nan, f_upper=nan, status="error", diagnostic=f"{type(exc).__name__}: {exc}",
    )


def _scan_point(args) -> list[KeyRateReport]:
    config, distance = args
    cache: dict = {}
    out = []
    for m in config.methods:
        # a failure at one point must not abort the scan
        try:
            if config.optimize_mu:
                out.append(optimize_signal_intensity(config, distance, m, cache)[2])
            else:
                if config.mu not in cache:
                    cache[config.mu] = prepare_point(config, distance)
                out.append(evaluate(config, cache[config.mu], m))
        except (ValidationError, NumericalFailure, LPError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out.append(_failed(config, distance, m, exc))
    return out


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError(f"{WORKERS_ENV} must be >= 1")
    return n


def flag_below_gllp(reports: list[KeyRateReport], tol: float = 0.0) -> list[KeyRateReport]:
    """Mark numerical reports whose rate falls below the analytic rate at the same distance."""
    gllp = {r.distance_km: r.rate for r in reports if r.method == "gllp"}
    out = []
    for r in reports:
        ref = gllp.get(r.distance_km)
        if r.method == "numerical" and ref is not None and not math.isnan(r.rate) and r.rate < ref - tol:
            r = replace(r, flags=";".join(filter(None, [r.flags, "below-gllp"])))
        out.append(r)
    return out


def scan_distance(config: RunConfig, workers: int | None = None) -> list[KeyRateReport]:
    """One report per (distance, method), ordered by distance."""
    workers = worker_count() if workers is None else workers
    jobs = [(config, d) for d in config.distances]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scan_point, jobs))
    else:
        results = [_scan_point(j) for j in jobs]
    reports = [r for group in results for r in group]
    return flag_below_gllp(reports)


def zero_rate_distance(reports: list[KeyRateReport], method: str) -> tuple[float, float]:
    """Bracket ``(last positive, first zero)`` of grid distances for ``method``.

    The upper end is ``inf`` when the rate never reaches zero on the grid and
    the lower end is ``nan`` when no grid point has a positive rate.
    """
    pts = sorted((r.distance_km, r.rate) for r in reports if r.method == method)
    lo, hi = math.nan, math.inf
    for d, rate in pts:
        if rate > 0:
            lo = d
        elif not math.isnan(lo):
            hi = d
            break
    return lo, hi


def refine_zero_rate_distance(
    config: RunConfig, method: str, lo: float, hi: float, resolution: float = 0.5
) -> float:
    """Bisect the optimized-rate zero crossing inside ``[lo, hi]``; returns the bracket midpoint."""
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        rate = _optimized(config, mid, method).rate if config.optimize_mu else evaluate(
            config, prepare_point(config, mid), method).rate
        if rate > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _optimized(config: RunConfig, distance: float, method: str) -> KeyRateReport:
    return optimize_signal_intensity(config, distance, method)[2]


def config_dict(config: RunConfig) -> dict:
    return asdict(config)
