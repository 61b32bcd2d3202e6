import csv
import io
import itertools
import math

import numpy as np
import pytest

from thaqkd.channel import ChannelParams, IntensitySet, simulate_stats
from thaqkd.decoy import (
    InfeasibleLP,
    LinearProgram,
    compute_decoy_bounds,
    bounds_to_csv,
    decoy_lp_bb84,
    decoy_lp_mdi,
    dual_bound,
    lp_solve,
    poisson_pn,
    poisson_vector,
)
from thaqkd.hermitian import ValidationError

INTENSITIES = (0.5, 0.02, 0.001)


def vertex_min(c, a_ub, b_ub, lo, hi):
    """Minimize by enumerating every basic solution (small problems only)."""
    n = len(c)
    rows = [(a, b) for a, b in zip(a_ub, b_ub)]
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1
        rows += [(e, hi[i]), (-e, -lo[i])]
    best = math.inf
    for combo in itertools.combinations(range(len(rows)), n):
        a = np.array([rows[k][0] for k in combo])
        if abs(np.linalg.det(a)) < 1e-12:
            continue
        x = np.linalg.solve(a, np.array([rows[k][1] for k in combo]))
        if all(r @ x <= b + 1e-9 for r, b in rows):
            best = min(best, float(c @ x))
    return best


def mixture(yields, mu):
    return sum(poisson_pn(mu, n) * y for n, y in enumerate(yields))


def test_poisson():
    assert poisson_pn(0.0, 0) == 1.0
    assert poisson_pn(0.0, 3) == 0.0
    assert poisson_pn(0.5, 1) == pytest.approx(0.5 * math.exp(-0.5))
    assert poisson_pn(2.0, 3) == pytest.approx(8 / 6 * math.exp(-2))
    assert poisson_vector(0.3, 40).sum() == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        poisson_pn(-1, 0)


def test_lp_trivial():
    res = lp_solve(LinearProgram(c=np.array([1.0, -2.0])))
    assert res.optimum == pytest.approx(-2)
    assert res.certified == pytest.approx(-2)
    lp = LinearProgram(c=np.array([-1.0, -1.0]), A_ub=np.array([[1.0, 2.0]]), b_ub=np.array([1.5]))
    res = lp_solve(lp)
    assert res.optimum == pytest.approx(-1.25)
    assert res.certified <= res.optimum + 1e-12
    assert res.gap == pytest.approx(0, abs=1e-9)


def test_dual_bound_any_multiplier_is_valid():
    lp = LinearProgram(c=np.array([-1.0, -1.0]), A_ub=np.array([[1.0, 2.0]]), b_ub=np.array([1.5]))
    for y in (0.0, -0.3, -0.5, -2.0, 0.7):
        assert dual_bound(lp, np.array([y]), np.zeros(0)) <= -1.25 + 1e-12


def test_lp_against_vertex_enumeration(rng):
    for _ in range(25):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, 4))
        c = rng.normal(size=n)
        a = rng.normal(size=(m, n))
        x0 = rng.random(n)
        b = a @ x0 + rng.random(m) * 0.2
        lo, hi = np.zeros(n), np.ones(n)
        expected = vertex_min(c, a, b, lo, hi)
        res = lp_solve(LinearProgram(c=c, A_ub=a, b_ub=b))
        assert res.optimum == pytest.approx(expected, abs=1e-8)
        assert res.certified <= expected + 1e-9


def test_decoy_lp_against_vertex_enumeration():
    yields = [1e-3, 0.3, 0.5, 0.6]
    mus = (0.5, 0.1)
    cutoff = 3
    w = np.stack([poisson_vector(m, cutoff) for m in mus])
    g = w @ np.array(yields)
    tails = 1 - w.sum(axis=1)
    a = np.vstack([w, -w])
    b = np.concatenate([g + 1e-12, -(g - tails - 1e-12)])
    lo_expected = vertex_min(np.eye(4)[1], a, b, np.zeros(4), np.ones(4))
    hi_expected = -vertex_min(-np.eye(4)[1], a, b, np.zeros(4), np.ones(4))
    assert decoy_lp_bb84(g, mus, cutoff, "min") == pytest.approx(lo_expected, abs=1e-9)
    assert decoy_lp_bb84(g, mus, cutoff, "max") == pytest.approx(hi_expected, abs=1e-9)


@pytest.mark.parametrize("scale", [1.0, 1e-3, 1e-6])
def test_bb84_sandwich(rng, scale):
    for _ in range(15):
        yields = rng.random(40) * scale
        if rng.random() < 0.3:
            yields = 1 - yields
        gammas = [mixture(yields, m) for m in INTENSITIES]
        lo = decoy_lp_bb84(gammas, INTENSITIES, sense="min")
        hi = decoy_lp_bb84(gammas, INTENSITIES, sense="max")
        assert lo <= yields[1] + 1e-12 <= hi + 2e-12


def test_mdi_sandwich_and_swap(rng):
    mus = (0.3, 0.02, 0.001)
    for _ in range(5):
        y = rng.random((25, 25)) * 1e-2
        gam = {(a, b): float(poisson_vector(a, 24) @ y @ poisson_vector(b, 24)) for a in mus for b in mus}
        lo = decoy_lp_mdi(gam, mus, sense="min")
        hi = decoy_lp_mdi(gam, mus, sense="max")
        assert lo <= y[1, 1] + 1e-12 <= hi + 2e-12
        swapped = {(b, a): v for (a, b), v in gam.items()}
        assert decoy_lp_mdi(swapped, mus, sense="min") == pytest.approx(lo, abs=1e-10)
        assert decoy_lp_mdi(swapped, mus, sense="max") == pytest.approx(hi, abs=1e-10)


def test_cutoff_monotone(rng):
    yields = rng.random(40) * 0.05
    gammas = [mixture(yields, m) for m in INTENSITIES]
    prev_lo, prev_hi = -1.0, 2.0
    for cutoff in (3, 5, 8, 12, 16):
        lo = decoy_lp_bb84(gammas, INTENSITIES, cutoff, "min")
        hi = decoy_lp_bb84(gammas, INTENSITIES, cutoff, "max")
        assert lo >= prev_lo - 1e-12 and hi <= prev_hi + 1e-12
        prev_lo, prev_hi = lo, hi


def test_degenerate_inputs():
    # no clicks at all: single-photon yield is pinned near zero
    assert decoy_lp_bb84([0, 0, 0], INTENSITIES, sense="max") <= 1e-9
    # every pulse clicks: pinned near one
    assert decoy_lp_bb84([1, 1, 1], INTENSITIES, sense="min") >= 1 - 1e-9
    # vacuum decoy is allowed
    lo = decoy_lp_bb84([mixture([0.1] * 40, m) for m in (0.5, 0.1, 0.0)], (0.5, 0.1, 0.0), sense="min")
    assert 0 <= lo <= 0.1 + 1e-12
    with pytest.raises(InfeasibleLP, match="violated"):
        decoy_lp_bb84([1.5, 0.1, 0.0], INTENSITIES, sense="min")
    with pytest.raises(ValidationError):
        decoy_lp_bb84([0.1, 0.1, 0.1], INTENSITIES, cutoff=1)
    with pytest.raises(ValidationError):
        decoy_lp_bb84([0.1, 0.1, 0.1], INTENSITIES, sense="mid")


def _stats(proto):
    if proto == "BB84":
        p = ChannelParams.from_misalignment(0.01, distance_km=20, eta_d=0.125, p_dark=1e-5)
        return simulate_stats("BB84", IntensitySet(*INTENSITIES), p)
    pa = ChannelParams.from_misalignment(0.02, distance_km=10, eta_d=0.495, p_dark=8e-8)
    pb = ChannelParams(distance_km=10, eta_d=0.495, p_dark=8e-8)
    return simulate_stats("MDI", IntensitySet(0.3, 0.02, 0.001), (pa, pb), n_phase=32)


@pytest.mark.parametrize("proto", ["BB84", "MDI"])
def test_bounds_bracket_row_sums(proto):
    b = compute_decoy_bounds(_stats(proto))
    assert np.all(b.lower <= b.upper + 1e-12)
    assert np.all(b.lower.sum(axis=1) <= 1 + 1e-9)
    assert np.all(b.upper.sum(axis=1) >= 1 - 1e-9)
    for lo, hi in b.aggregates.values():
        assert lo <= hi + 1e-12


def test_bb84_aggregate_close_to_single_photon_model():
    b = compute_decoy_bounds(_stats("BB84"))
    eta = 0.125 * 10 ** (-0.4)
    lo, hi = b.aggregates["yield_z"]
    # a single photon reaches Bob's Z detectors with probability ~eta
    assert lo <= eta * 1.01 and hi >= eta * 0.99
    assert hi - lo < 0.05 * eta


def test_bounds_csv():
    b = compute_decoy_bounds(_stats("BB84"), observables="matched")
    rows = list(csv.DictReader(io.StringIO(bounds_to_csv(b))))
    obs = [r for r in rows if r["kind"] == "observable"]
    agg = [r for r in rows if r["kind"] == "aggregate"]
    assert len(obs) == 8 and len(agg) == 4
    first = obs[0]
    assert float(first["lower"]) == b.lower[0, 0]
    assert {r["sent"] for r in agg} == {"yield_z", "error_z", "yield_x", "error_x"}


def test_mdi_instance_that_stalls_at_tight_tolerance():
    # HiGHS reports an unknown status here at 1e-10 feasibility tolerance
    mus = (0.5735242195105484, 0.02, 0.001)
    vals = [0.0027270276443760303, 0.0001187711025263509, 6.355199882164407e-06, 9.615907647986858e-05,
            3.985345543664356e-06, 3.2793942060767634e-07, 4.976198548094535e-06, 3.135585653192902e-07,
            1.2918096201482106e-07]
    gam = dict(zip([(a, b) for a in mus for b in mus], vals))
    hi = decoy_lp_mdi(gam, mus, sense="max")
    lo = decoy_lp_mdi(gam, mus, sense="min")
    # the generating channel had Y11 = 0.009606013771538196
    assert lo <= 0.009606013771538196 <= hi
