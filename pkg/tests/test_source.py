import math

import numpy as np
import pytest

from thaqkd.hermitian import ValidationError, hermitian_basis, partial_trace
from thaqkd.protocols import build_bb84, build_mdi
from thaqkd.source import (
    build_ensemble_bb84,
    coherent_overlap,
    delta_bloch,
    delta_bloch_mdi,
    reduced_register_state,
    register_kernel,
    register_preconditioner,
    register_state,
    tomography_constraint_values,
)

S2 = 1 / math.sqrt(2)


def fock_coherent(alpha, n_max=40):
    n = np.arange(n_max)
    logs = np.array([math.lgamma(k + 1) for k in n])
    amp = np.exp(-abs(alpha) ** 2 / 2) * np.power(complex(alpha), n) / np.sqrt(np.exp(logs))
    return amp


def oracle_register(p_z, mu):
    """Trace out signal and leak from the purified source state in a truncated Fock space."""
    p = [p_z / 2, p_z / 2, (1 - p_z) / 2, (1 - p_z) / 2]
    sig = [np.array([S2, S2]), np.array([S2, -S2]), np.array([S2, 1j * S2]), np.array([S2, -1j * S2])]
    s = math.sqrt(mu)
    leak = [fock_coherent(a) for a in (s, -s, 1j * s, -1j * s)]
    psi = sum(math.sqrt(p[i]) * np.kron(np.eye(4)[i], np.kron(sig[i], leak[i])) for i in range(4))
    return partial_trace(np.outer(psi, psi.conj()), [4, 2 * len(leak[0])], [0])


def test_coherent_overlap_examples():
    assert coherent_overlap(0.3 + 0.1j, 0.3 + 0.1j) == pytest.approx(1.0)
    mu = 1e-3
    assert coherent_overlap(math.sqrt(mu), -math.sqrt(mu)) == pytest.approx(math.exp(-2 * mu), abs=1e-15)
    got = coherent_overlap(math.sqrt(mu), 1j * math.sqrt(mu))
    assert got == pytest.approx(math.exp(-mu) * complex(math.cos(mu), -math.sin(mu)), abs=1e-15)
    assert abs(coherent_overlap(1.0, 2.0)) < 1


def test_ensemble_bb84():
    ens = build_ensemble_bb84(0.5, 0.0)
    assert np.allclose(ens.leak_amplitudes, 0)
    k = ens.signal_kets
    assert abs(np.vdot(k[1], k[0])) < 1e-15
    assert np.vdot(k[2], k[0]) == pytest.approx((1 - 1j) / 2)
    with pytest.raises(ValidationError):
        build_ensemble_bb84(0.5, -1.0)
    with pytest.raises(ValidationError):
        build_ensemble_bb84(1.0, 0.0)


@pytest.mark.parametrize("mu", [0.0, 1e-4, 1e-3, 0.1, 1.0])
@pytest.mark.parametrize("p_z", [0.5, 0.7])
def test_register_matches_fock_oracle(mu, p_z):
    got = reduced_register_state(build_ensemble_bb84(p_z, mu))
    assert np.allclose(got, oracle_register(p_z, mu), atol=1e-12)


def test_register_examples():
    rho = reduced_register_state(build_ensemble_bb84(0.5, 0.0))
    assert np.allclose(np.diag(rho), 0.25)
    assert abs(rho[0, 2]) == pytest.approx(0.25 * S2)
    for mu in (0.0, 1e-3, 1.0):
        assert abs(reduced_register_state(build_ensemble_bb84(0.5, mu))[0, 1]) < 1e-15
    big = reduced_register_state(build_ensemble_bb84(0.5, 1e3))
    off = big - np.diag(np.diag(big))
    assert np.max(np.abs(off)) < 1e-300
    assert np.allclose(np.diag(big), 0.25)


def test_register_psd_and_monotone():
    grid = [0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0]
    prev = None
    for mu in grid:
        rho = reduced_register_state(build_ensemble_bb84(0.5, mu))
        assert np.linalg.eigvalsh(rho).min() > -1e-10
        assert abs(np.trace(rho) - 1) < 1e-12
        off = np.abs(rho - np.diag(np.diag(rho)))
        if prev is not None:
            assert np.all(off <= prev + 1e-15)
        prev = off


def test_tomography_values():
    spec = build_bb84()
    for mu in (0.0, 1e-3):
        reg = register_state(spec, mu)
        vals = tomography_constraint_values(reg, spec)
        assert len(vals) == 16
        basis = hermitian_basis(4)
        recon = sum(v * basis[j] for j, v in vals)
        assert np.allclose(recon, reg)
        # a diagonal readout returns the state probability
        diag_idx = [j for j, b in enumerate(basis) if np.allclose(b, np.diag(np.eye(4)[0]))][0]
        assert vals[diag_idx][1] == pytest.approx(0.25)


def test_tomography_dimension_mismatch():
    with pytest.raises(ValidationError):
        tomography_constraint_values(np.eye(3) / 3, build_bb84())


def test_mdi_register_is_product():
    spec = build_mdi()
    reg = register_state(spec, 1e-3, 2e-3)
    a = reduced_register_state(build_ensemble_bb84(0.5, 1e-3))
    b = reduced_register_state(build_ensemble_bb84(0.5, 2e-3))
    assert np.allclose(reg, np.kron(a, b))
    assert len(tomography_constraint_values(reg, spec)) == 256


def test_delta_bloch():
    assert delta_bloch(0.0) == 0.0
    assert delta_bloch(1e-3) == pytest.approx(4.998e-4, rel=1e-3)
    assert abs(delta_bloch(50.0) - 0.5 * (1 - math.exp(-50) * math.cos(50))) < 1e-20
    grid = np.linspace(0, 1, 201)
    vals = [delta_bloch(m) for m in grid]
    assert np.all(np.diff(vals) >= 0)


def test_delta_bloch_mdi():
    assert delta_bloch_mdi(0, 0) == 0.0
    t = 2e-3
    assert delta_bloch_mdi(1e-3, 1e-3) == pytest.approx(0.5 * (1 - math.exp(-t) * math.cos(t / 2) ** 2), rel=1e-14)
    assert delta_bloch_mdi(1e-3, 5e-4) == delta_bloch_mdi(5e-4, 1e-3)


def test_kernel_and_preconditioner():
    reg0 = register_state(build_bb84(), 0.0)
    ker = register_kernel(reg0)
    assert ker is not None and np.allclose(ker @ reg0, 0, atol=1e-14)
    assert register_kernel(register_state(build_bb84(), 0.1)) is None
    t = register_preconditioner(reg0, 3)
    assert t.shape == (12, 12)
    assert np.linalg.cond(t) < 1e8
