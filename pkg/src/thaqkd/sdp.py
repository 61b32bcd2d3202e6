"""Small dense semidefinite programs with dual certificates.

Problems have the standard block form::

    minimize    <C, X> + c_lp . s
    subject to  <A_i, X> + a_lp[i] . s = b_i      (i = 1..m)
                X = diag(X_1, ..., X_k) >= 0,  s >= 0

where the ``k`` PSD blocks share one size ``n`` (batched as a ``(k, n, n)``
array) and ``s`` is a vector of nonnegative slack variables.  The solver is
an infeasible primal-dual interior-point method using the HKM search
direction with Mehrotra's predictor-corrector step.

Any dual vector ``y`` gives a bound: with ``Z = C - sum_i y_i A_i``,
``<C, X> >= b.y + lambda_min(Z) * Tr X`` whenever the slack part of ``Z`` is
nonnegative.  Callers that know ``Tr X`` on the feasible set (unit trace
here) turn this into a certified lower bound that does not depend on how
accurately the iteration converged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .hermitian import dag, hermitize


class SDPError(RuntimeError):
    """Raised when the interior-point iteration breaks down."""


@dataclass
class BlockSDP:
    """Problem data; see the module docstring for the layout."""

    C: np.ndarray  # (k, n, n) Hermitian
    A: np.ndarray  # (m, k, n, n) Hermitian
    b: np.ndarray  # (m,)
    c_lp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    A_lp: np.ndarray | None = None  # (m, n_lp)

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=complex)
        self.A = np.asarray(self.A, dtype=complex)
        self.b = np.asarray(self.b, dtype=float)
        self.c_lp = np.asarray(self.c_lp, dtype=float)
        m = self.A.shape[0]
        if self.A_lp is None:
            self.A_lp = np.zeros((m, self.c_lp.size))
        self.A_lp = np.asarray(self.A_lp, dtype=float)
        if self.C.ndim != 3 or self.A.shape[1:] != self.C.shape:
            raise ValueError("block shapes of C and A disagree")
        if self.b.shape != (m,) or self.A_lp.shape != (m, self.c_lp.size):
            raise ValueError("constraint counts disagree")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def order(self) -> int:
        k, n, _ = self.C.shape
        return k * n + self.c_lp.size

    def apply_A(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        return np.real(np.einsum("mkij,kji->m", self.A, x)) + self.A_lp @ s

    def apply_At(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.einsum("m,mkij->kij", y, self.A), self.A_lp.T @ y

    def dual_slack(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ay, ay_lp = self.apply_At(y)
        return hermitize(self.C - ay), self.c_lp - ay_lp


@dataclass
class SDPResult:
    X: np.ndarray
    s: np.ndarray
    y: np.ndarray
    primal_value: float
    dual_value: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str  # "optimal", "max_iter" or "stalled"

    @property
    def gap(self) -> float:
        return self.primal_value - self.dual_value


def _max_step(x: np.ndarray, dx: np.ndarray, s: np.ndarray, ds: np.ndarray) -> float:
    """Largest ``a <= 1`` with ``x + a dx >= 0`` (PSD blocks) and ``s + a ds >= 0``."""
    alpha = 1.0
    # PSD: reduce to the generalized eigenproblem via the Cholesky factor of x
    for xb, dxb in zip(x, dx):
        try:
            lc = np.linalg.cholesky(xb)
            li = sla.solve_triangular(lc, np.eye(lc.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            # lost definiteness to rounding: refuse to move this block further
            return 0.0
        w = np.linalg.eigvalsh(hermitize(li @ dxb @ dag(li)))
        if w[0] < 0:
            alpha = min(alpha, -1.0 / w[0])
    neg = ds < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-s[neg] / ds[neg])))
    return alpha


def _inv_psd(x: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(x)
    return hermitize((v / w[..., None, :]) @ dag(v))


def solve_sdp(
    prob: BlockSDP,
    tol: float = 1e-9,
    max_iter: int = 80,
    trace_bound: float | None = None,
    stall_window: int = 8,
    stall_floor: float = 1e-6,
) -> SDPResult:
    """Primal-dual interior-point solve.

    ``trace_bound`` is an a-priori bound on ``Tr X`` over the feasible set; it
    only sets the scale of the starting point.  The iteration stops early when
    the worst of the primal residual, dual residual and relative gap has not
    improved by 10% within ``stall_window`` iterations after reaching
    ``stall_floor``; the best iterate seen is returned.
    """
    k, n, _ = prob.C.shape
    n_lp = prob.c_lp.size
    eye = np.broadcast_to(np.eye(n, dtype=complex), (k, n, n))
    scale_x = (trace_bound or 1.0) / max(k * n, 1)
    scale_s = max(1.0, float(np.max(np.abs(prob.C), initial=0.0)), float(np.max(np.abs(prob.c_lp), initial=0.0)))
    x = eye * scale_x
    s = np.full(n_lp, scale_x)
    y = np.zeros(prob.m)
    zx = eye * scale_s
    zs = np.full(n_lp, scale_s)

    b_norm = 1.0 + float(np.max(np.abs(prob.b), initial=0.0))
    c_norm = 1.0 + scale_s
    a_flat = prob.A.reshape(prob.m, k, n, n)
    status = "max_iter"
    it = 0
    best = None
    best_merit = np.inf
    since_best = 0
    for it in range(1, max_iter + 1):
        rp = prob.b - prob.apply_A(x, s)
        ay, ay_lp = prob.apply_At(y)
        rd = hermitize(prob.C - ay - zx)
        rd_lp = prob.c_lp - ay_lp - zs
        mu = (float(np.real(np.einsum("kij,kji->", x, zx))) + float(s @ zs)) / prob.order
        pval = float(np.real(np.einsum("kij,kji->", prob.C, x))) + float(prob.c_lp @ s)
        dval = float(prob.b @ y)
        p_res = float(np.max(np.abs(rp), initial=0.0)) / b_norm
        d_res = max(float(np.max(np.abs(rd))), float(np.max(np.abs(rd_lp), initial=0.0))) / c_norm
        rel_gap = abs(pval - dval) / (1.0 + abs(pval) + abs(dval))
        merit = max(p_res, d_res, rel_gap)
        if merit < 0.9 * best_merit:
            since_best = 0
        else:
            since_best += 1
        if merit < best_merit:
            best_merit = merit
            best = (x, s, y, pval, dval, p_res, d_res)
        if p_res < tol and d_res < tol and rel_gap < tol:
            status = "optimal"
            break
        if since_best >= stall_window and best_merit < stall_floor:
            # rounding floor reached: further iterations only shuffle the residuals
            status = "stalled"
            break

        zinv = _inv_psd(zx)
        zs_inv = 1.0 / zs
        # Schur complement M_ij = Re Tr(A_i X A_j Z^-1) + a_i diag(s/zs) a_j
        w = x[None] @ a_flat @ zinv[None]
        mmat = np.real(w.reshape(prob.m, -1) @ a_flat.reshape(prob.m, -1).conj().T)
        mmat += (prob.A_lp * (s * zs_inv)) @ prob.A_lp.T
        mmat = 0.5 * (mmat + mmat.T)
        try:
            factor = sla.cho_factor(mmat, lower=True)
        except np.linalg.LinAlgError:
            mmat += np.eye(prob.m) * 1e-14 * max(1.0, float(np.max(np.abs(np.diag(mmat)))))
            try:
                factor = sla.cho_factor(mmat, lower=True)
            except np.linalg.LinAlgError:
                status = "stalled"
                break

        def direction(target_x, target_s):
            # Newton step for X Z = target: A(dX) = rp, A*(dy) + dZ = rd,
            # dX + H(X dZ Z^-1) = target - X (elementwise analogue on the slacks)
            rhs = rp - prob.apply_A(
                target_x - x - hermitize(x @ rd @ zinv), target_s - s - s * rd_lp * zs_inv
            )
            dy = sla.cho_solve(factor, rhs)
            at_dy, at_dy_lp = prob.apply_At(dy)
            dz = hermitize(rd - at_dy)
            dz_lp = rd_lp - at_dy_lp
            dx = hermitize(target_x - x - x @ dz @ zinv)
            ds_ = target_s - s - s * dz_lp * zs_inv
            return dx, ds_, dy, dz, dz_lp

        # predictor
        dx, ds_, dy, dz, dz_lp = direction(np.zeros_like(x), np.zeros_like(s))
        ap = _max_step(x, dx, s, ds_)
        ad = _max_step(zx, dz, zs, dz_lp)
        mu_aff = (
            float(np.real(np.einsum("kij,kji->", x + ap * dx, zx + ad * dz))) + float((s + ap * ds_) @ (zs + ad * dz_lp))
        ) / prob.order
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        # corrector
        tx = sigma * mu * zinv - hermitize(dx @ dz @ zinv)
        ts = sigma * mu * zs_inv - ds_ * dz_lp * zs_inv
        dx, ds_, dy, dz, dz_lp = direction(tx, ts)
        ap = min(1.0, 0.98 * _max_step(x, dx, s, ds_))
        ad = min(1.0, 0.98 * _max_step(zx, dz, zs, dz_lp))
        x = hermitize(x + ap * dx)
        s = s + ap * ds_
        y = y + ad * dy
        zx = hermitize(zx + ad * dz)
        zs = zs + ad * dz_lp
        if ap < 1e-10 and ad < 1e-10:
            status = "stalled"
            break
    x, s, y, pval, dval, p_res, d_res = best
    return SDPResult(
        X=x,
        s=s,
        y=y,
        primal_value=pval,
        dual_value=dval,
        primal_residual=p_res,
        dual_residual=d_res,
        iterations=it,
        status=status,
    )


def certified_dual_bound(prob: BlockSDP, y: np.ndarray, trace_value) -> float:
    """Lower bound on the primal minimum from an arbitrary dual vector.

    ``trace_value`` is ``Tr X`` on the feasible set, either exact or as an
    enclosing interval ``(lo, hi)``.  The slack part of the dual residual
    must be nonnegative; callers clip multipliers beforehand.
    """
    zx, zs = prob.dual_slack(y)
    if np.any(zs < -1e-15):
        raise SDPError("dual slack on nonnegative variables is negative; clip the multipliers first")
    lo, hi = (trace_value, trace_value) if np.isscalar(trace_value) else trace_value
    lam = float(np.min(np.linalg.eigvalsh(zx)))
    return float(prob.b @ y) + min(lam * lo, lam * hi)
