"""Certified minimization of the key-rate objective over a constraint set.

Step one runs Frank-Wolfe on ``f`` to get a near-optimal state (an upper
bound on the minimum).  Step two linearizes ``f`` at that state and solves
the resulting semidefinite program; its dual certificate turns the
linearization into a lower bound valid for every feasible state, by
convexity of ``f``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .hermitian import ValidationError, check_hermitian, hermitize
from .sdp import BlockSDP, SDPError, certified_dual_bound, solve_sdp

EPSILON = 1e-9
FW_TOL = 1e-4
FW_MAX_ITER = 300
LINE_SEARCH_EVALS = 30
SUBPROBLEM_TOL = 1e-9
CERTIFY_TOL = 1e-9
_INTERVAL_AS_EQUALITY = 1e-13


class InfeasibleConstraints(ValidationError):
    """The constraint set admits no density operator."""


class NumericalFailure(RuntimeError):
    """The subproblem solver could not produce a usable certificate."""


@dataclass
class ConstraintSet:
    """Linear constraints on a density operator.

    ``blocks`` lists, for each diagonal block of the admissible states, the
    full-space indices it occupies.  All operators must be block diagonal
    with respect to this layout.  Unit trace is always imposed.
    """

    dim: int
    equalities: list = field(default_factory=list)  # (operator, value, name)
    intervals: list = field(default_factory=list)  # (operator, lower, upper, name)
    blocks: tuple | None = None
    precondition: np.ndarray | None = None  # T with rho = T omega T^dagger inside the solver

    def __post_init__(self):
        if self.blocks is None:
            self.blocks = (np.arange(self.dim),)
        self.blocks = tuple(np.asarray(b, dtype=int) for b in self.blocks)
        sizes = {b.size for b in self.blocks}
        covered = np.sort(np.concatenate(self.blocks))
        if len(sizes) != 1 or not np.array_equal(covered, np.arange(self.dim)):
            raise ValidationError("blocks must be equal-sized and partition the index set")
        if self.precondition is not None:
            t = np.asarray(self.precondition, dtype=complex)
            if t.shape != (self.dim, self.dim) or np.linalg.cond(t) > 1e14:
                raise ValidationError("preconditioner must be an invertible dim x dim matrix")
            self.precondition = t

    @classmethod
    def interleaved(cls, dim: int, n_blocks: int, **kw) -> "ConstraintSet":
        """Blocks of a classical register stored as the last tensor factor."""
        return cls(dim=dim, blocks=tuple(np.arange(c, dim, n_blocks) for c in range(n_blocks)), **kw)

    def add_equality(self, op, value: float, name: str = "") -> None:
        op = self._check_op(op)
        self.equalities.append((op, float(value), name or f"eq{len(self.equalities)}"))

    def add_interval(self, op, lower: float, upper: float, name: str = "") -> None:
        op = self._check_op(op)
        if not lower <= upper:
            raise ValidationError(f"interval {name!r} is empty: [{lower}, {upper}]")
        self.intervals.append((op, float(lower), float(upper), name or f"iv{len(self.intervals)}"))

    def _check_op(self, op) -> np.ndarray:
        op = check_hermitian(op)
        if op.shape != (self.dim, self.dim):
            raise ValidationError(f"operator must be {self.dim}x{self.dim}, got {op.shape}")
        if len(self.blocks) > 1:
            mask = np.zeros((self.dim, self.dim), dtype=bool)
            for b in self.blocks:
                mask[np.ix_(b, b)] = True
            if np.max(np.abs(op[~mask]), initial=0.0) > 1e-12:
                raise ValidationError("operator is not block diagonal in the declared layout")
        return op

    # -- block conversions ------------------------------------------------

    def to_blocks(self, m: np.ndarray) -> np.ndarray:
        return np.stack([m[np.ix_(b, b)] for b in self.blocks])

    def from_blocks(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for b, xb in zip(self.blocks, x):
            out[np.ix_(b, b)] = xb
        return out

    def residuals(self, rho: np.ndarray) -> dict:
        """Signed violation of every constraint at ``rho`` (0 when satisfied)."""
        out = {"trace": float(np.real(np.trace(rho))) - 1.0}
        for op, val, name in self.equalities:
            out[name] = float(np.real(np.vdot(op, rho))) - val
        for op, lo, hi, name in self.intervals:
            v = float(np.real(np.vdot(op, rho)))
            out[name] = min(v - lo, 0.0) + max(v - hi, 0.0)
        return out

    def max_violation(self, rho: np.ndarray) -> float:
        return max(abs(v) for v in self.residuals(rho).values())

    def is_feasible(self, rho: np.ndarray, tol: float = 1e-8) -> bool:
        w = np.linalg.eigvalsh(hermitize(rho))
        return bool(w[0] >= -tol and self.max_violation(rho) <= tol)

    def relaxed(self, drop: Sequence[str]) -> "ConstraintSet":
        """Copy without the named constraints."""
        drop = set(drop)
        return ConstraintSet(
            dim=self.dim,
            equalities=[e for e in self.equalities if e[2] not in drop],
            intervals=[i for i in self.intervals if i[3] not in drop],
            blocks=self.blocks,
            precondition=self.precondition,
        )


@dataclass
class _Program:
    """A ConstraintSet compiled to block SDP form (objective filled in per solve).

    The solver variable ``X`` relates to the state by
    ``rho = T V X V^dagger T^dagger`` blockwise: ``T`` is the optional
    preconditioner and ``V`` an isometry onto the smallest face found from
    zero-valued PSD equality constraints.  ``trace_value`` is ``Tr X`` on
    the feasible set, verified by writing the identity as a combination of
    equality constraints.
    """

    A: np.ndarray
    A_lp: np.ndarray
    b: np.ndarray
    names: list
    slack_rows: np.ndarray  # row of each slack column
    slack_sign: np.ndarray  # coefficient of each slack column
    embed: np.ndarray  # (k, n, r) = T V per block
    trace_value: float

    def reduce(self, m_blocks: np.ndarray) -> np.ndarray:
        e = self.embed
        return hermitize(np.conj(np.swapaxes(e, -1, -2)) @ m_blocks @ e)

    def expand(self, x: np.ndarray) -> np.ndarray:
        e = self.embed
        return e @ x @ np.conj(np.swapaxes(e, -1, -2))


_ZERO_VALUE = 1e-14


def _face(zero_blocks: list, k: int, n: int) -> np.ndarray:
    faces = []
    for c in range(k):
        v = np.eye(n, dtype=complex)
        for op in zero_blocks:
            blk = op[c]
            red = hermitize(v.conj().T @ blk @ v)
            w, u = np.linalg.eigh(red)
            scale = float(np.max(np.abs(blk)))
            if scale == 0.0 or w[-1] <= 1e-12 * scale or w[0] < -1e-12 * scale:
                # vanishes on the face (no information) or indefinite (no support information)
                continue
            v = v @ u[:, w <= 1e-12 * scale]
        faces.append(v)
    ranks = {f.shape[1] for f in faces}
    if len(ranks) != 1 or 0 in ranks:
        # unequal or empty faces: keep the full blocks
        return np.broadcast_to(np.eye(n, dtype=complex), (k, n, n)).copy()
    return np.stack(faces)


def _compile(cons: ConstraintSet) -> _Program:
    eye = np.eye(cons.dim, dtype=complex)
    rows = [(eye, 1.0, "trace", 0.0)]
    zero = []
    for op, val, name in cons.equalities:
        rows.append((op, val, name, 0.0))
        if abs(val) <= _ZERO_VALUE:
            zero.append(op)
    for op, lo, hi, name in cons.intervals:
        if hi - lo <= _INTERVAL_AS_EQUALITY:
            rows.append((op, 0.5 * (lo + hi), name, 0.0))
            if abs(hi) <= _ZERO_VALUE:
                zero.append(op)
            continue
        # on unit-trace states <op, X> already lies in [lambda_min, lambda_max]
        w = np.linalg.eigvalsh(hermitize(op))
        if lo > w[0]:
            rows.append((op, lo, f"{name}:lower", -1.0))
        if hi < w[-1]:
            rows.append((op, hi, f"{name}:upper", 1.0))
    k = len(cons.blocks)
    n = cons.blocks[0].size
    t = cons.to_blocks(cons.precondition) if cons.precondition is not None else np.broadcast_to(eye[:n, :n], (k, n, n))
    t_h = np.conj(np.swapaxes(t, -1, -2))
    face = _face([t_h @ cons.to_blocks(op) @ t for op in zero], k, n)
    embed = t @ face
    e_h = np.conj(np.swapaxes(embed, -1, -2))
    blocks = np.stack([hermitize(e_h @ cons.to_blocks(r[0]) @ embed) for r in rows])
    rhs = np.array([r[1] for r in rows])
    signs = np.array([r[3] for r in rows])
    is_eq = signs == 0
    a_eq, b_eq = _orthonormal_equalities(blocks[is_eq], rhs[is_eq])
    iv = np.flatnonzero(~is_eq)
    a = np.concatenate([a_eq, blocks[iv]])
    b = np.concatenate([b_eq, rhs[iv]])
    names = [f"equalities[{i}]" for i in range(a_eq.shape[0])] + [rows[i][2] for i in iv]
    a_lp = np.zeros((a.shape[0], iv.size))
    slack_rows = a_eq.shape[0] + np.arange(iv.size)
    a_lp[slack_rows, np.arange(iv.size)] = signs[iv]
    trace_value = _trace_value(a_eq, b_eq)
    return _Program(
        A=a,
        A_lp=a_lp,
        b=b,
        names=names,
        slack_rows=slack_rows,
        slack_sign=signs[iv],
        embed=embed,
        trace_value=trace_value,
    )


_RANK_CUTOFF = 1e-7
_TRACE_REL_TOL = 1e-6


def _flatten(blocks: np.ndarray) -> np.ndarray:
    # real coordinates in which <A, X> = Re Tr(A X) is the Euclidean product
    flat = blocks.reshape(blocks.shape[0], -1)
    return np.hstack([flat.real, flat.imag])


def _orthonormal_equalities(blocks: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of the span of the equality operators, with matching values.

    Directions with relative singular value below ``_RANK_CUTOFF`` are
    treated as dependent; their right-hand sides must vanish (consistency).
    Dropping a genuinely independent but tiny direction would only relax
    the feasible set, which keeps every lower bound valid.
    """
    shape = blocks.shape[1:]
    if blocks.shape[0] == 0:
        return np.zeros((0,) + shape, dtype=complex), np.zeros(0)
    u, sv, vt = np.linalg.svd(_flatten(blocks), full_matrices=False)
    rank = int(np.sum(sv > _RANK_CUTOFF * sv[0]))
    proj = u.T @ rhs
    mismatch = float(np.max(np.abs(proj[rank:]), initial=0.0))
    if mismatch > 1e-8 * max(1.0, float(np.max(np.abs(rhs)))):
        raise InfeasibleConstraints(f"equality constraints are inconsistent (mismatch {mismatch:.3e})")
    b_new = proj[:rank] / sv[:rank]
    half = vt.shape[1] // 2
    a_new = (vt[:rank, :half] + 1j * vt[:rank, half:]).reshape((rank,) + shape)
    return hermitize(a_new), b_new


def _trace_value(a_eq: np.ndarray, b_eq: np.ndarray) -> float:
    """``Tr X`` implied by the (orthonormal) equality rows."""
    k, r, _ = a_eq.shape[1:]
    ident = _flatten(np.broadcast_to(np.eye(r, dtype=complex), (k, r, r))[None])[0]
    basis = _flatten(a_eq)
    coef = basis @ ident
    if np.linalg.norm(ident - basis.T @ coef) > 1e-8 * np.linalg.norm(ident):
        raise ValidationError("the trace of the solver variable is not fixed by the equality constraints")
    return float(coef @ b_eq)


def _problem(prog: _Program, c_blocks: np.ndarray) -> BlockSDP:
    return BlockSDP(C=c_blocks, A=prog.A, b=prog.b, c_lp=np.zeros(prog.A_lp.shape[1]), A_lp=prog.A_lp)


def _clip_multipliers(prog: _Program, y: np.ndarray) -> np.ndarray:
    # dual slack on a slack column is -sign * y_row; it must be nonnegative
    y = y.copy()
    for r, sgn in zip(prog.slack_rows, prog.slack_sign):
        y[r] = max(y[r], 0.0) if sgn < 0 else min(y[r], 0.0)
    return y


@dataclass(frozen=True)
class SubproblemResult:
    sigma: np.ndarray
    certified_min: float
    primal_value: float
    complementary_gap: float
    iterations: int
    status: str
    degraded: bool = False


def _infeasibility_message(cons: ConstraintSet, res, prog: _Program) -> str:
    x = res.X
    viol = np.abs(prog.b - np.real(np.einsum("mkij,kji->m", prog.A, x)) - prog.A_lp @ res.s)
    i = int(np.argmax(viol))
    return f"constraints appear infeasible; most violated: {prog.names[i]} (residual {viol[i]:.3e})"


def linearized_subproblem(
    grad: np.ndarray,
    constraints: ConstraintSet,
    tol: float = CERTIFY_TOL,
    _program: _Program | None = None,
) -> SubproblemResult:
    """Minimize ``Tr(grad sigma)`` over the constraint set.

    Returns the minimizer and a lower bound on the minimum certified by a
    clipped dual vector.  If the tight solve fails, a looser solve is tried
    and the result is marked ``degraded``.
    """
    grad = check_hermitian(grad, 1e-8)
    prog = _program or _compile(constraints)
    c = prog.reduce(constraints.to_blocks(hermitize(grad)))
    prob = _problem(prog, c)
    degraded = False
    try:
        res = solve_sdp(prob, tol=tol)
        if res.status != "optimal" and res.primal_residual > 1e-6:
            raise SDPError(res.status)
    except (SDPError, np.linalg.LinAlgError):
        degraded = True
        res = solve_sdp(prob, tol=max(tol, 1e-6), max_iter=150)
    if res.primal_residual > 1e-5 and res.dual_residual < 1e-6 and res.dual_value > res.primal_value + 1.0:
        raise InfeasibleConstraints(_infeasibility_message(constraints, res, prog))
    if res.primal_residual > 1e-4:
        raise InfeasibleConstraints(_infeasibility_message(constraints, res, prog))
    y = _clip_multipliers(prog, res.y)
    tv = prog.trace_value
    cert = certified_dual_bound(prob, y, (tv * (1 - _TRACE_REL_TOL), tv * (1 + _TRACE_REL_TOL)))
    sigma = constraints.from_blocks(prog.expand(res.X))
    sigma = hermitize(sigma / np.real(np.trace(sigma)))
    pval = float(np.real(np.vdot(grad, sigma)))
    return SubproblemResult(
        sigma=sigma,
        certified_min=cert,
        primal_value=pval,
        complementary_gap=pval - cert,
        iterations=res.iterations,
        status=res.status,
        degraded=degraded,
    )


def feasible_init(constraints: ConstraintSet, mix: float = 1e-10) -> np.ndarray:
    """An interior-leaning feasible density operator.

    Solves the feasibility problem with a zero objective (the iteration
    approaches a relative-interior point) and mixes in ``mix`` of the
    maximally mixed state so the minimum eigenvalue is at least ``mix / d``.
    """
    prog = _compile(constraints)
    k, _, r = prog.embed.shape
    res = solve_sdp(_problem(prog, np.zeros((k, r, r), dtype=complex)), tol=1e-10)
    rho = constraints.from_blocks(prog.expand(res.X))
    viol = constraints.max_violation(rho)
    if viol > 1e-7 or np.linalg.eigvalsh(rho)[0] < -1e-8:
        raise InfeasibleConstraints(_infeasibility_message(constraints, res, prog))
    rho = hermitize(rho)
    w, v = np.linalg.eigh(rho)
    rho = hermitize((v * np.maximum(w, 0.0)) @ v.conj().T)
    rho /= np.real(np.trace(rho))
    d = constraints.dim
    return hermitize((1.0 - mix) * rho + mix * np.eye(d) / d)


def perturb(rho: np.ndarray, eps: float = EPSILON) -> np.ndarray:
    d = rho.shape[0]
    return (1.0 - eps) * rho + eps * np.eye(d) / d


def golden_section(fn: Callable[[float], float], max_evals: int = LINE_SEARCH_EVALS) -> tuple[float, float]:
    """Minimize ``fn`` on ``[0, 1]``; returns ``(t, fn(t))`` with the endpoints included."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    f0, f1 = fn(0.0), fn(1.0)
    lo, hi = 0.0, 1.0
    a = hi - inv_phi * (hi - lo)
    b = lo + inv_phi * (hi - lo)
    fa, fb = fn(a), fn(b)
    best = min([(f0, 0.0), (f1, 1.0), (fa, a), (fb, b)])
    for _ in range(max_evals - 4):
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - inv_phi * (hi - lo)
            fa = fn(a)
            best = min(best, (fa, a))
        else:
            lo, a, fa = a, b, fb
            b = lo + inv_phi * (hi - lo)
            fb = fn(b)
            best = min(best, (fb, b))
    return best[1], best[0]


@dataclass(frozen=True)
class SolverReport:
    rho_star: np.ndarray
    f_upper: float
    f_lower_certified: float
    gap: float
    iterations: int
    fw_gap: float
    epsilon: float
    perturbation_shift: float  # |f(rho_eps) - f(rho)| at the final iterate
    perturbation_bound: float  # analytic bound on that shift
    subproblem_gap: float  # primal minus certified value of the final subproblem
    degraded: bool
    trace: tuple = ()  # (iteration, f, fw_gap, step)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "f", "fw_gap", "step"])
        for row in self.trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _h2(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return float(-x * np.log2(x) - (1 - x) * np.log2(1 - x))


def perturbation_bound(eps: float, dim_out: int) -> float:
    """Continuity bound on ``|f(rho_eps) - f(rho)|`` for ``f = D(G rho || Z G rho)``.

    ``f`` is a conditional-entropy difference on the output, so a trace-distance
    change of at most ``eps`` moves it by at most ``2 eps log2(d) + 2 h2(eps)``
    (Alicki-Fannes-Winter style).
    """
    e = min(eps, 0.5)
    return 2.0 * e * np.log2(dim_out) + 2.0 * _h2(e)


def certified_lower_bound(
    rho_star: np.ndarray,
    constraints: ConstraintSet,
    objective: Callable,
    gradient: Callable,
    eps: float = EPSILON,
    _program: _Program | None = None,
) -> tuple[float, SubproblemResult]:
    """``f(rho_eps) - Tr(grad rho_eps) + certified_min`` with ``grad`` taken at ``rho_eps``.

    By convexity of ``f`` this is at most ``f(sigma)`` for every feasible
    ``sigma``; no correction for the perturbation is needed because the
    linearization point itself is ``rho_eps``.
    """
    rho_eps = perturb(rho_star, eps)
    g = gradient(rho_eps)
    sub = linearized_subproblem(g, constraints, _program=_program)
    value = objective(rho_eps) - float(np.real(np.vdot(g, rho_eps))) + sub.certified_min
    return value, sub


def frank_wolfe(
    objective: Callable,
    gradient: Callable,
    constraints: ConstraintSet,
    tol: float = FW_TOL,
    max_iter: int = FW_MAX_ITER,
    rho0: np.ndarray | None = None,
    eps: float = EPSILON,
    tol_scale: Callable | None = None,
    dim_out: int | None = None,
    keep_trace: bool = False,
    inner_steps: int = 20,
) -> SolverReport:
    """Frank-Wolfe descent followed by a certified lower bound.

    Parameters
    ----------
    objective, gradient : callable
        ``f`` and its gradient as functions of the density operator.
    tol : float
        Stop when the Frank-Wolfe gap falls below ``tol * tol_scale(rho)``
        (``tol_scale`` defaults to 1).
    rho0 : ndarray, optional
        Starting point; computed with :func:`feasible_init` when omitted.
    inner_steps : int
        Pairwise (away-step) moves between stored subproblem solutions made
        after each subproblem; they need no new semidefinite solve.
    """
    prog = _compile(constraints)
    rho = feasible_init(constraints) if rho0 is None else hermitize(np.asarray(rho0, dtype=complex))
    f_cur = objective(perturb(rho, eps))
    # the iterate is kept as a convex combination of subproblem solutions ("atoms")
    atoms = [rho]
    weights = np.array([1.0])
    trace = []
    fw_gap = np.inf
    it = 0
    degraded = False

    def line(direction, t_max):
        t, f_new = golden_section(lambda u: objective(perturb(rho + u * t_max * direction, eps)))
        return t * t_max, f_new

    for it in range(max_iter):
        g = gradient(perturb(rho, eps))
        try:
            sub = linearized_subproblem(g, constraints, tol=SUBPROBLEM_TOL, _program=prog)
        except (SDPError, np.linalg.LinAlgError) as exc:
            raise NumericalFailure(f"subproblem failed at iteration {it}: {exc}") from exc
        degraded |= sub.degraded
        fw_gap = float(np.real(np.vdot(g, rho - sub.sigma)))
        scale = tol_scale(rho) if tol_scale is not None else 1.0
        if fw_gap < tol * scale:
            trace.append((it, f_cur, fw_gap, 0.0))
            break
        atoms.append(sub.sigma)
        weights = np.append(weights, 0.0)
        step_total = 0.0
        # pairwise steps over the atom set; the first one always uses the new atom
        for inner in range(inner_steps):
            if inner:
                g = gradient(perturb(rho, eps))
            scores = np.real(np.einsum("kij,ij->k", np.conj(np.stack(atoms)), g))
            toward = len(atoms) - 1 if inner == 0 else int(np.argmin(scores))
            active = np.flatnonzero(weights > 0)
            away = int(active[np.argmax(scores[active])])
            if inner and scores[away] - scores[toward] < 0.1 * tol * scale:
                break
            if away == toward:
                break
            direction = atoms[toward] - atoms[away]
            t, f_new = line(direction, weights[away])
            if t <= 0.0 or f_new >= f_cur:
                break
            weights[toward] += t
            weights[away] -= t
            if weights[away] <= 1e-15:
                weights[away] = 0.0
            rho = hermitize(sum(w * a for w, a in zip(weights, atoms) if w > 0))
            f_cur = f_new
            step_total += t
        keep = weights > 0
        atoms = [a for a, k in zip(atoms, keep) if k]
        weights = weights[keep] / weights[keep].sum()
        trace.append((it, f_cur, fw_gap, step_total))
        if step_total == 0.0:
            break
    else:
        it = max_iter

    lower, sub = certified_lower_bound(rho, constraints, objective, gradient, eps, _program=prog)
    degraded |= sub.degraded
    f_plain = objective(rho)
    d_out = dim_out or rho.shape[0]
    upper = min(f_cur, f_plain)
    return SolverReport(
        rho_star=rho,
        f_upper=upper,
        f_lower_certified=lower,
        gap=upper - lower,
        iterations=it,
        fw_gap=fw_gap,
        epsilon=eps,
        perturbation_shift=abs(f_cur - f_plain),
        perturbation_bound=perturbation_bound(eps, d_out),
        subproblem_gap=sub.complementary_gap,
        degraded=degraded,
        trace=tuple(trace) if keep_trace else (),
    )
