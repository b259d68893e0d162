"""Linear objectives over the probability simplex intersected with one
quadratic (squared-MMD) ball.

These are the inner problems of robust dynamic programming: minimize (the
adversary) or maximize (the optimistic re-evaluation) ``values @ gamma``
subject to ``gamma`` on the simplex and

    q(gamma) = gamma' K1 gamma - 2 lin' gamma + const <= eps^2.

The solver is a Lagrangian dual bisection on the single quadratic
constraint.  For a fixed multiplier the inner problem is a convex QP over
the simplex, solved by accelerated projected gradient with exact
(sort-based) simplex projection; the outer bisection drives the
constraint residual to zero or detects an interior optimum at multiplier
zero.  Every reported objective is *certified*: for a minimization it is
a dual lower bound (valid whatever the iterate quality), for a
maximization the negation of one, so the value-iteration certificates
never depend on optimizer luck.

Solver instances are independent; batches can run on any worker pool as
long as aggregation order is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import InfeasibilityError, InputError

if TYPE_CHECKING:  # only for annotations; no runtime dependency
    from .abstraction import AmbiguityData


@dataclass
class QclpProblem:
    """One inner optimization: current value vector, ambiguity data, sense."""

    values: np.ndarray
    data: "AmbiguityData"
    sense: str = "min"
    tol_obj: float = 1e-6
    tol_feas: float = 1e-8
    max_inner: int = 4000
    max_bisections: int = 200
    warm: tuple | None = None  # (gamma, lam) from a previous sweep

    def __post_init__(self):
        if self.sense not in ("min", "max"):
            raise InputError(f"sense must be 'min' or 'max', got {self.sense!r}")
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.data.n_states:
            raise InputError(
                f"value vector length {self.values.size} != "
                f"{self.data.n_states} states"
            )


@dataclass
class QclpSolution:
    gamma: np.ndarray
    objective: float
    dual_lambda: float
    status: str  # 'optimal' | 'budget-exhausted-certified'
    inner_iterations: int = 0
    gap: float = 0.0


def simplex_project(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(y - theta, 0.0)


def quadratic_value(data, gamma: np.ndarray) -> float:
    """q(gamma) for the ambiguity membership constraint."""
    g = np.asarray(gamma, dtype=float).ravel()
    return float(g @ (data.center_gram @ g) - 2.0 * (data.lin @ g) + data.const)


def kkt_residual(data, values, gamma, lam: float, active_tol: float = 1e-10) -> float:
    """Norm of the projection of -(values + lam * grad q) onto the simplex
    tangent cone at ``gamma``.

    Zero at a KKT point of the penalized problem.  The projection solves a
    1-D waterfilling problem over the multiplier of the sum constraint.
    """
    g = np.asarray(gamma, dtype=float).ravel()
    grad = np.asarray(values, dtype=float) + lam * (
        2.0 * (data.center_gram @ g) - 2.0 * data.lin
    )
    active = g <= active_tol
    free = ~active
    n_free = int(np.count_nonzero(free))
    if n_free == 0:  # cannot happen for a simplex point; all mass active
        free = np.ones_like(active)
        active = ~free
        n_free = free.size
    # d_i = theta - grad_i on free coords, max(0, theta - grad_i) on active;
    # pick theta so the descent direction sums to zero
    sum_free = float(np.sum(grad[free]))
    act_sorted = np.sort(grad[active]) if np.any(active) else np.empty(0)
    theta = sum_free / n_free
    for k in range(act_sorted.size + 1):
        theta = (sum_free + float(np.sum(act_sorted[:k]))) / (n_free + k)
        lower_ok = k == 0 or theta > act_sorted[k - 1]
        upper_ok = k == act_sorted.size or theta <= act_sorted[k]
        if lower_ok and upper_ok:
            break
    d = np.where(free, theta - grad, np.maximum(0.0, theta - grad))
    return float(np.linalg.norm(d))


def _fw_gap(grad: np.ndarray, gamma: np.ndarray) -> float:
    """Frank-Wolfe gap over the simplex; bounds the suboptimality of the
    penalized convex objective from above."""
    return float(grad @ gamma - np.min(grad))


def _apg(data, c_lin, lam, x0, max_iter, fw_tol, kkt_tol=None):
    """Minimize c_lin @ g + lam * q(g) over the simplex with FISTA.

    Returns (gamma, objective, fw_gap, iterations).
    """
    k1 = data.center_gram
    g0 = c_lin - 2.0 * lam * data.lin
    offset = lam * data.const

    def f_and_grad(g):
        k1g = k1 @ g
        grad = g0 + 2.0 * lam * k1g
        val = float(g @ g0) + lam * float(g @ k1g) + offset
        return val, grad

    lip = 2.0 * lam * data.k1_top_eig + 1e-30
    step = 1.0 / lip
    x = simplex_project(np.asarray(x0, dtype=float).copy())
    y = x.copy()
    t = 1.0
    f_x, grad_x = f_and_grad(x)
    best = (x, f_x, grad_x)
    it = 0
    for it in range(1, max_iter + 1):
        _, grad_y = f_and_grad(y)
        x_new = simplex_project(y - step * grad_y)
        f_new, grad_new = f_and_grad(x_new)
        if f_new > f_x:  # adaptive restart on non-monotone step
            y = x.copy()
            t = 1.0
            _, grad_y = f_and_grad(y)
            x_new = simplex_project(y - step * grad_y)
            f_new, grad_new = f_and_grad(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, f_x, grad_x, t = x_new, f_new, grad_new, t_new
        if f_x < best[1]:
            best = (x, f_x, grad_x)
        if it % 5 == 0 or it == max_iter:
            gap = _fw_gap(grad_x, x)
            if gap <= fw_tol and (
                kkt_tol is None or kkt_residual(data, c_lin, x, lam) <= kkt_tol
            ):
                break
    x, f_x, grad_x = best
    return x, f_x, _fw_gap(grad_x, x), it


def _min_quadratic(data, tol=None, max_iter=6000):
    """Minimum of q over the simplex with a certified lower bound.

    Returns (value, gamma, lower_bound); cached on the data object since
    it doubles as the feasibility certificate and a warm-start anchor.
    """
    if data.feas_cache is not None:
        return data.feas_cache
    n = data.n_states
    if n == 1:
        g = np.ones(1)
        v = quadratic_value(data, g)
        data.feas_cache = (v, g, v)
        return data.feas_cache
    scale = max(1.0, abs(data.const), float(np.max(np.abs(data.lin))))
    if tol is None:
        tol = 1e-11 * scale
    x0 = np.full(n, 1.0 / n)
    gamma, f_val, gap, _ = _apg(
        data, np.zeros(n), 1.0, x0, max_iter, fw_tol=tol
    )
    value = quadratic_value(data, gamma)
    lower = max(f_val - gap, 0.0)  # q is a squared distance, never negative
    data.feas_cache = (value, gamma, lower)
    return data.feas_cache


def min_quadratic(data) -> float:
    """Minimal squared MMD between a center-supported distribution and the
    regressed embedding; the ambiguity set is nonempty iff this is <= eps^2."""
    value, _, _ = _min_quadratic(data)
    return max(value, 0.0)


def _vertex(c: np.ndarray) -> tuple[int, np.ndarray]:
    idx = int(np.argmin(c))  # lowest index among ties, deterministic
    e = np.zeros(c.size)
    e[idx] = 1.0
    return idx, e


def solve(problem: QclpProblem) -> QclpSolution:
    """Certified solve of one simplex/MMD-ball program.

    For ``sense='min'`` the reported objective is a dual lower bound on
    the true minimum; for ``sense='max'`` an upper bound on the true
    maximum.  In both cases the bound is within ``tol_obj`` of the true
    optimum on status 'optimal'.
    """
    data = problem.data
    n = data.n_states

    if data.pinned_vertex is not None:
        g = np.zeros(n)
        g[data.pinned_vertex] = 1.0
        return QclpSolution(
            gamma=g,
            objective=float(problem.values[data.pinned_vertex]),
            dual_lambda=0.0,
            status="optimal",
        )

    c = problem.values if problem.sense == "min" else -problem.values
    eps_sq = float(data.eps) ** 2
    feas_tol = problem.tol_feas * max(eps_sq, 1.0)

    def finish(gamma, lower_bound, lam, status, iters, gap):
        obj = lower_bound if problem.sense == "min" else -lower_bound
        return QclpSolution(
            gamma=np.maximum(gamma, 0.0),
            objective=float(obj),
            dual_lambda=float(lam),
            status=status,
            inner_iterations=iters,
            gap=float(gap),
        )

    if n == 1:
        g = np.ones(1)
        q1 = quadratic_value(data, g)
        if q1 > eps_sq + feas_tol:
            raise InfeasibilityError(
                "ambiguity set is empty (single state)", gap=q1 - eps_sq
            )
        return finish(g, float(c[0]), 0.0, "optimal", 0, 0.0)

    # unconstrained-over-simplex solution: if the LP vertex is inside the
    # ball the quadratic constraint is inactive and the answer is exact
    _, vert = _vertex(c)
    q_vert = quadratic_value(data, vert)
    if q_vert <= eps_sq + feas_tol:
        return finish(vert, float(c @ vert), 0.0, "optimal", 0, 0.0)

    q_min, gamma_feas, q_min_lb = _min_quadratic(data)
    if q_min_lb > eps_sq + feas_tol:
        raise InfeasibilityError(
            f"ambiguity set is empty: min quadratic {q_min_lb:.6g} > "
            f"eps^2 {eps_sq:.6g}",
            gap=q_min_lb - eps_sq,
        )
    if eps_sq - q_min <= 1e-12 * max(eps_sq, 1.0):
        # the feasible set is (numerically) the single minimal-quadratic
        # point; both senses evaluate there, so bounds coincide exactly
        return finish(gamma_feas, float(c @ gamma_feas), 0.0, "optimal", 0, 0.0)

    fw_tol = 0.25 * problem.tol_obj
    kkt_tol = 5.0 * problem.tol_obj

    total_iters = 0

    def solve_at(lam, x0):
        nonlocal total_iters
        gamma, f_val, gap, iters = _apg(
            data, c, lam, x0, problem.max_inner, fw_tol, kkt_tol
        )
        total_iters += iters
        lower = f_val - gap - lam * eps_sq  # certified bound on the dual value
        return gamma, quadratic_value(data, gamma), lower

    # bracket the multiplier: residual q(gamma(lam)) decreases with lam
    if problem.warm is not None:
        x_start, lam_probe = problem.warm
        x_start = np.asarray(x_start, dtype=float)
        lam_probe = max(float(lam_probe), 1e-12)
    else:
        x_start = gamma_feas
        spread = float(np.max(c) - np.min(c))
        lam_probe = max(spread, 1e-6) / max(eps_sq, 1e-12)

    best_lb = float(np.min(c))  # trivial certified bound over the simplex
    best_primal = np.inf
    best_gamma = gamma_feas
    best_lam = lam_probe

    def record(gamma, q_val, lower, lam):
        nonlocal best_lb, best_primal, best_gamma, best_lam
        if lower > best_lb:
            best_lb = lower
        if q_val <= eps_sq + feas_tol:
            primal = float(c @ gamma)
            if primal < best_primal:
                best_primal = primal
                best_gamma = gamma
                best_lam = lam

    lam_lo, lam_hi = 0.0, None
    lam = lam_probe
    x = x_start
    for _ in range(80):
        gamma, q_val, lower = solve_at(lam, x)
        record(gamma, q_val, lower, lam)
        x = gamma
        if q_val <= eps_sq:
            lam_hi = lam
            break
        lam_lo = lam
        lam *= 4.0
    if lam_hi is None:
        # multiplier ran away: fall back to the minimal-quadratic point
        # with the trivial certified bound
        return finish(
            gamma_feas, best_lb, lam, "budget-exhausted-certified",
            total_iters, float(c @ gamma_feas) - best_lb,
        )

    # shrink the lower edge when warm-started above the optimal multiplier
    while lam_lo == 0.0 and lam_hi > 1e-12:
        probe = lam_hi / 4.0
        gamma, q_val, lower = solve_at(probe, x)
        record(gamma, q_val, lower, probe)
        x = gamma
        if q_val <= eps_sq:
            lam_hi = probe
        else:
            lam_lo = probe
            break
        if probe < 1e-12:
            break

    status = "optimal"
    for _ in range(problem.max_bisections):
        if best_primal - best_lb <= problem.tol_obj:
            break
        lam = 0.5 * (lam_lo + lam_hi)
        gamma, q_val, lower = solve_at(lam, x)
        record(gamma, q_val, lower, lam)
        x = gamma
        if q_val > eps_sq:
            lam_lo = lam
        else:
            lam_hi = lam
    else:
        status = "budget-exhausted-certified"

    return finish(
        best_gamma, best_lb, best_lam, status, total_iters,
        best_primal - best_lb,
    )
