"""First-order solvers for the general smoothing objective

    min_{x in X}  V(R^{-1/2}(y - Cx)) + gamma * J(Q^{-1/2}(z - Ax)),

with V, J scalar losses applied blockwise.  Quadratic terms carry a 1/2
internally (argmin-invariant for the pure least-squares case).  Includes
projected subgradient descent, proximal gradient, FISTA, ADMM (generic
template and the l1-measurement specialization), and Chambolle-Pock in two
splittings: V1 keeps only matrix-vector products, V2 treats the quadratic
process term as a unit behind a factored block-tridiagonal solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import time

import numpy as np

from . import plq
from .plq import NonSmoothLoss, Unconstrained, project
from .statespace import StackedSystem
from . import blocktridiag as btd


class StepSizeViolation(Exception):
    """Chambolle-Pock step sizes violate sigma * tau * L^2 < 1."""


@dataclass(frozen=True)
class SmootherProblem:
    """The smoothing objective: measurement loss V, process loss J weighted
    by gamma, over a constraint set."""
    sys: StackedSystem
    V: object
    J: object
    gamma: float = 1.0
    constraints: object = Unconstrained()

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def with_gamma(self, gamma: float) -> "SmootherProblem":
        return replace(self, gamma=gamma)

    def with_measurements(self, keep) -> "SmootherProblem":
        return replace(self, sys=self.sys.drop_measurements(keep))


@dataclass
class SolverReport:
    """Final iterate plus per-iteration diagnostics."""
    x: np.ndarray
    iterations: int
    converged: bool
    reason: str
    objective: np.ndarray
    step_size: np.ndarray | None = None
    residual: np.ndarray | None = None
    wall_time: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _block_total(loss, res2d) -> float:
    if isinstance(loss, plq.GroupL2):
        return float(np.linalg.norm(res2d, axis=1).sum())
    return float(np.sum(plq.eval(loss, res2d)))


def objective(p: SmootherProblem, x: np.ndarray) -> float:
    """V(W_r(y - Cx)) + gamma J(W_q(z - Ax)); constraint indicator excluded."""
    rm = p.sys.meas_residual(x)
    rp = p.sys.proc_residual(x)
    return _block_total(p.V, rm) + p.gamma * _block_total(p.J, rp)


def _require_smooth(p):
    for loss in (p.V, p.J):
        if not isinstance(loss, (plq.Quadratic, plq.Huber)):
            raise NonSmoothLoss(
                f"{plq.format_loss(loss)} is not smooth; use a splitting or "
                "interior-point solver")


def grad_smooth(p: SmootherProblem, x: np.ndarray) -> np.ndarray:
    """Gradient of the smooth objective (V, J quadratic or Huber)."""
    _require_smooth(p)
    s = p.sys
    gm = plq.grad(p.V, s.meas_residual(x))
    gp = plq.grad(p.J, s.proc_residual(x))
    out = -s.apply_Ct(np.einsum("tij,tj->ti", s.W_r, gm).ravel())
    out -= p.gamma * s.apply_At(np.einsum("tij,tj->ti", s.W_q, gp).ravel())
    return out


def _subgrad(p: SmootherProblem, x: np.ndarray) -> np.ndarray:
    s = p.sys
    gm = np.atleast_2d(plq.subgradient(p.V, s.meas_residual(x)))
    gp = np.atleast_2d(plq.subgradient(p.J, s.proc_residual(x)))
    out = -s.apply_Ct(np.einsum("tij,tj->ti", s.W_r, gm).ravel())
    out -= p.gamma * s.apply_At(np.einsum("tij,tj->ti", s.W_q, gp).ravel())
    return out


def lipschitz_bound(p: SmootherProblem) -> float:
    """Upper estimate of || C^T R^-1 C + gamma A^T Q^-1 A ||_2 by power
    iteration (slightly inflated so downstream step sizes stay safe)."""
    op = btd.assemble_weighted(p.sys, 1.0, p.gamma)
    beta, _ = btd.power_iteration(op, op.dim, iters=500, tol=1e-10)
    return beta * (1.0 + 1e-4)


# ---------------------------------------------------------------------------
# subgradient descent
# ---------------------------------------------------------------------------

def harmonic_steps(kappa: int) -> float:
    return 1.0 / kappa


def optimal_steps(delta: float, L: float, K: int):
    """Constant step delta / (L sqrt(K)) minimizing the K-iteration bound."""
    alpha = delta / (L * np.sqrt(K))
    return lambda kappa: alpha


def solve_subgradient(p: SmootherProblem, max_iters: int = 10000,
                      step_rule=harmonic_steps, x0=None) -> SolverReport:
    """Projected subgradient method; tracks the best iterate seen.

    ``step_rule`` maps the 1-based iteration index to a step size.
    There is no descent guarantee and no stopping test besides the
    iteration budget.
    """
    x = np.zeros(p.sys.nx) if x0 is None else np.asarray(x0, dtype=float).copy()
    x = project(p.constraints, x)
    f_best = np.inf
    x_best = x.copy()
    objs = np.empty(max_iters)
    steps = np.empty(max_iters)
    times = np.empty(max_iters)
    t0 = time.perf_counter()
    for k in range(1, max_iters + 1):
        f = objective(p, x)
        if f < f_best:
            f_best, x_best = f, x.copy()
        g = _subgrad(p, x)
        alpha = float(step_rule(k))
        x = project(p.constraints, x - alpha * g)
        objs[k - 1] = f
        steps[k - 1] = alpha
        times[k - 1] = time.perf_counter() - t0
    return SolverReport(x=x_best, iterations=max_iters, converged=False,
                        reason="max_iters", objective=objs, step_size=steps,
                        wall_time=times, extras={"f_best": f_best})


# ---------------------------------------------------------------------------
# proximal gradient and FISTA
# ---------------------------------------------------------------------------

def _make_prox(p: SmootherProblem, beta: float, g_loss, g_weight: float):
    """Prox of the nonsmooth part at step 1/beta: the constraint projection,
    or a separable penalty g_weight * g_loss(x)."""
    if g_loss is None:
        return lambda y: project(p.constraints, y)
    if not isinstance(p.constraints, Unconstrained):
        raise ValueError("separable penalty and constraints cannot be combined")
    eta = g_weight / beta
    if isinstance(g_loss, plq.GroupL2):
        n = p.sys.n
        return lambda y: plq.prox(g_loss, eta, y.reshape(-1, n)).ravel()
    return lambda y: plq.prox(g_loss, eta, y)


def solve_prox_grad(p: SmootherProblem, eps: float = 1e-8,
                    max_iters: int = 5000, g_loss=None,
                    g_weight: float = 1.0) -> SolverReport:
    """Proximal gradient with step 1/beta; the nonsmooth part is the
    constraint indicator, or the separable penalty ``g_weight * g_loss(x)``.
    Stops on the fixed-point residual ||x - prox(x - grad/beta)|| <= eps.
    Monotone in the objective."""
    _require_smooth(p)
    beta = 1.05 * lipschitz_bound(p)
    prox_g = _make_prox(p, beta, g_loss, g_weight)
    x = prox_g(np.zeros(p.sys.nx))
    extra = (lambda x: g_weight * float(np.sum(plq.eval(g_loss, x)))) \
        if g_loss is not None else (lambda x: 0.0)
    objs, res, times = [], [], []
    t0 = time.perf_counter()
    converged = False
    for k in range(max_iters):
        g = grad_smooth(p, x)
        x_new = prox_g(x - g / beta)
        r = float(np.linalg.norm(x_new - x))
        x = x_new
        objs.append(objective(p, x) + extra(x))
        res.append(r)
        times.append(time.perf_counter() - t0)
        if r <= eps:
            converged = True
            break
    return SolverReport(x=x, iterations=len(objs), converged=converged,
                        reason="fixed_point" if converged else "max_iters",
                        objective=np.array(objs), residual=np.array(res),
                        wall_time=np.array(times),
                        extras={"beta": beta})


def solve_fista(p: SmootherProblem, eps: float = 1e-8,
                max_iters: int = 5000, g_loss=None,
                g_weight: float = 1.0) -> SolverReport:
    """FISTA: gradient steps from the extrapolated point with momentum
    s_k = (1 + sqrt(1 + 4 s_{k-1}^2)) / 2.  Not monotone; stops when the
    proximal step moves the extrapolated point by no more than eps."""
    _require_smooth(p)
    beta = 1.05 * lipschitz_bound(p)
    prox_g = _make_prox(p, beta, g_loss, g_weight)
    x = prox_g(np.zeros(p.sys.nx))
    extra = (lambda x: g_weight * float(np.sum(plq.eval(g_loss, x)))) \
        if g_loss is not None else (lambda x: 0.0)
    w = x.copy()
    s = 1.0
    objs, res, times = [], [], []
    t0 = time.perf_counter()
    converged = False
    for k in range(max_iters):
        g = grad_smooth(p, w)
        x_new = prox_g(w - g / beta)
        r = float(np.linalg.norm(x_new - w))
        s_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * s * s))
        w = x_new + ((s - 1.0) / s_new) * (x_new - x)
        x, s = x_new, s_new
        objs.append(objective(p, x) + extra(x))
        res.append(r)
        times.append(time.perf_counter() - t0)
        if r <= eps:
            converged = True
            break
    return SolverReport(x=x, iterations=len(objs), converged=converged,
                        reason="fixed_point" if converged else "max_iters",
                        objective=np.array(objs), residual=np.array(res),
                        wall_time=np.array(times),
                        extras={"beta": beta, "momentum_final": s})


# ---------------------------------------------------------------------------
# ADMM
# ---------------------------------------------------------------------------

def solve_admm_general(x_update, w_update, k1, k2, c, tau: float,
                       eps: float = 1e-8, max_iters: int = 10000,
                       x0=None, w0=None, k1t=None,
                       objective_fn=None) -> SolverReport:
    """ADMM on  min f(x) + g(w)  s.t.  K1 x + K2 w = c.

    ``x_update(u, w)`` returns argmin_x f(x) + u^T K1 x + tau/2 ||K1 x + K2 w - c||^2;
    ``w_update(u, x)`` the analogous w-step.  ``k1``/``k2`` apply the coupling
    operators, ``k1t`` applies K1^T (for the dual residual).  Terminates when
    primal residual ||K1 x + K2 w - c|| and dual residual
    ||tau K1^T K2 (w+ - w)|| both fall below eps.
    """
    c = np.asarray(c, dtype=float)
    u = np.zeros_like(c)
    w = np.zeros_like(c) if w0 is None else np.asarray(w0, dtype=float).copy()
    x = x0
    objs, res, times = [], [], []
    t0 = time.perf_counter()
    converged = False
    iters = 0
    for k in range(max_iters):
        iters = k + 1
        x = x_update(u, w)
        w_new = w_update(u, x)
        dw = k2(w_new) - k2(w)
        w = w_new
        primal = k1(x) + k2(w) - c
        u = u + tau * primal
        pr = float(np.linalg.norm(primal))
        dr = float(np.linalg.norm(tau * (k1t(dw) if k1t is not None else dw)))
        res.append(max(pr, dr))
        if objective_fn is not None:
            objs.append(objective_fn(x))
        times.append(time.perf_counter() - t0)
        if pr <= eps and dr <= eps:
            converged = True
            break
    return SolverReport(x=x, iterations=iters, converged=converged,
                        reason="residuals" if converged else "max_iters",
                        objective=np.array(objs), residual=np.array(res),
                        wall_time=np.array(times),
                        extras={"w": w, "u": u, "tau": tau})


def solve_admm_l1(p: SmootherProblem, tau: float = 1.0, eps: float = 1e-8,
                  max_iters: int = 10000) -> SolverReport:
    """ADMM for V = l1, J = quadratic, unconstrained, via the split
    w + R^{-1/2} C x = R^{-1/2} y.

    The x-update solves (gamma A^T Q^-1 A + tau C^T R^-1 C) x = rhs with a
    factorization computed once (O(N n^3)), then O(N n^2) per iteration;
    the w-update is soft-thresholding at 1/tau.
    """
    if not isinstance(p.V, plq.L1) or not isinstance(p.J, plq.Quadratic):
        raise NonSmoothLoss("solve_admm_l1 requires V = l1 and J = quadratic")
    if not isinstance(p.constraints, Unconstrained):
        raise ValueError("solve_admm_l1 is unconstrained")
    s = p.sys
    fac = btd.factor(btd.assemble_weighted(s, tau, p.gamma))
    rhs_proc = btd.assemble_rhs(s, 0.0, p.gamma)
    wy = np.einsum("tij,tj->ti", s.W_r, s.y).ravel()

    def k1(x):
        return np.einsum("tij,tj->ti", s.W_r,
                         (s.apply_C(x)).reshape(-1, s.m)).ravel()

    def k1t(v):
        return s.apply_Ct(np.einsum("tij,tj->ti", s.W_r,
                                    np.asarray(v).reshape(-1, s.m)).ravel())

    def x_update(u, w):
        rhs = rhs_proc + k1t(tau * wy - u - tau * w)
        return btd.solve_factored(fac, rhs)

    def w_update(u, x):
        return plq.soft_threshold(wy - k1(x) - u / tau, 1.0 / tau)

    return solve_admm_general(
        x_update, w_update, k1, lambda w: w, wy, tau, eps, max_iters,
        k1t=k1t, objective_fn=lambda x: objective(p, x))


# ---------------------------------------------------------------------------
# Chambolle-Pock
# ---------------------------------------------------------------------------

def _prox_shifted_conjugate(loss, scale, sigma, a, r, cols=None):
    """prox_{sigma f*}(a) for f(u) = scale * Loss(u - r), via Moreau."""
    q = a / sigma if r is None else a / sigma - r
    if isinstance(loss, plq.GroupL2) and cols:
        px = plq.prox(loss, scale / sigma, q.reshape(-1, cols)).ravel()
    else:
        px = plq.prox(loss, scale / sigma, q)
    shift = 0.0 if r is None else sigma * r
    return a - shift - sigma * px


def solve_cp(p: SmootherProblem, variant: str = "v2", sigma: float | None = None,
             tau: float | None = None, eps: float = 1e-10,
             max_iters: int = 20000, record_objective: bool = True,
             step_ratio: float = 1.0) -> SolverReport:
    """Chambolle-Pock primal-dual iterations, variants V1 and V2.

    V1 assigns both residual losses to f with K = [W_r C; W_q A], so only
    matrix-vector products are needed; the constraint indicator sits in g.
    V2 absorbs the quadratic process term into g (prox = one factored
    block-tridiagonal solve) and keeps the measurement loss plus constraint
    indicator in f with K = [W_r C; I].  Objective values for constrained
    V2 runs are recorded at the box-projected iterate, since the V2 primal
    iterate is only asymptotically feasible.

    Steps must satisfy sigma * tau * L^2 < 1 for L = ||K||_2; defaults are
    sigma = 0.99 * step_ratio / L and tau = 0.99 / (step_ratio * L) with a
    safety-inflated power-iteration estimate of L.
    """
    s = p.sys
    nx = s.nx
    nm = s.nmeas
    constrained = not isinstance(p.constraints, Unconstrained)
    wy = np.einsum("tij,tj->ti", s.W_r, s.y).ravel()

    def KC(x):
        return np.einsum("tij,tj->ti", s.W_r, s.apply_C(x).reshape(-1, s.m)).ravel()

    def KCt(v):
        return s.apply_Ct(np.einsum("tij,tj->ti", s.W_r,
                                    np.asarray(v).reshape(-1, s.m)).ravel())

    variant = variant.lower()
    if variant == "v1":
        wz = np.einsum("tij,tj->ti", s.W_q, s.z).ravel()

        def KA(x):
            return np.einsum("tij,tj->ti", s.W_q,
                             s.apply_A(x).reshape(-1, s.n)).ravel()

        def KAt(v):
            return s.apply_At(np.einsum("tij,tj->ti", s.W_q,
                                        np.asarray(v).reshape(-1, s.n)).ravel())

        def K(x):
            return np.concatenate([KC(x), KA(x)])

        def Kt(w):
            return KCt(w[:nm]) + KAt(w[nm:])

        def prox_fstar(a, sig):
            return np.concatenate([
                _prox_shifted_conjugate(p.V, 1.0, sig, a[:nm], wy, s.m),
                _prox_shifted_conjugate(p.J, p.gamma, sig, a[nm:], wz, s.n)])

        def prox_g(a, ta):
            return project(p.constraints, a)

        sq_op = btd.assemble_weighted(s, 1.0, 1.0)
        L2, _ = btd.power_iteration(sq_op, sq_op.dim, iters=500, tol=1e-10)
        report_x = lambda x: x
    elif variant == "v2":
        if not isinstance(p.J, plq.Quadratic):
            raise NonSmoothLoss("CP-V2 needs a quadratic process loss")

        def K(x):
            return np.concatenate([KC(x), x]) if constrained else KC(x)

        def Kt(w):
            if constrained:
                return KCt(w[:nm]) + w[nm:]
            return KCt(w)

        def prox_fstar(a, sig):
            m1 = _prox_shifted_conjugate(p.V, 1.0, sig, a[:nm], wy, s.m)
            if not constrained:
                return m1
            a2 = a[nm:]
            m2 = a2 - sig * project(p.constraints, a2 / sig)
            return np.concatenate([m1, m2])

        op = btd.assemble_weighted(s, 1.0, 0.0)
        if constrained:
            op = op.add_diagonal(1.0)
        L2, _ = btd.power_iteration(op, op.dim, iters=500, tol=1e-10)
        report_x = (lambda x: project(p.constraints, x)) if constrained \
            else (lambda x: x)
    else:
        raise ValueError(f"unknown Chambolle-Pock variant {variant!r}")

    L = float(np.sqrt(max(L2, 1e-30) * 1.05))
    if sigma is None:
        sigma = 0.99 * step_ratio / L
    if tau is None:
        tau = 0.99 / (step_ratio * L)
    if sigma * tau * L2 >= 1.0:
        raise StepSizeViolation(
            f"sigma*tau*L^2 = {sigma * tau * L2:.4f} >= 1")

    if variant == "v2":
        # prox_{tau g}(y) = (tau gamma A'Q^-1 A + I)^-1 (y + tau gamma A'Q^-1 z)
        gfac = btd.factor(
            btd.assemble_weighted(s, 0.0, tau * p.gamma).add_diagonal(1.0))
        rhs_g = btd.assemble_rhs(s, 0.0, tau * p.gamma)

        def prox_g(a, ta):
            return btd.solve_factored(gfac, a + rhs_g)

    x = np.zeros(nx)
    x_prev = x.copy()
    omega = np.zeros(K(x).size)
    objs, res, times = [], [], []
    t0 = time.perf_counter()
    converged = False
    iters = 0
    for k in range(max_iters):
        iters = k + 1
        omega_new = prox_fstar(omega + sigma * K(2.0 * x - x_prev), sigma)
        x_new = prox_g(x - tau * Kt(omega_new), tau)
        step = float(np.linalg.norm(omega_new - omega) +
                     np.linalg.norm(x_new - x))
        x_prev, x, omega = x, x_new, omega_new
        if record_objective:
            objs.append(objective(p, report_x(x)))
        res.append(step)
        times.append(time.perf_counter() - t0)
        if step <= eps:
            converged = True
            break
    return SolverReport(x=report_x(x), iterations=iters, converged=converged,
                        reason="step_norm" if converged else "max_iters",
                        objective=np.array(objs), residual=np.array(res),
                        wall_time=np.array(times),
                        extras={"sigma": sigma, "tau": tau, "L": L})
