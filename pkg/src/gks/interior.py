"""Interior-point solver for constrained PLQ smoothing.

Solves  min_x rho(x)  s.t.  D^T x <= d,  E^T x = e,  where rho is a sum of
scalar PLQ penalties composed with whitened residual rows of the smoothing
objective.  Damped Newton iterations on the relaxed KKT system

    F_mu(x, v, s, r, omega, w, lam) =
        [ D omega + E lam + B^T v
          M v + H w - B x - b
          D^T x - d + s
          H^T v - h + r
          Omega s - mu 1
          W r - mu 1
          E^T x - e ] = 0,

with s, r, omega, w kept positive by a fraction-to-boundary line search.
Every residual row and constraint row touches at most two adjacent time
blocks, so the reduced Newton system is block tridiagonal; with equality
multipliers interleaved it is solved as a banded system in O(N (n+q)^3).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import time

import numpy as np
import scipy.linalg

from . import plq
from .firstorder import SmootherProblem, SolverReport, objective as smoother_objective
from .statespace import EqualityRow


V_REG = 1e-10   # ridge on the per-channel dual block (degenerate M, e.g. l1)


class UnsupportedConstraint(Exception):
    pass


class SingularKkt(Exception):
    def __init__(self, t: int, msg: str = ""):
        self.t = t
        super().__init__(msg or f"reduced KKT system singular near block {t}")


class DualInfeasible(Exception):
    pass


class LineSearchFailure(Exception):
    pass


class MaxItersExceeded(Exception):
    """Carries the best state reached and its report."""

    def __init__(self, state, report):
        self.state = state
        self.report = report
        super().__init__(f"interior point: no convergence in {report.iterations} iterations")


# ---------------------------------------------------------------------------
# local rows: linear maps touching at most two adjacent time blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalRows:
    """Rows c^T x over the stacked state, each supported on time block
    t_left (coef_left) and optionally t_left + 1 (coef_right; NaN-free zero
    rows allowed).  has_right marks spanning rows."""
    t_left: np.ndarray          # (r,) int
    coef_left: np.ndarray       # (r, n)
    has_right: np.ndarray       # (r,) bool
    coef_right: np.ndarray      # (r, n), zero where has_right is False

    @property
    def count(self) -> int:
        return self.t_left.size

    def apply(self, xs: np.ndarray) -> np.ndarray:
        """Row values against states xs (N+1, n)."""
        out = np.einsum("rj,rj->r", self.coef_left, xs[self.t_left])
        if self.has_right.any():
            out = out + np.einsum("rj,rj->r", self.coef_right,
                                  xs[self.t_left + 1] * self.has_right[:, None])
        return out

    def apply_T(self, beta: np.ndarray, shape) -> np.ndarray:
        """Sum of beta_r * row_r, returned as a (N+1, n) state array."""
        out = np.zeros(shape)
        np.add.at(out, self.t_left, beta[:, None] * self.coef_left)
        if self.has_right.any():
            np.add.at(out, self.t_left + 1,
                      (beta * self.has_right)[:, None] * self.coef_right)
        return out

    def scatter_outer(self, sdiag: np.ndarray, F: np.ndarray, G: np.ndarray):
        """Accumulate sum_r sdiag_r row_r row_r^T into block-tridiagonal (F, G)."""
        cl, cr, tl = self.coef_left, self.coef_right, self.t_left
        np.add.at(F, tl, sdiag[:, None, None] * np.einsum("ri,rj->rij", cl, cl))
        if self.has_right.any():
            sd = sdiag * self.has_right
            np.add.at(F, tl + 1, sd[:, None, None] * np.einsum("ri,rj->rij", cr, cr))
            np.add.at(G, tl, sd[:, None, None] * np.einsum("ri,rj->rij", cr, cl))


def _empty_rows(n: int) -> LocalRows:
    return LocalRows(np.zeros(0, dtype=int), np.zeros((0, n)),
                     np.zeros(0, dtype=bool), np.zeros((0, n)))


def _stack_rows(rows: list, n: int) -> LocalRows:
    if not rows:
        return _empty_rows(n)
    tl = np.array([r[0] for r in rows], dtype=int)
    cl = np.stack([r[1] for r in rows])
    hr = np.array([r[2] is not None for r in rows])
    cr = np.stack([r[2] if r[2] is not None else np.zeros(n) for r in rows])
    return LocalRows(tl, cl, hr, cr)


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelGroup:
    """Channels sharing one scalar loss: residual u_c = a_c + row_c(x),
    penalty gamma * loss(u_c), with per-channel dual v_c of dimension k."""
    loss: object
    gamma: float
    rows: LocalRows
    a: np.ndarray               # (nc,)
    enc: plq.PlqPenalty         # gamma-scaled scalar encoding

    @property
    def count(self) -> int:
        return self.rows.count

    @property
    def k(self) -> int:
        return self.enc.b.size

    @property
    def ell(self) -> int:
        return self.enc.h.size


@dataclass(frozen=True)
class ConstrainedPlqProblem:
    """min sum_g gamma_g loss_g(residuals) s.t. ineq rows <= d, eq rows = e."""
    n: int
    N: int
    groups: tuple
    ineq: LocalRows
    d: np.ndarray
    eq: LocalRows
    e: np.ndarray
    box: object = None          # original Box, when the rows came from one

    @property
    def nx(self) -> int:
        return (self.N + 1) * self.n

    def states(self, x):
        return np.asarray(x, dtype=float).reshape(self.N + 1, self.n)


def eval_primal(prob: ConstrainedPlqProblem, x: np.ndarray) -> float:
    """rho(x): the penalty value, constraints not included."""
    xs = prob.states(x)
    total = 0.0
    for g in prob.groups:
        u = g.a + g.rows.apply(xs)
        total += g.gamma * float(np.sum(plq.eval(g.loss, u)))
    return total


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------

def _box_rows(box: plq.Box, N: int, n: int, coords=None):
    """Two rows per bounded coordinate: x_i <= hi, -x_i <= -lo."""
    nx = (N + 1) * n
    lo = np.broadcast_to(np.asarray(box.lo, dtype=float), (nx,))
    hi = np.broadcast_to(np.asarray(box.hi, dtype=float), (nx,))
    rows, rhs = [], []
    for idx in range(nx):
        t, j = divmod(idx, n)
        if coords is not None and j not in coords:
            continue
        unit = np.zeros(n)
        unit[j] = 1.0
        if np.isfinite(hi[idx]):
            rows.append((t, unit.copy(), None))
            rhs.append(hi[idx])
        if np.isfinite(lo[idx]):
            rows.append((t, -unit.copy(), None))
            rhs.append(-lo[idx])
    return _stack_rows(rows, n), np.array(rhs)


def _equality_local_rows(eq_rows, n: int):
    rows, rhs = [], []
    for row in eq_rows:
        if isinstance(row, EqualityRow):
            rows.append((row.t, row.coeff_left,
                         row.coeff_right if row.coeff_right is not None else None))
            rhs.append(row.rhs)
        else:
            rows.append(row[:3])
            rhs.append(row[3])
    return _stack_rows(rows, n), np.array(rhs)


def smoother_to_plq(p: SmootherProblem, equality_rows=()) -> ConstrainedPlqProblem:
    """Compose the smoothing objective into one constrained PLQ problem.

    Measurement channels come from the rows of W_r C_t, process channels
    (prior included) from the rows of W_q composed with the transition;
    zero weight rows (pseudoinverse nullspaces) are dropped, and the caller
    supplies the matching equality rows from ``pseudo_weights``.
    """
    s = p.sys
    n, N = s.n, s.N
    for loss in (p.V, p.J):
        if isinstance(loss, plq.GroupL2):
            raise plq.UnsupportedLoss("group-l2 has no polyhedral conjugate; "
                                      "use a splitting method")
    tol = 1e-12

    meas, meas_a = [], []
    wy = np.einsum("tij,tj->ti", s.W_r, s.y)
    WC = np.einsum("tij,tjk->tik", s.W_r, s.C_blocks)
    for i in range(s.obs_times.size):
        tt = int(s.obs_times[i])
        for j in range(s.m):
            if np.abs(WC[i, j]).max() <= tol and abs(wy[i, j]) <= tol:
                continue
            meas.append((tt, -WC[i, j], None))
            meas_a.append(wy[i, j])

    proc, proc_a = [], []
    wz = np.einsum("tij,tj->ti", s.W_q, s.z)
    WA = np.einsum("tij,tjk->tik", s.W_q[1:], s.A_seq)
    for j in range(n):
        if np.abs(s.W_q[0, j]).max() > tol:
            proc.append((0, -s.W_q[0, j], None))
            proc_a.append(wz[0, j])
    for t in range(N):
        W = s.W_q[t + 1]
        for j in range(n):
            if np.abs(W[j]).max() <= tol:
                continue
            proc.append((t, WA[t, j], -W[j]))
            proc_a.append(wz[t + 1, j])

    groups = []
    if meas:
        groups.append(ChannelGroup(p.V, 1.0, _stack_rows(meas, n),
                                   np.array(meas_a), plq.plq_encoding(p.V, 1.0)))
    if proc:
        groups.append(ChannelGroup(p.J, p.gamma, _stack_rows(proc, n),
                                   np.array(proc_a),
                                   plq.plq_encoding(p.J, p.gamma)))

    cons = p.constraints
    box = None
    if isinstance(cons, plq.Unconstrained):
        ineq, d = _empty_rows(n), np.zeros(0)
    elif isinstance(cons, plq.Box):
        ineq, d = _box_rows(cons, N, n)
        box = cons
    elif isinstance(cons, plq.Polyhedral):
        ineq, d = _polyhedral_local_rows(cons, N, n)
    else:
        raise UnsupportedConstraint(
            f"{type(cons).__name__} is not polyhedral; the interior-point "
            "solver needs box or local polyhedral constraints")
    eq, e = _equality_local_rows(equality_rows, n)
    if isinstance(cons, plq.Polyhedral) and cons.E is not None:
        eq2, e2 = _polyhedral_local_rows_from_dense(cons.E, cons.e, N, n)
        eq = _concat_rows(eq, eq2)
        e = np.concatenate([e, e2])
    return ConstrainedPlqProblem(n=n, N=N, groups=tuple(groups),
                                 ineq=ineq, d=d, eq=eq, e=e, box=box)


def _concat_rows(a: LocalRows, b: LocalRows) -> LocalRows:
    return LocalRows(np.concatenate([a.t_left, b.t_left]),
                     np.concatenate([a.coef_left, b.coef_left]),
                     np.concatenate([a.has_right, b.has_right]),
                     np.concatenate([a.coef_right, b.coef_right]))


def _polyhedral_local_rows_from_dense(D, d, N: int, n: int):
    """Split dense constraint columns (of D^T x <= d) into local rows; each
    column may touch one time block or two adjacent ones."""
    D = np.asarray(D, dtype=float)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    rows = []
    for jcol in range(D.shape[1]):
        col = D[:, jcol].reshape(N + 1, n)
        touched = np.nonzero(np.abs(col).max(axis=1) > 0)[0]
        if touched.size == 0:
            rows.append((0, np.zeros(n), None))
        elif touched.size == 1:
            rows.append((int(touched[0]), col[touched[0]].copy(), None))
        elif touched.size == 2 and touched[1] == touched[0] + 1:
            rows.append((int(touched[0]), col[touched[0]].copy(),
                         col[touched[1]].copy()))
        else:
            raise UnsupportedConstraint(
                "polyhedral rows must touch at most two adjacent time blocks")
    return _stack_rows(rows, n), d


def _polyhedral_local_rows(cons: plq.Polyhedral, N: int, n: int):
    return _polyhedral_local_rows_from_dense(cons.D, cons.d, N, n)


# ---------------------------------------------------------------------------
# KKT state and residual
# ---------------------------------------------------------------------------

@dataclass
class KktState:
    x: np.ndarray
    v: list                      # per group (nc, k)
    r: list                      # per group (nc, ell)
    w: list                      # per group (nc, ell)
    s: np.ndarray                # (n1,)
    omega: np.ndarray            # (n1,)
    lam: np.ndarray              # (n3,)
    mu: float

    def min_positive(self) -> float:
        vals = [np.min(a) if a.size else np.inf for a in (self.s, self.omega)]
        vals += [np.min(a) if a.size else np.inf for a in self.r]
        vals += [np.min(a) if a.size else np.inf for a in self.w]
        return float(min(vals))


def _interior_dual(loss, enc: plq.PlqPenalty, gamma: float) -> np.ndarray:
    if isinstance(loss, (plq.Vapnik, plq.HuberInsensitive)):
        upper = gamma * (loss.kappa if isinstance(loss, plq.HuberInsensitive) else 1.0)
        return np.full(enc.b.size, 0.25 * upper)
    return np.zeros(enc.b.size)


def initial_state(prob: ConstrainedPlqProblem) -> KktState:
    x = np.zeros(prob.nx)
    if prob.box is not None:
        xs = prob.states(x)
        lo = np.broadcast_to(np.asarray(prob.box.lo, dtype=float), (prob.nx,))
        hi = np.broadcast_to(np.asarray(prob.box.hi, dtype=float), (prob.nx,))
        both = np.isfinite(lo) & np.isfinite(hi)
        mid = np.zeros(prob.nx)
        mid[both] = 0.5 * (lo[both] + hi[both])
        flat = xs.ravel()
        violated = (flat <= lo) | (flat >= hi)
        flat[violated] = mid[violated]
        x = flat
    xs = prob.states(x)
    v, r, w = [], [], []
    comp_sum, comp_cnt = 0.0, 0
    for g in prob.groups:
        v0 = np.tile(_interior_dual(g.loss, g.enc, g.gamma), (g.count, 1))
        r0 = g.enc.h[None, :] - v0 @ g.enc.H
        r0 = np.maximum(r0, 1e-8)
        w0 = np.ones_like(r0)
        v.append(v0)
        r.append(r0)
        w.append(w0)
        comp_sum += float(np.sum(r0))
        comp_cnt += r0.size
    s = np.maximum(prob.d - prob.ineq.apply(xs), 1.0)
    omega = np.ones_like(s)
    comp_sum += float(np.sum(s))
    comp_cnt += s.size
    mu = comp_sum / comp_cnt if comp_cnt else 0.0
    return KktState(x=x, v=v, r=r, w=w, s=s, omega=omega,
                    lam=np.zeros(prob.e.size), mu=mu)


def kkt_residual(prob: ConstrainedPlqProblem, state: KktState,
                 mu: float | None = None):
    """The relaxed KKT residual; returns (concatenated vector, block dict)."""
    if mu is None:
        mu = state.mu
    xs = prob.states(state.x)
    dual_x = prob.ineq.apply_T(state.omega, xs.shape)
    if prob.e.size:
        dual_x += prob.eq.apply_T(state.lam, xs.shape)
    blocks = {}
    r2, r4, r6 = [], [], []
    for gi, g in enumerate(prob.groups):
        vg, rg, wg = state.v[gi], state.r[gi], state.w[gi]
        beta = vg @ g.enc.B[:, 0]
        dual_x += g.rows.apply_T(beta, xs.shape)
        u = g.a + g.rows.apply(xs)
        r2.append(vg @ g.enc.M.T + wg @ g.enc.H.T
                  - np.outer(u, g.enc.B[:, 0]) - g.enc.b[None, :])
        r4.append(vg @ g.enc.H - g.enc.h[None, :] + rg)
        r6.append(wg * rg - mu)
    blocks["dual_x"] = dual_x.ravel()
    blocks["dual_v"] = r2
    blocks["primal_ineq"] = prob.ineq.apply(xs) - prob.d + state.s
    blocks["dual_ineq"] = r4
    blocks["comp_ineq"] = state.omega * state.s - mu
    blocks["comp_v"] = r6
    blocks["primal_eq"] = prob.eq.apply(xs) - prob.e if prob.e.size else np.zeros(0)
    flat = np.concatenate(
        [blocks["dual_x"]]
        + [b.ravel() for b in r2]
        + [blocks["primal_ineq"]]
        + [b.ravel() for b in r4]
        + [blocks["comp_ineq"]]
        + [b.ravel() for b in r6]
        + [blocks["primal_eq"]])
    return flat, blocks


def _merit(prob, state, mu) -> float:
    flat, _ = kkt_residual(prob, state, mu)
    return float(np.linalg.norm(flat))


# ---------------------------------------------------------------------------
# banded assembly of the reduced (x, lambda) system
# ---------------------------------------------------------------------------

class _BandedLayout:
    """Static index template for the interleaved (x_t, lambda@t) banded
    matrix with uniform padded slot size."""

    def __init__(self, prob: ConstrainedPlqProblem):
        n, N = prob.n, prob.N
        slot_of_row = np.where(prob.eq.has_right, prob.eq.t_left + 1,
                               prob.eq.t_left)
        counts = np.zeros(N + 1, dtype=int)
        for srow in slot_of_row:
            counts[srow] += 1
        q = int(counts.max()) if counts.size and prob.e.size else 0
        S = n + q
        self.S, self.q, self.n, self.N = S, q, n, N
        self.dim = (N + 1) * S
        self.bw = 2 * S - 1
        self.slot_of_row = slot_of_row
        # position of each eq row inside its slot
        pos = np.zeros(prob.e.size, dtype=int)
        seen = np.zeros(N + 1, dtype=int)
        for i, srow in enumerate(slot_of_row):
            pos[i] = seen[srow]
            seen[srow] += 1
        self.pos_in_slot = pos
        self.pad_mask = np.ones((N + 1, q), dtype=bool)
        for srow, cnt in enumerate(seen):
            self.pad_mask[srow, :cnt] = False
        # static E-coefficient blocks: Ediag[t] (q, n) rows@slot t on x_t,
        # Eoff[t] (q, n) rows@slot t+1 on x_t
        self.Ediag = np.zeros((N + 1, q, n))
        self.Eoff = np.zeros((N, q, n))
        for i in range(prob.e.size):
            srow, p = slot_of_row[i], pos[i]
            if prob.eq.has_right[i]:
                self.Ediag[srow, p] = prob.eq.coef_right[i]
                self.Eoff[srow - 1, p] = prob.eq.coef_left[i]
            else:
                self.Ediag[srow, p] = prob.eq.coef_left[i]
        ii, jj = np.indices((S, S))
        base = S * np.arange(N + 1)
        self._diag_rows = (self.bw + ii - jj).ravel()
        self._diag_cols = (base[:, None] + jj.ravel()[None, :]).ravel()
        self._off_rows_lower = (self.bw + S + ii - jj).ravel()
        self._off_cols_lower = (base[:N, None] + jj.ravel()[None, :]).ravel()
        self._off_rows_upper = (self.bw + ii - jj - S).ravel()
        self._off_cols_upper = (base[:N, None] + S + jj.ravel()[None, :]).ravel()

    def _fill(self, ab, Fa, Ga):
        np.add.at(ab, (np.tile(self._diag_rows, self.N + 1), self._diag_cols),
                  Fa.reshape(self.N + 1, -1).ravel())
        if self.N:
            np.add.at(ab, (np.tile(self._off_rows_lower, self.N),
                           self._off_cols_lower),
                      Ga.reshape(self.N, -1).ravel())
            GaT = np.transpose(Ga, (0, 2, 1))
            np.add.at(ab, (np.tile(self._off_rows_upper, self.N),
                           self._off_cols_upper),
                      GaT.reshape(self.N, -1).ravel())
        return ab

    def pack_rhs(self, gx: np.ndarray, geq: np.ndarray) -> np.ndarray:
        n, q, S, N = self.n, self.q, self.S, self.N
        rhs = np.zeros((N + 1, S))
        rhs[:, :n] = gx.reshape(N + 1, n)
        if q:
            rhs[self.slot_of_row, n + self.pos_in_slot] = geq
        return rhs.ravel()

    def unpack(self, sol: np.ndarray):
        n, q, S, N = self.n, self.q, self.S, self.N
        sol = sol.reshape(N + 1, S)
        dx = sol[:, :n].ravel()
        dlam = sol[self.slot_of_row, n + self.pos_in_slot] if q else np.zeros(0)
        return dx, dlam

    def solve(self, F, G, gx, geq):
        ab = np.zeros((2 * self.bw + 1, self.dim))
        n, q, S, N = self.n, self.q, self.S, self.N
        Fa = np.zeros((N + 1, S, S))
        Fa[:, :n, :n] = F
        if q:
            Fa[:, n:, :n] = self.Ediag
            Fa[:, :n, n:] = np.transpose(self.Ediag, (0, 2, 1))
            idx = np.nonzero(self.pad_mask)
            Fa[idx[0], n + idx[1], n + idx[1]] = 1.0
        Ga = np.zeros((N, S, S))
        Ga[:, :n, :n] = G
        if q:
            Ga[:, n:, :n] = self.Eoff
        self._fill(ab, Fa, Ga)
        rhs = self.pack_rhs(gx, geq)
        try:
            sol = scipy.linalg.solve_banded((self.bw, self.bw), ab, rhs)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as err:
            raise SingularKkt(self._locate_singular(Fa, Ga), str(err)) from err
        if not np.all(np.isfinite(sol)):
            raise SingularKkt(self._locate_singular(Fa, Ga))
        return self.unpack(sol)

    def _locate_singular(self, Fa, Ga) -> int:
        d = Fa[0]
        for t in range(self.N + 1):
            if t:
                d = Fa[t] - Ga[t - 1] @ np.linalg.solve(d, Ga[t - 1].T)
            if abs(np.linalg.det(d)) < 1e-300:
                return t
        return self.N


# ---------------------------------------------------------------------------
# Newton step
# ---------------------------------------------------------------------------

def _group_T_inv(g: ChannelGroup, rg, wg):
    """Per-channel inverse of T = M + H diag(w/r) H^T + reg, batched."""
    k = g.k
    T = np.broadcast_to(g.enc.M + V_REG * np.eye(k), (g.count, k, k)).copy()
    if g.ell:
        ratio = wg / rg                          # (nc, ell)
        T += np.einsum("il,cl,jl->cij", g.enc.H, ratio, g.enc.H)
    return np.linalg.inv(T)


def newton_step(prob: ConstrainedPlqProblem, state: KktState,
                layout: _BandedLayout | None = None,
                mu: float | None = None, blocks=None):
    """One damped Newton direction and its fraction-to-boundary step cap.

    Returns (direction dict, max step keeping slacks/multipliers positive).
    """
    if layout is None:
        layout = _BandedLayout(prob)
    if mu is None:
        mu = state.mu
    n, N = prob.n, prob.N
    xs = prob.states(state.x)
    if blocks is None:
        _, blocks = kkt_residual(prob, state, mu)

    F = np.zeros((N + 1, n, n))
    G = np.zeros((N, n, n))
    gx = -blocks["dual_x"].reshape(N + 1, n)

    # inequality elimination
    if state.s.size:
        rho3 = blocks["primal_ineq"]
        rho5 = blocks["comp_ineq"]
        ratio = state.omega / state.s
        prob.ineq.scatter_outer(ratio, F, G)
        gx -= prob.ineq.apply_T((-rho5 + state.omega * rho3) / state.s, xs.shape)

    # channel elimination
    cache = []
    for gi, g in enumerate(prob.groups):
        rg, wg, vg = state.r[gi], state.w[gi], state.v[gi]
        rho2 = blocks["dual_v"][gi]
        Tinv = _group_T_inv(g, rg, wg)
        if g.ell:
            rho4, rho6 = blocks["dual_ineq"][gi], blocks["comp_v"][gi]
            g2 = -rho2 - ((-rho6 + wg * rho4) / rg) @ g.enc.H.T
        else:
            rho4 = rho6 = None
            g2 = -rho2
        Bs = g.enc.B[:, 0]
        TinvB = Tinv @ Bs                           # (nc, k)
        sdiag = TinvB @ Bs                          # (nc,)
        mvec = np.einsum("ck,ck->c", g2, TinvB)     # B^T T^-1 g2
        g.rows.scatter_outer(sdiag, F, G)
        gx -= g.rows.apply_T(mvec, xs.shape)
        cache.append((Tinv, g2, rho4, rho6, TinvB))

    geq = -blocks["primal_eq"]
    dx, dlam = layout.solve(F, G, gx.ravel(), geq)

    dxs = dx.reshape(N + 1, n)
    direction = {"x": dx, "lam": dlam, "v": [], "r": [], "w": []}
    alpha_max = 1.0
    if state.s.size:
        ds = -blocks["primal_ineq"] - prob.ineq.apply(dxs)
        domega = (-blocks["comp_ineq"] - state.omega * ds) / state.s
        direction["s"], direction["omega"] = ds, domega
        alpha_max = min(alpha_max, _ftb(state.s, ds), _ftb(state.omega, domega))
    else:
        direction["s"] = np.zeros(0)
        direction["omega"] = np.zeros(0)
    for gi, g in enumerate(prob.groups):
        Tinv, g2, rho4, rho6, TinvB = cache[gi]
        du = g.rows.apply(dxs)
        dv = np.einsum("cij,cj->ci", Tinv, g2) + du[:, None] * TinvB
        if g.ell:
            dr = -rho4 - dv @ g.enc.H
            dw = (-rho6 - state.w[gi] * dr) / state.r[gi]
            alpha_max = min(alpha_max, _ftb(state.r[gi], dr),
                            _ftb(state.w[gi], dw))
        else:
            dr = np.zeros((g.count, 0))
            dw = np.zeros((g.count, 0))
        direction["v"].append(dv)
        direction["r"].append(dr)
        direction["w"].append(dw)
    return direction, alpha_max


def _ftb(val: np.ndarray, dval: np.ndarray, frac: float = 0.995) -> float:
    """Largest step keeping val + step*dval >= (1-frac)*val, componentwise."""
    neg = dval < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, frac * np.min(-val[neg] / dval[neg])))


def _advance(state: KktState, direction, alpha: float) -> KktState:
    return KktState(
        x=state.x + alpha * direction["x"],
        v=[v + alpha * dv for v, dv in zip(state.v, direction["v"])],
        r=[r + alpha * dr for r, dr in zip(state.r, direction["r"])],
        w=[w + alpha * dw for w, dw in zip(state.w, direction["w"])],
        s=state.s + alpha * direction["s"],
        omega=state.omega + alpha * direction["omega"],
        lam=state.lam + alpha * direction["lam"],
        mu=state.mu)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def solve_ip(prob: ConstrainedPlqProblem, eps: float = 1e-8,
             max_iters: int = 200, theta: float = 0.1,
             record_objective: bool = False,
             layout: _BandedLayout | None = None):
    """Damped Newton on F_mu = 0 with multiplicative mu reduction.

    mu^+ = theta * (omega^T s + w^T r) / (n1 + n2) after each accepted step;
    terminates when mu <= eps and ||F_0|| <= eps.  Returns
    (x, (v, omega, lam), SolverReport); raises MaxItersExceeded with the
    best state attached when the budget runs out.
    """
    if layout is None:
        layout = _BandedLayout(prob)
    state = initial_state(prob)
    n_comp = state.s.size + sum(r.size for r in state.r)
    objs, merits, merits_after, mus, steps, times, positives = \
        [], [], [], [], [], [], []
    t0 = time.perf_counter()
    converged = False
    iters = 0
    for k in range(max_iters):
        flat, blocks = kkt_residual(prob, state, state.mu)
        # ||F_0|| differs from ||F_mu|| only by +mu on the complementarity rows
        sq = (np.linalg.norm(flat) ** 2
              - np.linalg.norm(blocks["comp_ineq"]) ** 2
              + np.linalg.norm(blocks["comp_ineq"] + state.mu) ** 2)
        for b in blocks["comp_v"]:
            sq += -np.linalg.norm(b) ** 2 + np.linalg.norm(b + state.mu) ** 2
        f0 = np.sqrt(max(sq, 0.0))
        if state.mu <= eps and f0 <= eps:
            converged = True
            break
        iters = k + 1
        direction, alpha_max = newton_step(prob, state, layout,
                                           mu=state.mu, blocks=blocks)
        merit0 = float(np.linalg.norm(flat))
        alpha = alpha_max
        accepted = None
        for _ in range(31):
            trial = _advance(state, direction, alpha)
            trial_merit = _merit(prob, trial, state.mu)
            if trial_merit < merit0:
                accepted = trial
                break
            alpha *= 0.5
        if accepted is None:
            raise LineSearchFailure(
                f"no decrease in ||F_mu|| after 30 halvings (iter {k})")
        state = accepted
        merits_after.append(trial_merit)
        positives.append(state.min_positive())
        if n_comp:
            comp = (float(state.omega @ state.s)
                    + sum(float(np.sum(state.w[i] * state.r[i]))
                          for i in range(len(state.r))))
            state.mu = theta * comp / n_comp
        else:
            state.mu = 0.0
        merits.append(merit0)
        mus.append(state.mu)
        steps.append(alpha)
        times.append(time.perf_counter() - t0)
        if record_objective:
            objs.append(eval_primal(prob, state.x))
    report = SolverReport(
        x=state.x, iterations=iters, converged=converged,
        reason="kkt" if converged else "max_iters",
        objective=np.array(objs), step_size=np.array(steps),
        residual=np.array(merits), wall_time=np.array(times),
        extras={"mu": np.array(mus), "final_merit": _merit(prob, state, 0.0),
                "merit_after": np.array(merits_after),
                "min_positive": np.array(positives),
                "state": state})
    if not converged:
        raise MaxItersExceeded(state, report)
    return state.x, (state.v, state.omega, state.lam), report


def duality_gap(prob: ConstrainedPlqProblem, x: np.ndarray, v: list,
                omega: np.ndarray, lam: np.ndarray | None = None,
                feas_tol: float = 1e-6) -> float:
    """Primal value plus dual value; nonnegative by weak duality.

    The dual objective is <d, omega> + <e, lam> + 1/2 v^T M v - <b, v>
    subject to B^T v + D omega + E lam = 0, H^T v <= h, omega >= 0.
    """
    xs = prob.states(x)
    if lam is None:
        lam = np.zeros(prob.e.size)
    if omega.size and np.min(omega) < -feas_tol:
        raise DualInfeasible("negative inequality multiplier")
    dual_x = prob.ineq.apply_T(omega, xs.shape)
    if prob.e.size:
        dual_x += prob.eq.apply_T(lam, xs.shape)
    dual_val = float(prob.d @ omega) if omega.size else 0.0
    if prob.e.size:
        dual_val += float(prob.e @ lam)
    scale = 1.0
    for gi, g in enumerate(prob.groups):
        vg = v[gi]
        scale = max(scale, float(np.abs(vg).max(initial=0.0)))
        if g.ell:
            slack = g.enc.h[None, :] - vg @ g.enc.H
            if np.min(slack) < -feas_tol * max(1.0, np.abs(g.enc.h).max()):
                raise DualInfeasible("dual iterate outside V")
        beta = vg @ g.enc.B[:, 0]
        dual_x += g.rows.apply_T(beta, xs.shape)
        dual_val += 0.5 * float(np.einsum("ci,ij,cj->", vg, g.enc.M, vg))
        # the composed affine offset of channel c is b_s + B_s a_c
        dual_val -= float(np.sum(vg * g.enc.b) + beta @ g.a)
    if np.linalg.norm(dual_x) > feas_tol * scale * max(1.0, np.sqrt(dual_x.size)):
        raise DualInfeasible(
            f"stationarity violated: ||B^T v + D omega + E lam|| = "
            f"{np.linalg.norm(dual_x):.3e}")
    return eval_primal(prob, x) + dual_val
