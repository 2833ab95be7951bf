"""Symmetric block-tridiagonal systems and the classic smoothing recursions.

The normal equations of the least-squares smoother,

    (C^T R^{-1} C + A^T Q^{-1} A) x = C^T R^{-1} y + A^T Q^{-1} z,

form a positive definite block-tridiagonal operator with diagonal blocks F_t
and subdiagonal blocks G_t.  ``solve_rts`` runs forward elimination with a
backward substitution; ``solve_mf`` runs independent forward and backward
sweeps combined pointwise.  Both cost O(N n^3); a retained factorization
gives O(N n^2) per additional right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .statespace import StackedSystem


class NotPositiveDefinite(Exception):
    def __init__(self, t: int, msg: str = ""):
        self.t = t
        super().__init__(msg or f"pivot block {t} is not positive definite")


class SingularBlock(Exception):
    def __init__(self, t: int, msg: str = ""):
        self.t = t
        super().__init__(msg or f"covariance block {t} is singular")


class DimensionMismatch(Exception):
    pass


@dataclass(frozen=True)
class BlockTridiag:
    """Symmetric block-tridiagonal operator: F_seq (N+1,n,n) diagonal blocks,
    G_seq (N,n,n) subdiagonal blocks (block (t+1, t))."""
    F_seq: np.ndarray
    G_seq: np.ndarray

    @property
    def N(self) -> int:
        return self.G_seq.shape[0]

    @property
    def n(self) -> int:
        return self.F_seq.shape[1]

    @property
    def dim(self) -> int:
        return (self.N + 1) * self.n

    def add_diagonal(self, c: float) -> "BlockTridiag":
        F = self.F_seq.copy()
        F += c * np.eye(self.n)
        return BlockTridiag(F, self.G_seq)

    def dense(self) -> np.ndarray:
        """Materialize (small instances / tests only)."""
        n, N = self.n, self.N
        out = np.zeros((self.dim, self.dim))
        for t in range(N + 1):
            out[t * n:(t + 1) * n, t * n:(t + 1) * n] = self.F_seq[t]
        for t in range(N):
            out[(t + 1) * n:(t + 2) * n, t * n:(t + 1) * n] = self.G_seq[t]
            out[t * n:(t + 1) * n, (t + 1) * n:(t + 2) * n] = self.G_seq[t].T
        return out


def matvec(T: BlockTridiag, x: np.ndarray) -> np.ndarray:
    """T x in O(N n^2)."""
    x = np.asarray(x, dtype=float)
    if x.size != T.dim:
        raise DimensionMismatch(f"expected length {T.dim}, got {x.size}")
    xs = x.reshape(T.N + 1, T.n)
    out = np.einsum("tij,tj->ti", T.F_seq, xs)
    out[1:] += np.einsum("tij,tj->ti", T.G_seq, xs[:-1])
    out[:-1] += np.einsum("tji,tj->ti", T.G_seq, xs[1:])
    return out.ravel()


def _pd_inverse(block: np.ndarray, t: int) -> np.ndarray:
    """Inverse of a pivot block; rejects non-positive-definite pivots."""
    try:
        L = np.linalg.cholesky(block)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(t, f"pivot block {t}: {err}") from err
    scale = max(np.abs(block).max(), 1.0)
    if np.min(np.diag(L)) ** 2 <= 1e-12 * scale:
        raise NotPositiveDefinite(t, f"pivot block {t} nearly singular")
    Linv = scipy.linalg.solve_triangular(L, np.eye(block.shape[0]), lower=True)
    return Linv.T @ Linv


def _to_banded_lower(T: BlockTridiag) -> np.ndarray:
    """Lower banded storage (scalar bandwidth 2n-1) of the operator."""
    n, N = T.n, T.N
    dim = T.dim
    bw = 2 * n - 1
    ab = np.zeros((bw + 1, dim))
    ii, jj = np.indices((n, n))
    base = n * np.arange(N + 1)
    # diagonal blocks: keep i >= j
    keep = ii >= jj
    rows = (ii - jj)[keep]
    cols = (base[:, None] + jj[keep][None, :]).ravel()
    vals = T.F_seq[:, ii[keep], jj[keep]].ravel()
    ab[np.tile(rows, N + 1), cols] = vals
    # subdiagonal blocks at (t+1, t): global (i,j) = (base[t]+n+ii, base[t]+jj)
    rows = (n + ii - jj).ravel()
    cols = (base[:N, None] + jj.ravel()[None, :]).ravel()
    vals = T.G_seq[:, ii.ravel(), jj.ravel()].ravel()
    ab[np.tile(rows, N), cols] = vals
    return ab


@dataclass(frozen=True)
class BtdFactorization:
    """Banded Cholesky factor of the operator; solves any right-hand side in
    O(N n^2)."""
    cb: np.ndarray
    dim: int


def factor(T: BlockTridiag) -> BtdFactorization:
    """Cholesky factorization in banded form, O(N n^3)."""
    ab = _to_banded_lower(T)
    try:
        cb = scipy.linalg.cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError as err:
        # LAPACK reports the failing leading minor, 1-based
        import re as _re
        mt = _re.search(r"(\d+)", str(err))
        t = (int(mt.group(1)) - 1) // T.n if mt else -1
        raise NotPositiveDefinite(t, f"pivot block {t}: {err}") from err
    return BtdFactorization(cb=cb, dim=T.dim)


def solve_factored(fac: BtdFactorization, r: np.ndarray) -> np.ndarray:
    """Solve with a retained factorization, O(N n^2) per right-hand side."""
    r = np.asarray(r, dtype=float)
    if r.size != fac.dim:
        raise DimensionMismatch(f"expected length {fac.dim}, got {r.size}")
    return scipy.linalg.cho_solve_banded((fac.cb, True), r.ravel())


def solve_rts(T: BlockTridiag, r: np.ndarray) -> np.ndarray:
    """Forward block-tridiagonal scheme (RTS).

    Forward elimination: d_t = F_t - G_{t-1} d_{t-1}^{-1} G_{t-1}^T,
    s_t = r_t - G_{t-1} d_{t-1}^{-1} s_{t-1}; then backward substitution
    x_t = d_t^{-1} (s_t - G_t^T x_{t+1}).
    """
    rs = np.asarray(r, dtype=float)
    if rs.size != T.dim:
        raise DimensionMismatch(f"expected length {T.dim}, got {rs.size}")
    N, n = T.N, T.n
    rs = rs.reshape(N + 1, n)
    dinv = np.empty((N + 1, n, n))
    s = np.empty((N + 1, n))
    dinv[0] = _pd_inverse(T.F_seq[0], 0)
    s[0] = rs[0]
    for t in range(1, N + 1):
        G_prev = T.G_seq[t - 1]
        GD = G_prev @ dinv[t - 1]
        dinv[t] = _pd_inverse(T.F_seq[t] - GD @ G_prev.T, t)
        s[t] = rs[t] - GD @ s[t - 1]
    x = np.empty((N + 1, n))
    x[N] = dinv[N] @ s[N]
    for t in range(N - 1, -1, -1):
        x[t] = dinv[t] @ (s[t] - T.G_seq[t].T @ x[t + 1])
    return x.ravel()


def solve_mf(T: BlockTridiag, r: np.ndarray) -> np.ndarray:
    """Two-filter block-tridiagonal scheme (Mayne-Fraser).

    The forward and backward sweeps are independent; at each t the reduced
    equations are combined as (d_t^f + d_t^b - F_t) x_t = s_t^f + s_t^b - r_t,
    including t = 0.
    """
    N, n = T.N, T.n
    rs = np.asarray(r, dtype=float)
    if rs.size != T.dim:
        raise DimensionMismatch(f"expected length {T.dim}, got {rs.size}")
    rs = rs.reshape(N + 1, n)

    d_f = np.empty((N + 1, n, n))
    s_f = np.empty((N + 1, n))
    d_f[0], s_f[0] = T.F_seq[0], rs[0]
    for t in range(1, N + 1):
        G_prev = T.G_seq[t - 1]
        GD = G_prev @ _pd_inverse(d_f[t - 1], t - 1)
        d_f[t] = T.F_seq[t] - GD @ G_prev.T
        s_f[t] = rs[t] - GD @ s_f[t - 1]

    d_b = np.empty((N + 1, n, n))
    s_b = np.empty((N + 1, n))
    d_b[N], s_b[N] = T.F_seq[N], rs[N]
    for t in range(N - 1, -1, -1):
        G_t = T.G_seq[t]
        GD = G_t.T @ _pd_inverse(d_b[t + 1], t + 1)
        d_b[t] = T.F_seq[t] - GD @ G_t
        s_b[t] = rs[t] - GD @ s_b[t + 1]

    x = np.empty((N + 1, n))
    for t in range(N + 1):
        combined = d_f[t] + d_b[t] - T.F_seq[t]
        x[t] = _pd_inverse(combined, t) @ (s_f[t] + s_b[t] - rs[t])
    return x.ravel()


# ---------------------------------------------------------------------------
# assembly from a stacked system
# ---------------------------------------------------------------------------

def assemble_weighted(sys: StackedSystem, meas_weight: float = 1.0,
                      proc_weight: float = 1.0) -> BlockTridiag:
    """Block-tridiagonal operator of
    meas_weight C^T R^{-1} C + proc_weight A^T Q^{-1} A.

    Requires invertible covariance blocks (the W_q / W_r roots of ``sys``
    square to the needed inverses, pseudo roots square to pseudoinverses).
    """
    N, n = sys.N, sys.n
    q_inv = np.einsum("tij,tkj->tik", sys.W_q, sys.W_q)   # (N+1, n, n)
    F = np.zeros((N + 1, n, n))
    G = np.zeros((N, n, n))
    if proc_weight:
        AtQA = np.einsum("tji,tjk,tkl->til", sys.A_seq, q_inv[1:], sys.A_seq)
        F += proc_weight * q_inv
        F[:-1] += proc_weight * AtQA
        G -= proc_weight * np.einsum("tij,tjk->tik", q_inv[1:], sys.A_seq)
    if meas_weight:
        r_inv = np.einsum("tij,tkj->tik", sys.W_r, sys.W_r)
        CtRC = np.einsum("tji,tjk,tkl->til", sys.C_blocks, r_inv, sys.C_blocks)
        np.add.at(F, sys.obs_times, meas_weight * CtRC)
    return BlockTridiag(F_seq=F, G_seq=G)


def assemble_rhs(sys: StackedSystem, meas_weight: float = 1.0,
                 proc_weight: float = 1.0) -> np.ndarray:
    """meas_weight C^T R^{-1} y + proc_weight A^T Q^{-1} z."""
    r_inv = np.einsum("tij,tkj->tik", sys.W_r, sys.W_r)
    q_inv = np.einsum("tij,tkj->tik", sys.W_q, sys.W_q)
    rhs = proc_weight * sys.apply_At(
        np.einsum("tij,tj->ti", q_inv, sys.z).ravel())
    rhs += meas_weight * sys.apply_Ct(
        np.einsum("tij,tj->ti", r_inv, sys.y).ravel())
    return rhs


def assemble_normal_equations(sys: StackedSystem):
    """Normal equations (T, r) of the least-squares smoother.

    T has F_0 = Pi^{-1} + A_0^T Q_0^{-1} A_0,
    F_t = Q_{t-1}^{-1} + A_t^T Q_t^{-1} A_t + C_t^T R_t^{-1} C_t (the A-term
    vanishing at t = N), G_t = -Q_t^{-1} A_t; r = C^T R^{-1} y + A^T Q^{-1} z.
    """
    dets = np.linalg.det(sys.W_q)
    bad = np.nonzero(dets == 0.0)[0]
    if bad.size:
        raise SingularBlock(int(bad[0]), f"Q block {int(bad[0])} not invertible")
    T = assemble_weighted(sys, 1.0, 1.0)
    r = assemble_rhs(sys, 1.0, 1.0)
    return T, r


# ---------------------------------------------------------------------------
# spectral bounds
# ---------------------------------------------------------------------------

def power_iteration(op, dim: int, iters: int = 200, tol: float = 1e-8,
                    seed: int = 0):
    """Largest-eigenvalue estimate of a symmetric PSD operator.

    ``op`` is a callable x -> Op x (a BlockTridiag is accepted directly).
    Returns (beta, converged); beta is the final Rayleigh quotient, which
    approaches the top eigenvalue from below.
    """
    if isinstance(op, BlockTridiag):
        T = op
        dim = T.dim
        op = lambda x: matvec(T, x)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    beta = 0.0
    converged = False
    for _ in range(iters):
        w = op(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        beta_new = float(v @ w)
        v = w / nw
        if abs(beta_new - beta) <= tol * max(abs(beta_new), 1e-30):
            beta = beta_new
            converged = True
            break
        beta = beta_new
    return beta, converged
