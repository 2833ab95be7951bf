"""Time-varying linear state-space models and their stacked block form.

A model over horizon N carries transitions A_0..A_{N-1}, observations
C_1..C_N, process covariances Q_0..Q_{N-1}, measurement covariances R_1..R_N,
and a prior (mu, Pi) on x_0.  ``stack`` produces the block operators of the
full least-squares objective

    ||R^{-1/2}(y - C x)||^2 + ||Q^{-1/2}(z - A x)||^2

without ever materializing the big matrices; ``decorrelate`` removes
cross-covariance between process and measurement noise; ``pseudo_weights``
handles singular covariances by pseudoinverse weights plus nullspace
equality constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json

import numpy as np


class InvalidModel(Exception):
    """Raised when an operation is applied to a model that fails validation."""


class SingularR(Exception):
    """Raised by decorrelate when an R_t with nonzero S_t is singular."""


@dataclass(frozen=True)
class Violation:
    """One validation failure: machine-readable code, offending field, index."""
    code: str
    field: str
    t: int | None = None
    detail: str = ""

    def __str__(self):
        where = f"[{self.t}]" if self.t is not None else ""
        return f"{self.code}({self.field}{where}) {self.detail}".rstrip()


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LtvModel:
    """Linear time-varying model x_{t+1} = A_t x_t + B_t u_t + w_t + v_t,
    y_t = C_t x_t + e_t, with x_0 ~ (mu, Pi), v_t ~ (0, Q_t), e_t ~ (0, R_t).

    Sequences are stacked arrays: A_seq (N,n,n), B_seq (N,n,p), C_seq (N,m,n),
    Q_seq (N,n,n), R_seq (N,m,m), u_seq (N,p), y_seq (N,m).  Index i of C_seq,
    R_seq, y_seq refers to time t = i+1.  S_seq (N,n,m), when present, is the
    cross-covariance E[v_t e_t^T] (S_0 must be zero: v_0 is independent).
    w_seq holds known additive transition offsets (used after decorrelation).
    """

    A_seq: np.ndarray
    B_seq: np.ndarray
    C_seq: np.ndarray
    Q_seq: np.ndarray
    R_seq: np.ndarray
    mu: np.ndarray
    Pi: np.ndarray
    u_seq: np.ndarray
    y_seq: np.ndarray
    S_seq: np.ndarray | None = None
    w_seq: np.ndarray | None = None

    def __post_init__(self):
        for name in ("A_seq", "B_seq", "C_seq", "Q_seq", "R_seq",
                     "mu", "Pi", "u_seq", "y_seq"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.S_seq is not None:
            object.__setattr__(self, "S_seq", np.asarray(self.S_seq, dtype=float))
        if self.w_seq is not None:
            object.__setattr__(self, "w_seq", np.asarray(self.w_seq, dtype=float))

    @property
    def N(self) -> int:
        # the horizon is the measurement count
        return self.y_seq.shape[0]

    @property
    def n(self) -> int:
        return self.A_seq.shape[1]

    @property
    def m(self) -> int:
        return self.C_seq.shape[1]

    @property
    def p(self) -> int:
        return self.B_seq.shape[2]

    def offsets(self) -> np.ndarray:
        """Known part of each transition, B_t u_t + w_t, shape (N, n)."""
        off = np.einsum("tij,tj->ti", self.B_seq, self.u_seq)
        if self.w_seq is not None:
            off = off + self.w_seq
        return off


def _sym_violation(mat, rtol=1e-12):
    scale = max(np.abs(mat).max(), 1.0)
    return np.abs(mat - mat.T).max() > rtol * scale


def _psd_violation(mat, atol_scale=1e-10):
    ew = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    scale = max(np.trace(np.abs(mat)), 1.0)
    return ew[0] < -atol_scale * scale


def validate(model: LtvModel) -> list[Violation]:
    """Check every model invariant; returns all violations, raises nothing."""
    out = []
    N, n, m = model.N, model.n, model.m
    seq_shapes = {
        "A_seq": (N, n, n), "B_seq": (N, n, model.p), "C_seq": (N, m, n),
        "Q_seq": (N, n, n), "R_seq": (N, m, m),
        "u_seq": (N, model.p), "y_seq": (N, m),
    }
    for name, shape in seq_shapes.items():
        arr = getattr(model, name)
        if arr.shape[0] != N:
            out.append(Violation("length_mismatch", name.split("_")[0],
                                 detail=f"expected {N}, got {arr.shape[0]}"))
        elif arr.shape != shape:
            out.append(Violation("shape_mismatch", name.split("_")[0],
                                 detail=f"expected {shape}, got {arr.shape}"))
    if model.mu.shape != (n,):
        out.append(Violation("shape_mismatch", "mu"))
    if model.Pi.shape != (n, n):
        out.append(Violation("shape_mismatch", "Pi"))
    if model.w_seq is not None and model.w_seq.shape != (N, n):
        out.append(Violation("shape_mismatch", "w"))
    if out:
        return out

    for t in range(N):
        if _sym_violation(model.Q_seq[t]):
            out.append(Violation("not_symmetric", "Q", t))
        elif _psd_violation(model.Q_seq[t]):
            out.append(Violation("not_psd", "Q", t))
        if _sym_violation(model.R_seq[t]):
            out.append(Violation("not_symmetric", "R", t + 1))
        elif _psd_violation(model.R_seq[t]):
            out.append(Violation("not_psd", "R", t + 1))
    if _sym_violation(model.Pi):
        out.append(Violation("not_symmetric", "Pi"))
    elif _psd_violation(model.Pi):
        out.append(Violation("not_psd", "Pi"))

    if model.S_seq is not None:
        S = model.S_seq
        if S.shape != (N, n, m):
            out.append(Violation("shape_mismatch", "S"))
        else:
            if np.abs(S[0]).max() > 0:
                out.append(Violation("nonzero_s0", "S", 0,
                                     "v_0 must be independent of e_0"))
            for t in range(1, N):
                # S_t pairs v_t with e_t, whose covariance is R_seq[t-1]
                joint = np.block([[model.Q_seq[t], S[t]],
                                  [S[t].T, model.R_seq[t - 1]]])
                if _psd_violation(joint):
                    out.append(Violation("joint_not_psd", "S", t))
    return out


# ---------------------------------------------------------------------------
# symmetric matrix helpers
# ---------------------------------------------------------------------------

PINV_RCOND = 1e-10  # singular values below this fraction of the largest are zero


def sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    ew, ev = np.linalg.eigh(0.5 * (mat + mat.T))
    ew = np.maximum(ew, 0.0)
    return (ev * np.sqrt(ew)) @ ev.T


def sym_pinv(mat: np.ndarray, rcond: float = PINV_RCOND):
    """Pseudoinverse, its symmetric root, rank, and an orthonormal nullspace basis."""
    ew, ev = np.linalg.eigh(0.5 * (mat + mat.T))
    cutoff = rcond * max(ew.max(initial=0.0), 0.0)
    keep = ew > cutoff
    inv_ew = np.where(keep, 1.0 / np.where(keep, ew, 1.0), 0.0)
    pinv = (ev * inv_ew) @ ev.T
    root = (ev * np.sqrt(inv_ew)) @ ev.T
    null_basis = ev[:, ~keep]
    return pinv, root, int(keep.sum()), null_basis


def sym_inv_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root; requires a positive definite argument."""
    ew, ev = np.linalg.eigh(0.5 * (mat + mat.T))
    if ew[0] <= PINV_RCOND * max(ew[-1], 0.0) or ew[0] <= 0:
        raise np.linalg.LinAlgError("matrix not positive definite")
    return (ev / np.sqrt(ew)) @ ev.T


# ---------------------------------------------------------------------------
# stacked system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StackedSystem:
    """Block form of the smoothing objective.

    The state vector stacks x_0..x_N (length nx = n(N+1)).  A is block
    bidiagonal with identity diagonal and -A_t subdiagonal; C maps x_t to
    measurement block t (obs_times[i] gives the state index observed by
    block i, normally 1..N).  Weight blocks W_r = R_t^{-1/2} (or pseudo
    root) and W_q = (Pi, Q_0..Q_{N-1})^{-1/2} whiten the residuals.
    """

    A_seq: np.ndarray            # (N, n, n)
    C_blocks: np.ndarray         # (nobs, m, n)
    obs_times: np.ndarray        # (nobs,) state index of each measurement block
    Q_blocks: np.ndarray         # (N+1, n, n) == (Pi, Q_0..Q_{N-1})
    R_blocks: np.ndarray         # (nobs, m, m)
    W_q: np.ndarray              # (N+1, n, n) symmetric roots of Q_blocks^{-1} or pinv
    W_r: np.ndarray              # (nobs, m, m)
    z: np.ndarray                # (N+1, n): (mu, B_t u_t + w_t)
    y: np.ndarray                # (nobs, m)

    @property
    def N(self) -> int:
        return self.A_seq.shape[0]

    @property
    def n(self) -> int:
        return self.A_seq.shape[1]

    @property
    def m(self) -> int:
        return self.C_blocks.shape[1]

    @property
    def nx(self) -> int:
        return (self.N + 1) * self.n

    @property
    def nmeas(self) -> int:
        return self.C_blocks.shape[0] * self.m

    def states(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(self.N + 1, self.n)

    # -- block operators (all O(N n^2) matvecs) --

    def apply_A(self, x: np.ndarray) -> np.ndarray:
        """A x: (x_0, x_1 - A_0 x_0, ..., x_N - A_{N-1} x_{N-1}), flat."""
        xs = self.states(x)
        out = xs.copy()
        out[1:] -= np.einsum("tij,tj->ti", self.A_seq, xs[:-1])
        return out.ravel()

    def apply_At(self, v: np.ndarray) -> np.ndarray:
        vs = np.asarray(v, dtype=float).reshape(self.N + 1, self.n)
        out = vs.copy()
        out[:-1] -= np.einsum("tji,tj->ti", self.A_seq, vs[1:])
        return out.ravel()

    def apply_C(self, x: np.ndarray) -> np.ndarray:
        xs = self.states(x)
        return np.einsum("tij,tj->ti", self.C_blocks, xs[self.obs_times]).ravel()

    def apply_Ct(self, w: np.ndarray) -> np.ndarray:
        ws = np.asarray(w, dtype=float).reshape(-1, self.m)
        out = np.zeros((self.N + 1, self.n))
        np.add.at(out, self.obs_times, np.einsum("tji,tj->ti", self.C_blocks, ws))
        return out.ravel()

    def meas_residual(self, x: np.ndarray) -> np.ndarray:
        """Whitened measurement residual W_r (y - C x), shape (nobs, m)."""
        xs = self.states(x)
        raw = self.y - np.einsum("tij,tj->ti", self.C_blocks, xs[self.obs_times])
        return np.einsum("tij,tj->ti", self.W_r, raw)

    def proc_residual(self, x: np.ndarray) -> np.ndarray:
        """Whitened process residual W_q (z - A x), shape (N+1, n)."""
        raw = self.z - self.apply_A(x).reshape(self.N + 1, self.n)
        return np.einsum("tij,tj->ti", self.W_q, raw)

    def drop_measurements(self, keep: np.ndarray) -> "StackedSystem":
        """Sub-system with only the measurement blocks selected by ``keep``."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]
        return replace(self, C_blocks=self.C_blocks[keep],
                       obs_times=self.obs_times[keep],
                       R_blocks=self.R_blocks[keep],
                       W_r=self.W_r[keep], y=self.y[keep])


def stack(model: LtvModel, pseudo: bool = False) -> StackedSystem:
    """Build the stacked block system for a validated model.

    With ``pseudo=True`` singular covariance blocks get pseudoinverse roots
    (the accompanying nullspace constraints come from ``pseudo_weights``);
    otherwise every covariance block must be invertible.
    """
    bad = validate(model)
    if bad:
        raise InvalidModel("; ".join(str(v) for v in bad))
    if model.S_seq is not None and np.abs(model.S_seq).max() > 0:
        raise InvalidModel("cross-covariance present: call decorrelate first")
    N, n = model.N, model.n
    q_blocks = np.concatenate([model.Pi[None], model.Q_seq], axis=0)
    if pseudo:
        W_q = np.stack([sym_pinv(q_blocks[t])[1] for t in range(N + 1)])
        W_r = np.stack([sym_pinv(model.R_seq[t])[1] for t in range(N)])
    else:
        try:
            W_q = np.stack([sym_inv_sqrt(q_blocks[t]) for t in range(N + 1)])
            W_r = np.stack([sym_inv_sqrt(model.R_seq[t]) for t in range(N)])
        except np.linalg.LinAlgError as err:
            raise InvalidModel(f"singular covariance block: {err}; "
                               "use pseudo=True with pseudo_weights") from err
    z = np.concatenate([model.mu[None], model.offsets()], axis=0)
    return StackedSystem(
        A_seq=model.A_seq, C_blocks=model.C_seq,
        obs_times=np.arange(1, N + 1), Q_blocks=q_blocks,
        R_blocks=model.R_seq, W_q=W_q, W_r=W_r, z=z, y=model.y_seq)


def least_squares_objective(sys: StackedSystem, x: np.ndarray) -> float:
    """||R^{-1/2}(y - Cx)||^2 + ||Q^{-1/2}(z - Ax)||^2 (no 1/2 factors)."""
    rm = sys.meas_residual(x)
    rp = sys.proc_residual(x)
    return float(np.sum(rm * rm) + np.sum(rp * rp))


# ---------------------------------------------------------------------------
# correlated noise
# ---------------------------------------------------------------------------

def decorrelate(model: LtvModel) -> LtvModel:
    """Fold cross-covariance S_t = E[v_t e_t^T] into the model.

    Returns an equivalent model with independent noises: for t >= 1,
    A_t <- A_t - S_t R_t^{-1} C_t, Q_t <- Q_t - S_t R_t^{-1} S_t^T, and the
    output injection S_t R_t^{-1} y_t becomes a known transition offset.
    """
    if model.S_seq is None:
        return model
    bad = validate(model)
    if bad:
        raise InvalidModel("; ".join(str(v) for v in bad))
    N = model.N
    A_new = model.A_seq.copy()
    Q_new = model.Q_seq.copy()
    w_new = np.zeros((N, model.n)) if model.w_seq is None else model.w_seq.copy()
    for t in range(1, N):
        S_t = model.S_seq[t]
        if np.abs(S_t).max() == 0:
            continue
        R_t = model.R_seq[t - 1]          # covariance of e_t
        pinv, _, rank, _ = sym_pinv(R_t)
        if rank < R_t.shape[0]:
            raise SingularR(f"R_{t} is singular with nonzero S_{t}")
        gain = S_t @ pinv                 # n x m
        A_new[t] = A_new[t] - gain @ model.C_seq[t - 1]
        Q_new[t] = Q_new[t] - gain @ S_t.T
        w_new[t] = w_new[t] + gain @ model.y_seq[t - 1]
    return replace(model, A_seq=A_new, Q_seq=Q_new, w_seq=w_new, S_seq=None)


# ---------------------------------------------------------------------------
# singular covariances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EqualityRow:
    """One linear equality on the stacked state: coeff_left x_{t} +
    coeff_right x_{t+1} = rhs (coeff_right is None for single-time rows)."""
    t: int
    coeff_left: np.ndarray
    coeff_right: np.ndarray | None
    rhs: float


@dataclass(frozen=True)
class PseudoWeights:
    """Pseudoinverse weights and nullspace data for singular covariances.

    q_pinv / q_root / q_proj are indexed like the stacked Q blocks
    (index 0 = prior Pi, index t+1 = Q_t); r_* follow R_1..R_N.
    ``equality_rows`` pins the state evolution inside the covariance
    nullspaces: basis^T (x_{t+1} - A_t x_t - offset_t) = 0 per deficient
    Q_t, basis^T (x_0 - mu) = 0 for a deficient prior, and
    basis^T (y_t - C_t x_t) = 0 per deficient R_t.
    """
    q_pinv: np.ndarray
    q_root: np.ndarray
    q_proj: np.ndarray
    r_pinv: np.ndarray
    r_root: np.ndarray
    r_proj: np.ndarray
    equality_rows: tuple


def pseudo_weights(model: LtvModel) -> PseudoWeights:
    bad = validate(model)
    if bad:
        raise InvalidModel("; ".join(str(v) for v in bad))
    N, n, m = model.N, model.n, model.m
    q_blocks = np.concatenate([model.Pi[None], model.Q_seq], axis=0)
    offsets = model.offsets()

    q_pinv = np.empty_like(q_blocks)
    q_root = np.empty_like(q_blocks)
    q_proj = np.empty_like(q_blocks)
    rows = []
    for i in range(N + 1):
        pinv, root, rank, null_basis = sym_pinv(q_blocks[i])
        q_pinv[i], q_root[i] = pinv, root
        q_proj[i] = np.eye(n) - q_blocks[i] @ pinv
        if rank < n:
            for j in range(null_basis.shape[1]):
                basis = null_basis[:, j]
                if i == 0:
                    rows.append(EqualityRow(0, basis.copy(), None,
                                            float(basis @ model.mu)))
                else:
                    t = i - 1
                    rows.append(EqualityRow(
                        t, -(basis @ model.A_seq[t]), basis.copy(),
                        float(basis @ offsets[t])))

    r_pinv = np.empty_like(model.R_seq)
    r_root = np.empty_like(model.R_seq)
    r_proj = np.empty_like(model.R_seq)
    for i in range(N):
        pinv, root, rank, null_basis = sym_pinv(model.R_seq[i])
        r_pinv[i], r_root[i] = pinv, root
        r_proj[i] = np.eye(m) - model.R_seq[i] @ pinv
        if rank < m:
            for j in range(null_basis.shape[1]):
                basis = null_basis[:, j]
                rows.append(EqualityRow(i + 1, basis @ model.C_seq[i], None,
                                        float(basis @ model.y_seq[i])))
    return PseudoWeights(q_pinv, q_root, q_proj, r_pinv, r_root, r_proj,
                         tuple(rows))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gaussian:
    """Draw noise from the model covariances."""


@dataclass(frozen=True)
class BernoulliGaussian:
    """Sparse scalar channel: amp_t = Bernoulli(alpha) * N(0,1), noise =
    direction * amp_t.  Matches covariance alpha * dir dir^T."""
    alpha: float
    direction: np.ndarray | None = None


@dataclass(frozen=True)
class GaussianMixtureOutlier:
    """Model covariance scaled by factor^2 with probability alpha."""
    alpha: float
    factor: float


NoiseSpec = (Gaussian, BernoulliGaussian, GaussianMixtureOutlier)


@dataclass(frozen=True)
class SimulationResult:
    x: np.ndarray            # (N+1, n) states including x_0
    y: np.ndarray            # (N, m) measurements y_1..y_N
    v: np.ndarray            # (N, n) process noise draws
    e: np.ndarray            # (N, m) measurement noise draws
    amplitudes: np.ndarray | None = None   # scalar channel of BernoulliGaussian


def _draw_block_noise(rng, spec, cov_blocks, dim, N):
    roots = np.stack([sym_sqrt(cov_blocks[t]) for t in range(N)])
    if isinstance(spec, Gaussian):
        raw = rng.standard_normal((N, dim))
        return np.einsum("tij,tj->ti", roots, raw), None
    if isinstance(spec, BernoulliGaussian):
        if spec.direction is None:
            raise ValueError("BernoulliGaussian needs a direction for simulation")
        gate = rng.random(N) < spec.alpha
        amp = gate * rng.standard_normal(N)
        return np.outer(amp, np.asarray(spec.direction, dtype=float)), amp
    if isinstance(spec, GaussianMixtureOutlier):
        gate = rng.random(N) < spec.alpha
        scale = np.where(gate, spec.factor, 1.0)
        raw = rng.standard_normal((N, dim))
        return scale[:, None] * np.einsum("tij,tj->ti", roots, raw), None
    raise TypeError(f"not a noise spec: {spec!r}")


def simulate(model: LtvModel, process_noise, measurement_noise,
             seed) -> SimulationResult:
    """Simulate the model; deterministic and bit-reproducible for a seed.

    ``seed`` may be an int or a numpy SeedSequence.  x_0 is drawn from
    (mu, Pi); the trajectory then follows the recursion exactly.
    """
    rng = np.random.default_rng(seed)
    N, n, m = model.N, model.n, model.m
    x0 = model.mu + sym_sqrt(model.Pi) @ rng.standard_normal(n)
    v, amp = _draw_block_noise(rng, process_noise, model.Q_seq, n, N)
    e, _ = _draw_block_noise(rng, measurement_noise, model.R_seq, m, N)
    offsets = model.offsets()
    x = np.empty((N + 1, n))
    x[0] = x0
    if np.abs(model.A_seq).max() == 0.0:
        x[1:] = offsets + v
    else:
        for t in range(N):
            x[t + 1] = model.A_seq[t] @ x[t] + offsets[t] + v[t]
    y = np.einsum("tij,tj->ti", model.C_seq, x[1:]) + e
    return SimulationResult(x=x, y=y, v=v, e=e, amplitudes=amp)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def model_to_json(model: LtvModel) -> str:
    """Serialize with per-t matrix arrays, row-major nested lists."""
    doc = {
        "N": model.N, "n": model.n, "m": model.m, "p": model.p,
        "A_seq": model.A_seq.tolist(), "B_seq": model.B_seq.tolist(),
        "C_seq": model.C_seq.tolist(), "Q_seq": model.Q_seq.tolist(),
        "R_seq": model.R_seq.tolist(), "mu": model.mu.tolist(),
        "Pi": model.Pi.tolist(), "u_seq": model.u_seq.tolist(),
        "y_seq": model.y_seq.tolist(),
    }
    if model.S_seq is not None:
        doc["S_seq"] = model.S_seq.tolist()
    if model.w_seq is not None:
        doc["w_seq"] = model.w_seq.tolist()
    return json.dumps(doc)


def model_from_json(text: str) -> LtvModel:
    doc = json.loads(text)
    return LtvModel(
        A_seq=doc["A_seq"], B_seq=doc["B_seq"], C_seq=doc["C_seq"],
        Q_seq=doc["Q_seq"], R_seq=doc["R_seq"], mu=doc["mu"], Pi=doc["Pi"],
        u_seq=doc["u_seq"], y_seq=doc["y_seq"],
        S_seq=doc.get("S_seq"), w_seq=doc.get("w_seq"))
