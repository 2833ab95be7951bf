"""Piecewise linear-quadratic penalties, proximity operators, and projections.

Each scalar loss has a conjugate representation

    rho(x) = sup_{v in V} { <v, b + B x> - 0.5 <v, M v> },   V = {v : H^T v <= h},

which drives the interior-point solver, plus closed-form value, prox,
subgradient, and conjugate used by the first-order methods.  Scalar losses act
coordinate-wise on vectors; ``GroupL2`` acts on a whole block.
"""

from __future__ import annotations

from dataclasses import dataclass
import re

import numpy as np


class NonSmoothLoss(Exception):
    """Raised when a gradient is requested from a nonsmooth loss."""


class UnsupportedLoss(Exception):
    """Raised when a loss has no conjugate (PLQ) representation."""


# ---------------------------------------------------------------------------
# scalar losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quadratic:
    """0.5 x^2"""


@dataclass(frozen=True)
class L1:
    """|x|"""


@dataclass(frozen=True)
class Huber:
    """0.5 x^2 below the elbow kappa, linear growth kappa|x| - 0.5 kappa^2 above."""
    kappa: float = 1.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("huber kappa must be positive")


@dataclass(frozen=True)
class Vapnik:
    """Deadzone penalty max(0, |x| - eps)."""
    eps: float = 0.5

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("vapnik eps must be nonnegative")


@dataclass(frozen=True)
class HuberInsensitive:
    """Smoothed deadzone: Huber(kappa) applied to max(0, |x| - eps)."""
    kappa: float = 1.0
    eps: float = 0.5

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


@dataclass(frozen=True)
class ElasticNet:
    """alpha |x| + (1 - alpha) 0.5 x^2."""
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class GroupL2:
    """Block two-norm ||x||_2 applied to a whole residual block."""


ScalarLoss = (Quadratic, L1, Huber, Vapnik, HuberInsensitive, ElasticNet, GroupL2)


def parse_loss(spec: str):
    """Parse a loss from a CLI string, e.g. ``"huber:kappa=1"`` or ``"l1"``."""
    name, _, argstr = spec.strip().lower().partition(":")
    kwargs = {}
    if argstr:
        for item in argstr.split(","):
            key, _, val = item.partition("=")
            if not val:
                raise ValueError(f"malformed loss argument {item!r} in {spec!r}")
            kwargs[key.strip()] = float(val)
    table = {
        "l2": Quadratic, "quadratic": Quadratic,
        "l1": L1,
        "huber": Huber,
        "vapnik": Vapnik,
        "huber-ins": HuberInsensitive, "huberins": HuberInsensitive,
        "enet": ElasticNet, "elastic-net": ElasticNet,
        "group-l2": GroupL2, "groupl2": GroupL2,
    }
    if name not in table:
        raise ValueError(f"unknown loss {name!r}")
    return table[name](**kwargs)


def format_loss(loss) -> str:
    if isinstance(loss, Quadratic):
        return "l2"
    if isinstance(loss, L1):
        return "l1"
    if isinstance(loss, Huber):
        return f"huber:kappa={loss.kappa:g}"
    if isinstance(loss, Vapnik):
        return f"vapnik:eps={loss.eps:g}"
    if isinstance(loss, HuberInsensitive):
        return f"huber-ins:kappa={loss.kappa:g},eps={loss.eps:g}"
    if isinstance(loss, ElasticNet):
        return f"enet:alpha={loss.alpha:g}"
    if isinstance(loss, GroupL2):
        return "group-l2"
    raise ValueError(f"unknown loss {loss!r}")


# ---------------------------------------------------------------------------
# values, gradients, subgradients
# ---------------------------------------------------------------------------

def eval(loss, x):
    """Elementwise loss value (``GroupL2``: the block norm of the whole array)."""
    x = np.asarray(x, dtype=float)
    if isinstance(loss, Quadratic):
        return 0.5 * x ** 2
    if isinstance(loss, L1):
        return np.abs(x)
    if isinstance(loss, Huber):
        k = loss.kappa
        return np.where(np.abs(x) <= k, 0.5 * x ** 2, k * np.abs(x) - 0.5 * k ** 2)
    if isinstance(loss, Vapnik):
        return np.maximum(0.0, np.abs(x) - loss.eps)
    if isinstance(loss, HuberInsensitive):
        t = np.maximum(0.0, np.abs(x) - loss.eps)
        k = loss.kappa
        return np.where(t <= k, 0.5 * t ** 2, k * t - 0.5 * k ** 2)
    if isinstance(loss, ElasticNet):
        a = loss.alpha
        return a * np.abs(x) + (1.0 - a) * 0.5 * x ** 2
    if isinstance(loss, GroupL2):
        if x.ndim == 2:
            return np.linalg.norm(x, axis=1)
        return np.linalg.norm(x.ravel())
    raise TypeError(f"not a scalar loss: {loss!r}")


def eval_sum(loss, W, r):
    """Sum of the loss over the weighted residual ``W r`` (one block)."""
    r = np.asarray(r, dtype=float)
    u = r if W is None else W @ r
    return float(np.sum(eval(loss, u)))


def grad(loss, x):
    """Elementwise gradient; only quadratic and Huber are smooth."""
    x = np.asarray(x, dtype=float)
    if isinstance(loss, Quadratic):
        return x.copy()
    if isinstance(loss, Huber):
        return np.clip(x, -loss.kappa, loss.kappa)
    raise NonSmoothLoss(f"{format_loss(loss)} has no gradient")


def subgradient(loss, x):
    """One element of the subdifferential (tie-break at kinks: 0 or midpoint)."""
    x = np.asarray(x, dtype=float)
    if isinstance(loss, Quadratic):
        return x.copy()
    if isinstance(loss, L1):
        return np.sign(x)
    if isinstance(loss, Huber):
        return np.clip(x, -loss.kappa, loss.kappa)
    if isinstance(loss, Vapnik):
        return np.where(np.abs(x) > loss.eps, np.sign(x), 0.0)
    if isinstance(loss, HuberInsensitive):
        t = np.maximum(0.0, np.abs(x) - loss.eps)
        return np.sign(x) * np.minimum(t, loss.kappa)
    if isinstance(loss, ElasticNet):
        a = loss.alpha
        return a * np.sign(x) + (1.0 - a) * x
    if isinstance(loss, GroupL2):
        if x.ndim == 2:
            n = np.linalg.norm(x, axis=1, keepdims=True)
            return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)
        n = np.linalg.norm(x.ravel())
        return x / n if n > 0 else np.zeros_like(x)
    raise TypeError(f"not a scalar loss: {loss!r}")


def conjugate_eval(loss, w):
    """Convex conjugate value; ``inf`` outside the conjugate domain."""
    w = np.asarray(w, dtype=float)
    inf = np.inf
    if isinstance(loss, Quadratic):
        return 0.5 * w ** 2
    if isinstance(loss, L1):
        return np.where(np.abs(w) <= 1.0 + 1e-14, 0.0, inf)
    if isinstance(loss, Huber):
        return np.where(np.abs(w) <= loss.kappa + 1e-14, 0.5 * w ** 2, inf)
    if isinstance(loss, Vapnik):
        return np.where(np.abs(w) <= 1.0 + 1e-14, loss.eps * np.abs(w), inf)
    if isinstance(loss, HuberInsensitive):
        return np.where(np.abs(w) <= loss.kappa + 1e-14,
                        loss.eps * np.abs(w) + 0.5 * w ** 2, inf)
    if isinstance(loss, ElasticNet):
        a = loss.alpha
        if a >= 1.0:
            return np.where(np.abs(w) <= 1.0 + 1e-14, 0.0, inf)
        return np.maximum(0.0, np.abs(w) - a) ** 2 / (2.0 * (1.0 - a))
    if isinstance(loss, GroupL2):
        n = np.linalg.norm(w.ravel())
        return 0.0 if n <= 1.0 + 1e-14 else inf
    raise TypeError(f"not a scalar loss: {loss!r}")


# ---------------------------------------------------------------------------
# proximity operators
# ---------------------------------------------------------------------------

def soft_threshold(y, thresh):
    return np.sign(y) * np.maximum(np.abs(y) - thresh, 0.0)


def prox(loss, eta, y):
    """argmin_u  eta * loss(u) + 0.5 ||u - y||^2, coordinate-wise.

    ``GroupL2`` treats ``y`` as one block.  ``eta`` must be positive.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    y = np.asarray(y, dtype=float)
    if isinstance(loss, Quadratic):
        return y / (1.0 + eta)
    if isinstance(loss, L1):
        return soft_threshold(y, eta)
    if isinstance(loss, Huber):
        k = loss.kappa
        # quadratic region solution y/(1+eta) is valid up to |y| = (1+eta) k
        return np.where(np.abs(y) <= (1.0 + eta) * k,
                        y / (1.0 + eta),
                        y - eta * k * np.sign(y))
    if isinstance(loss, Vapnik):
        e = loss.eps
        a = np.abs(y)
        out = np.where(a <= e, y,
                       np.where(a <= e + eta, e * np.sign(y),
                                y - eta * np.sign(y)))
        return out
    if isinstance(loss, HuberInsensitive):
        e, k = loss.eps, loss.kappa
        a = np.abs(y)
        quad = np.sign(y) * (a + eta * e) / (1.0 + eta)
        out = np.where(a <= e, y,
                       np.where(a <= e + (1.0 + eta) * k, quad,
                                y - eta * k * np.sign(y)))
        return out
    if isinstance(loss, ElasticNet):
        a = loss.alpha
        return soft_threshold(y, eta * a) / (1.0 + eta * (1.0 - a))
    if isinstance(loss, GroupL2):
        if y.ndim == 2:
            n = np.linalg.norm(y, axis=1, keepdims=True)
            shrink = np.maximum(0.0, 1.0 - eta / np.where(n > 0, n, 1.0))
            return shrink * y
        n = np.linalg.norm(y.ravel())
        if n <= eta:
            return np.zeros_like(y)
        return (1.0 - eta / n) * y
    raise TypeError(f"not a scalar loss: {loss!r}")


def prox_conjugate(loss, eta, y):
    """Prox of the conjugate via the Moreau identity:

    prox_{eta f*}(y) = y - eta prox_{f/eta}(y/eta).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    y = np.asarray(y, dtype=float)
    return y - eta * prox(loss, 1.0 / eta, y / eta)


# ---------------------------------------------------------------------------
# constraint sets and projections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Unconstrained:
    pass


@dataclass(frozen=True)
class Box:
    """Coordinate bounds lo <= x <= hi (scalars broadcast)."""
    lo: object
    hi: object


@dataclass(frozen=True)
class Ball2:
    tau: float = 1.0


@dataclass(frozen=True)
class Ball1:
    tau: float = 1.0


@dataclass(frozen=True)
class BallInf:
    tau: float = 1.0


@dataclass(frozen=True)
class Polyhedral:
    """{x : D^T x <= d}, with optional equality rows E^T x = e."""
    D: object
    d: object
    E: object = None
    e: object = None


ConstraintSet = (Unconstrained, Box, Ball2, Ball1, BallInf, Polyhedral)


def project_ball1(y, tau):
    """Euclidean projection onto the l1 ball, sort-and-threshold."""
    a = np.abs(y)
    if a.sum() <= tau:
        return y.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, y.size + 1)
    valid = u - (css - tau) / k > 0
    rho = np.max(np.nonzero(valid)[0]) + 1
    theta = (css[rho - 1] - tau) / rho
    return np.sign(y) * np.maximum(a - theta, 0.0)


def project(cset, y):
    """Euclidean projection onto the constraint set."""
    y = np.asarray(y, dtype=float)
    if isinstance(cset, Unconstrained):
        return y.copy()
    if isinstance(cset, Box):
        return np.clip(y, cset.lo, cset.hi)
    if isinstance(cset, Ball2):
        n = np.linalg.norm(y)
        return y.copy() if n <= cset.tau else (cset.tau / n) * y
    if isinstance(cset, BallInf):
        return np.clip(y, -cset.tau, cset.tau)
    if isinstance(cset, Ball1):
        return project_ball1(y, cset.tau)
    if isinstance(cset, Polyhedral):
        raise NotImplementedError(
            "projection onto a general polyhedron is an interior-point problem; "
            "use the interior module")
    raise TypeError(f"not a constraint set: {cset!r}")


# ---------------------------------------------------------------------------
# conjugate (PLQ) representations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlqPenalty:
    """Conjugate representation (b, B, M, V={v : H^T v <= h}) of a PLQ penalty."""
    b: np.ndarray
    B: np.ndarray
    M: np.ndarray
    H: np.ndarray
    h: np.ndarray

    def validate(self, tol: float = 1e-10) -> list:
        """Return a list of violated representation invariants (empty = valid)."""
        bad = []
        sv = np.linalg.svd(self.B, compute_uv=False)
        if sv.size == 0 or sv[-1] <= tol * max(sv[0], 1.0):
            bad.append("B not injective")
        if np.any(self.h < -tol):
            bad.append("0 not in V (some h < 0)")
        if self.M.size:
            ew = np.linalg.eigvalsh(0.5 * (self.M + self.M.T))
            if ew.size and ew[0] < -tol * max(1.0, abs(ew[-1])):
                bad.append("M not PSD")
        return bad


def plq_encoding(loss, gamma: float = 1.0) -> PlqPenalty:
    """Conjugate pieces of ``gamma * loss`` for one scalar argument.

    Scaling a PLQ by gamma dilates V by gamma and divides M by gamma.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if isinstance(loss, Quadratic):
        b = np.zeros(1); B = np.ones((1, 1)); M = np.eye(1)
        H = np.zeros((1, 0)); h = np.zeros(0)
    elif isinstance(loss, L1):
        b = np.zeros(1); B = np.ones((1, 1)); M = np.zeros((1, 1))
        H = np.array([[1.0, -1.0]]); h = np.array([1.0, 1.0])
    elif isinstance(loss, Huber):
        b = np.zeros(1); B = np.ones((1, 1)); M = np.eye(1)
        H = np.array([[1.0, -1.0]]); h = np.array([loss.kappa, loss.kappa])
    elif isinstance(loss, Vapnik):
        b = np.array([-loss.eps, -loss.eps]); B = np.array([[1.0], [-1.0]])
        M = np.zeros((2, 2))
        H = np.array([[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]])
        h = np.array([1.0, 1.0, 0.0, 0.0])
    elif isinstance(loss, HuberInsensitive):
        b = np.array([-loss.eps, -loss.eps]); B = np.array([[1.0], [-1.0]])
        M = np.eye(2)
        H = np.array([[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]])
        h = np.array([loss.kappa, loss.kappa, 0.0, 0.0])
    elif isinstance(loss, ElasticNet):
        a = loss.alpha
        if a >= 1.0:
            return plq_encoding(L1(), gamma)
        if a <= 0.0:
            return plq_encoding(Quadratic(), gamma)
        b = np.zeros(2); B = np.array([[1.0], [1.0]])
        M = np.diag([0.0, 1.0 / (1.0 - a)])
        H = np.array([[1.0, -1.0], [0.0, 0.0]]); h = np.array([a, a])
    else:
        raise UnsupportedLoss(f"{loss!r} has no polyhedral conjugate representation")
    return PlqPenalty(b=b, B=B, M=M / gamma, H=H, h=gamma * h)


def sup_eval(penalty: PlqPenalty, x) -> float:
    """Evaluate a PLQ penalty by solving its defining sup directly.

    Small active-set enumeration over the rows of V; exact for the tiny
    per-component duals used here.  Test oracle only, not a solver path.
    """
    from itertools import combinations

    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = penalty.b.size
    lin = penalty.b + penalty.B @ x
    M = penalty.M
    H, h = penalty.H, penalty.h
    nrows = h.size
    best = -np.inf
    feas_tol = 1e-9
    for nact in range(0, min(nrows, k) + 1):
        for act in combinations(range(nrows), nact):
            act = list(act)
            # KKT of max <v,lin> - .5 v'Mv  s.t. H[:,act]'v = h[act]
            Ha = H[:, act]
            kkt = np.block([[M, Ha], [Ha.T, np.zeros((nact, nact))]])
            rhs = np.concatenate([lin, h[act]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            v, mult = sol[:k], sol[k:]
            if np.any(mult < -feas_tol):
                continue
            if np.any(H.T @ v - h > feas_tol * max(1.0, np.abs(h).max(initial=1.0))):
                continue
            best = max(best, float(lin @ v - 0.5 * v @ M @ v))
    if not np.isfinite(best):
        # unbounded directions with singular M: value is +inf outside dom
        return np.inf
    return best
