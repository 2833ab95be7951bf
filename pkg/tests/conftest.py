import numpy as np
import pytest

from gks import plq, statespace as ss, firstorder as fo
from gks.bench import models


def scalar_model(y1=2.0):
    """n = m = 1, N = 1, A = C = Q = R = Pi = 1, mu = 0, u = 0."""
    return ss.LtvModel(A_seq=[[[1.0]]], B_seq=[[[0.0]]], C_seq=[[[1.0]]],
                       Q_seq=[[[1.0]]], R_seq=[[[1.0]]], mu=[0.0], Pi=[[1.0]],
                       u_seq=[[0.0]], y_seq=[[y1]])


def random_model(n=2, m=2, N=8, seed=0, stable=0.5):
    """Random well-conditioned LTV model with PD covariances."""
    rng = np.random.default_rng(seed)
    Q = np.stack([np.eye(n) + 0.3 * w @ w.T
                  for w in rng.standard_normal((N, n, n))])
    R = np.stack([np.eye(m) + 0.3 * w @ w.T
                  for w in rng.standard_normal((N, m, m))])
    return ss.LtvModel(
        A_seq=stable * rng.standard_normal((N, n, n)),
        B_seq=rng.standard_normal((N, n, 1)),
        C_seq=rng.standard_normal((N, m, n)),
        Q_seq=Q, R_seq=R,
        mu=rng.standard_normal(n), Pi=np.eye(n),
        u_seq=rng.standard_normal((N, 1)),
        y_seq=rng.standard_normal((N, m)))


def dense_operators(model):
    """Dense A_big, C_big, Q_big, R_big, z, y for small-instance oracles."""
    N, n, m = model.N, model.n, model.m
    nx = (N + 1) * n
    A = np.zeros((nx, nx))
    C = np.zeros((N * m, nx))
    for t in range(N + 1):
        A[t * n:(t + 1) * n, t * n:(t + 1) * n] = np.eye(n)
    for t in range(N):
        A[(t + 1) * n:(t + 2) * n, t * n:(t + 1) * n] = -model.A_seq[t]
        C[t * m:(t + 1) * m, (t + 1) * n:(t + 2) * n] = model.C_seq[t]
    Qb = np.zeros((nx, nx))
    Qb[:n, :n] = model.Pi
    Rb = np.zeros((N * m, N * m))
    for t in range(N):
        Qb[(t + 1) * n:(t + 2) * n, (t + 1) * n:(t + 2) * n] = model.Q_seq[t]
        Rb[t * m:(t + 1) * m, t * m:(t + 1) * m] = model.R_seq[t]
    z = np.concatenate([model.mu, model.offsets().ravel()])
    return A, C, Qb, Rb, z, model.y_seq.ravel()


def sine_problem(dt=0.2, N=50, sigma=0.3, seed=2, constrained=True,
                 V=None, J=None, gamma=1.0):
    inst = models.spline_model(dt, N, models.Sine(), sigma, 0.1, 100.0, seed)
    cons = plq.Box(-1.0, 1.0) if constrained else plq.Unconstrained()
    p = fo.SmootherProblem(ss.stack(inst.model),
                           V if V is not None else plq.L1(),
                           J if J is not None else plq.Quadratic(),
                           gamma, cons)
    return p, inst


ALL_LOSSES = [plq.Quadratic(), plq.L1(), plq.Huber(1.0), plq.Huber(0.6),
              plq.Vapnik(0.5), plq.HuberInsensitive(1.0, 0.5),
              plq.ElasticNet(0.5), plq.ElasticNet(0.2)]

PLQ_LOSSES = ALL_LOSSES  # every scalar loss has a conjugate encoding


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
