"""Benchmark model generators: the DC motor and the integrated-Brownian
(cubic spline) tracking models, with seeded data generation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import statespace as ss


DC_A = np.array([[0.7, 0.0], [0.084, 1.0]])
DC_B = np.array([11.81, 0.62])
DC_C = np.array([[0.0, 1.0]])


@dataclass(frozen=True)
class Impulsive:
    """Sparse torque disturbance: d_t = Bernoulli(alpha) * N(0, 1)."""
    alpha: float = 0.01


@dataclass(frozen=True)
class GaussianDisturbance:
    """Dense torque disturbance d_t ~ N(0, sigma_d^2)."""
    sigma_d: float = 0.1


@dataclass(frozen=True)
class DcInstance:
    model: ss.LtvModel
    sim: ss.SimulationResult
    d_true: np.ndarray | None      # disturbance amplitudes (impulsive scenario)
    output_true: np.ndarray        # noiseless output C x_t, t = 1..N


def dc_motor_model(scenario, sigma_e: float, N: int, seed,
                   meas_noise=None) -> DcInstance:
    """DC motor instance: angle measurements of a motor driven by a torque
    disturbance through the input column (11.81, 0.62).

    The process covariance is the rank-one alpha * B B^T (impulsive) or
    sigma_d^2 * B B^T (Gaussian); x_0 = 0 exactly (zero prior covariance),
    u_t = 0.  For the impulsive scenario the disturbance sequence is redrawn
    (advancing the substream) until it is not identically zero, so the fit
    metric is well defined.
    """
    if isinstance(scenario, Impulsive):
        Q = scenario.alpha * np.outer(DC_B, DC_B)
        process = ss.BernoulliGaussian(scenario.alpha, DC_B)
    elif isinstance(scenario, GaussianDisturbance):
        Q = scenario.sigma_d ** 2 * np.outer(DC_B, DC_B)
        process = ss.Gaussian()
    else:
        raise TypeError(f"unknown scenario {scenario!r}")
    if meas_noise is None:
        meas_noise = ss.Gaussian()
    model = ss.LtvModel(
        A_seq=np.tile(DC_A, (N, 1, 1)), B_seq=np.tile(DC_B[:, None], (N, 1, 1)),
        C_seq=np.tile(DC_C, (N, 1, 1)), Q_seq=np.tile(Q, (N, 1, 1)),
        R_seq=np.tile([[sigma_e ** 2]], (N, 1, 1)),
        mu=np.zeros(2), Pi=np.zeros((2, 2)),
        u_seq=np.zeros((N, 1)), y_seq=np.zeros((N, 1)))
    redraw = 0
    while True:
        sim = ss.simulate(model, process, meas_noise,
                          np.random.SeedSequence([_as_entropy(seed), redraw]))
        if not isinstance(scenario, Impulsive) or np.linalg.norm(sim.amplitudes) > 0:
            break
        redraw += 1
    model = replace(model, y_seq=sim.y)
    return DcInstance(model=model, sim=sim, d_true=sim.amplitudes,
                      output_true=sim.x[1:, 1].copy())


def disturbance_readout(x: np.ndarray) -> np.ndarray:
    """d_hat_t = (1/11.81, 0) (x_{t+1} - A x_t) from a smoothed DC trajectory."""
    xs = np.asarray(x, dtype=float).reshape(-1, 2)
    return (xs[1:] - xs[:-1] @ DC_A.T)[:, 0] / DC_B[0]


@dataclass(frozen=True)
class Sine:
    """Ground truth x(t) = sin(-t)."""


@dataclass(frozen=True)
class ExpSin:
    """Ground truth x(t) = exp(sin(4t)), bounded in [exp(-1), exp(1)]."""


@dataclass(frozen=True)
class SplineInstance:
    model: ss.LtvModel
    times: np.ndarray            # measurement instants t_1..t_N
    truth: np.ndarray            # signal values at the measurement instants
    truth_state: np.ndarray      # (N+1, 2) true (velocity, position), t_0..t_N
    outlier_mask: np.ndarray


def spline_model(dt: float, N: int, signal, sigma_e: float,
                 outlier_frac: float, outlier_factor: float,
                 seed) -> SplineInstance:
    """Integrated-Brownian-motion tracking model with direct noisy samples.

    Transition [[1, 0], [dt, 1]] on (velocity, position), process covariance
    [[dt, dt^2/2], [dt^2/2, dt^3/3]], C = (0, 1).  Measurements are the
    signal plus Gaussian noise, a seeded fraction replaced by outliers with
    standard deviation scaled by ``outlier_factor``.  The prior is diffuse:
    mu = 0, Pi = I.
    """
    if isinstance(signal, Sine):
        f = lambda t: np.sin(-t)
        fdot = lambda t: -np.cos(t)
    elif isinstance(signal, ExpSin):
        f = lambda t: np.exp(np.sin(4.0 * t))
        fdot = lambda t: 4.0 * np.cos(4.0 * t) * np.exp(np.sin(4.0 * t))
    else:
        raise TypeError(f"unknown signal {signal!r}")
    ts = dt * np.arange(0, N + 1)
    truth = f(ts[1:])
    rng = np.random.default_rng(np.random.SeedSequence([_as_entropy(seed)]))
    gate = rng.random(N) < outlier_frac
    e = rng.standard_normal(N) * sigma_e * np.where(gate, outlier_factor, 1.0)
    y = (truth + e)[:, None]
    model = ss.LtvModel(
        A_seq=np.tile(np.array([[1.0, 0.0], [dt, 1.0]]), (N, 1, 1)),
        B_seq=np.zeros((N, 2, 1)),
        C_seq=np.tile(np.array([[0.0, 1.0]]), (N, 1, 1)),
        Q_seq=np.tile(np.array([[dt, dt ** 2 / 2], [dt ** 2 / 2, dt ** 3 / 3]]),
                      (N, 1, 1)),
        R_seq=np.tile([[sigma_e ** 2]], (N, 1, 1)),
        mu=np.zeros(2), Pi=np.eye(2),
        u_seq=np.zeros((N, 1)), y_seq=y)
    truth_state = np.column_stack([fdot(ts), f(ts)])
    return SplineInstance(model=model, times=ts[1:], truth=truth,
                          truth_state=truth_state, outlier_mask=gate)


def _as_entropy(seed) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF
