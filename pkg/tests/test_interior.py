import numpy as np
import pytest
from dataclasses import replace

from gks import plq, statespace as ss, blocktridiag as btd, firstorder as fo
from gks import interior as ip
from gks.bench import models
from conftest import scalar_model, random_model, sine_problem


def quad_problem(model, cons=None):
    return fo.SmootherProblem(ss.stack(model), plq.Quadratic(),
                              plq.Quadratic(), 1.0,
                              cons or plq.Unconstrained())


def dc_instance(N=40, alpha=0.01, seed=11):
    inst = models.dc_motor_model(models.Impulsive(alpha), 0.1, N, seed)
    pw = ss.pseudo_weights(inst.model)
    sysm = ss.stack(inst.model, pseudo=True)
    return inst, pw, sysm


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------

def test_quad_unconstrained_equals_rts():
    model = random_model(n=2, m=2, N=6, seed=1)
    p = quad_problem(model)
    prob = ip.smoother_to_plq(p)
    x, duals, rep = ip.solve_ip(prob, eps=1e-10)
    T, r = btd.assemble_normal_equations(p.sys)
    x_rts = btd.solve_rts(T, r)
    assert np.abs(x - x_rts).max() <= 1e-8 * max(1, np.abs(x_rts).max())
    # primal value consistent with the smoothing objective
    assert ip.eval_primal(prob, x) == pytest.approx(fo.objective(p, x),
                                                    abs=1e-10)


def test_box_row_count():
    model = random_model(n=2, m=1, N=5, seed=2)
    p = quad_problem(model, plq.Box(-1.0, 1.0))
    prob = ip.smoother_to_plq(p)
    assert prob.d.size == 2 * p.sys.nx


def test_lasso_dual_dimension_audit():
    """Rank-one process noise keeps one l1 channel per step: total dual
    dimension mN (quadratic measurement) + N (process) with Pi = 0."""
    inst, pw, sysm = dc_instance(N=30)
    p = fo.SmootherProblem(sysm, plq.Quadratic(), plq.L1(), 1.0)
    prob = ip.smoother_to_plq(p, equality_rows=pw.equality_rows)
    dims = {plq.format_loss(g.loss): g.count * g.k for g in prob.groups}
    assert dims["l2"] == 30      # m N
    assert dims["l1"] == 30      # one surviving whitened row per step
    # two prior rows + one nullspace row per step
    assert prob.e.size == 30 + 2


def test_ball2_unsupported():
    p = quad_problem(random_model(N=3), plq.Ball2(1.0))
    with pytest.raises(ip.UnsupportedConstraint):
        ip.smoother_to_plq(p)


def test_group_l2_unsupported():
    model = random_model(N=3)
    p = fo.SmootherProblem(ss.stack(model), plq.Quadratic(), plq.GroupL2(), 1.0)
    with pytest.raises(plq.UnsupportedLoss):
        ip.smoother_to_plq(p)


def test_polyhedral_local_rows():
    model = random_model(n=2, m=1, N=3, seed=3)
    nx = (3 + 1) * 2
    D = np.zeros((nx, 2))
    D[1, 0] = 1.0                 # x_0 coordinate 1 <= 0.5
    D[2, 1] = 1.0                 # row spanning blocks 1..2
    D[4, 1] = -1.0
    p = quad_problem(model, plq.Polyhedral(D, np.array([0.5, 3.0])))
    prob = ip.smoother_to_plq(p)
    assert prob.d.size == 2
    x, _, _ = ip.solve_ip(prob, eps=1e-9)
    assert x[1] <= 0.5 + 1e-8
    assert x[2] - x[4] <= 3.0 + 1e-8


# ---------------------------------------------------------------------------
# KKT residual
# ---------------------------------------------------------------------------

def test_kkt_residual_at_solution():
    model = random_model(n=2, m=2, N=5, seed=4)
    p = quad_problem(model)
    prob = ip.smoother_to_plq(p)
    x, (v, omega, lam), _ = ip.solve_ip(prob, eps=1e-12)
    state = ip.initial_state(prob)
    state.x, state.v = x, v
    flat, blocks = ip.kkt_residual(prob, state, mu=0.0)
    assert np.abs(blocks["dual_x"]).max() <= 1e-10
    for b in blocks["dual_v"]:
        assert np.abs(b).max() <= 1e-10


def test_kkt_complementarity_definition():
    p, _ = sine_problem(N=10)
    prob = ip.smoother_to_plq(p)
    state = ip.initial_state(prob)
    rng = np.random.default_rng(0)
    state.s = 0.5 + rng.random(state.s.shape)
    state.omega = 0.5 + rng.random(state.omega.shape)
    mu = float(np.mean(state.omega * state.s))
    _, blocks = ip.kkt_residual(prob, state, mu=mu)
    assert np.allclose(blocks["comp_ineq"], state.omega * state.s - mu)


def test_kkt_primal_infeasibility_sign():
    p, _ = sine_problem(N=5)
    prob = ip.smoother_to_plq(p)
    state = ip.initial_state(prob)
    state.x = np.full(prob.nx, 2.0)       # outside the box [-1, 1]
    state.s = np.zeros_like(state.s)
    _, blocks = ip.kkt_residual(prob, state)
    # rows x_i <= 1 are violated by +1
    assert blocks["primal_ineq"].max() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Newton step
# ---------------------------------------------------------------------------

def _dense_rows(rows, nx, n):
    D = np.zeros((rows.count, nx))
    for i in range(rows.count):
        t = rows.t_left[i]
        D[i, t * n:(t + 1) * n] = rows.coef_left[i]
        if rows.has_right[i]:
            D[i, (t + 1) * n:(t + 2) * n] = rows.coef_right[i]
    return D


def _dense_newton(prob, st, mu):
    """Solve the full linearized F_mu system densely (oracle)."""
    nx = prob.nx
    n = prob.n
    nv = [st.v[i].size for i in range(len(prob.groups))]
    nr = [st.r[i].size for i in range(len(prob.groups))]
    n1 = st.s.size
    n3 = st.lam.size
    dim = nx + sum(nv) + n1 + sum(nr) + n1 + sum(nr) + n3
    off_v, off_r, off_w = [], [], []
    c = nx
    for s_ in nv:
        off_v.append(c)
        c += s_
    off_s = c
    c += n1
    for s_ in nr:
        off_r.append(c)
        c += s_
    off_om = c
    c += n1
    for s_ in nr:
        off_w.append(c)
        c += s_
    off_lam = c
    c += n3
    assert c == dim
    Dm = _dense_rows(prob.ineq, nx, n)
    Em = _dense_rows(prob.eq, nx, n)
    J = np.zeros((dim, dim))
    F = np.zeros(dim)
    # R1
    R1val = Dm.T @ st.omega + (Em.T @ st.lam if n3 else 0.0)
    J[0:nx, off_om:off_om + n1] = Dm.T
    if n3:
        J[0:nx, off_lam:off_lam + n3] = Em.T
    for gi, g in enumerate(prob.groups):
        Bd = _dense_rows(g.rows, nx, n)
        k = g.k
        Bs = g.enc.B[:, 0]
        for cch in range(g.count):
            J[0:nx, off_v[gi] + cch * k: off_v[gi] + (cch + 1) * k] += \
                np.outer(Bd[cch], Bs)
        R1val = R1val + Bd.T @ (st.v[gi] @ Bs)
    F[0:nx] = R1val
    row = nx
    # R2 (with the implementation's v-regularization)
    for gi, g in enumerate(prob.groups):
        Bd = _dense_rows(g.rows, nx, n)
        k, l = g.k, g.ell
        Bs = g.enc.B[:, 0]
        u = g.a + Bd @ st.x
        for cch in range(g.count):
            rr = row + cch * k
            J[rr:rr + k, off_v[gi] + cch * k:off_v[gi] + (cch + 1) * k] = \
                g.enc.M + ip.V_REG * np.eye(k)
            if l:
                J[rr:rr + k, off_w[gi] + cch * l:off_w[gi] + (cch + 1) * l] = g.enc.H
            J[rr:rr + k, 0:nx] = -np.outer(Bs, Bd[cch])
            F[rr:rr + k] = (g.enc.M @ st.v[gi][cch]
                            + (g.enc.H @ st.w[gi][cch] if l else 0.0)
                            - Bs * u[cch] - g.enc.b)
        row += g.count * k
    # R3
    J[row:row + n1, 0:nx] = Dm
    J[row:row + n1, off_s:off_s + n1] = np.eye(n1)
    F[row:row + n1] = Dm @ st.x - prob.d + st.s
    row += n1
    # R4
    for gi, g in enumerate(prob.groups):
        k, l = g.k, g.ell
        for cch in range(g.count):
            rr = row + cch * l
            J[rr:rr + l, off_v[gi] + cch * k:off_v[gi] + (cch + 1) * k] = g.enc.H.T
            J[rr:rr + l, off_r[gi] + cch * l:off_r[gi] + (cch + 1) * l] = np.eye(l)
            F[rr:rr + l] = g.enc.H.T @ st.v[gi][cch] - g.enc.h + st.r[gi][cch]
        row += g.count * l
    # R5
    J[row:row + n1, off_s:off_s + n1] = np.diag(st.omega)
    J[row:row + n1, off_om:off_om + n1] = np.diag(st.s)
    F[row:row + n1] = st.omega * st.s - mu
    row += n1
    # R6
    for gi, g in enumerate(prob.groups):
        l = g.ell
        for cch in range(g.count):
            rr = row + cch * l
            J[rr:rr + l, off_r[gi] + cch * l:off_r[gi] + (cch + 1) * l] = \
                np.diag(st.w[gi][cch])
            J[rr:rr + l, off_w[gi] + cch * l:off_w[gi] + (cch + 1) * l] = \
                np.diag(st.r[gi][cch])
            F[rr:rr + l] = st.w[gi][cch] * st.r[gi][cch] - mu
        row += g.count * l
    # R7
    if n3:
        J[row:row + n3, 0:nx] = Em
        F[row:row + n3] = Em @ st.x - prob.e
    sol = np.linalg.solve(J, -F)
    return {"x": sol[:nx],
            "v": [sol[off_v[gi]:off_v[gi] + nv[gi]].reshape(st.v[gi].shape)
                  for gi in range(len(prob.groups))],
            "s": sol[off_s:off_s + n1],
            "r": [sol[off_r[gi]:off_r[gi] + nr[gi]].reshape(st.r[gi].shape)
                  for gi in range(len(prob.groups))],
            "omega": sol[off_om:off_om + n1],
            "w": [sol[off_w[gi]:off_w[gi] + nr[gi]].reshape(st.w[gi].shape)
                  for gi in range(len(prob.groups))],
            "lam": sol[off_lam:off_lam + n3]}


def _generic_state(prob, seed=5):
    state = ip.initial_state(prob)
    rng = np.random.default_rng(seed)
    state.x = rng.standard_normal(prob.nx) * 0.3
    for i, g in enumerate(prob.groups):
        state.v[i] = state.v[i] + 0.01 * rng.standard_normal(state.v[i].shape)
        if g.ell:
            state.r[i] = 0.5 + rng.random(state.r[i].shape)
            state.w[i] = 0.5 + rng.random(state.w[i].shape)
    if state.s.size:
        state.s = 0.5 + rng.random(state.s.shape)
        state.omega = 0.5 + rng.random(state.omega.shape)
    if state.lam.size:
        state.lam = rng.standard_normal(state.lam.shape) * 0.1
    state.mu = 0.37
    return state


@pytest.mark.parametrize("case", ["box_l1", "huber_box", "equality"])
def test_newton_direction_matches_dense_oracle(case):
    if case == "box_l1":
        model = random_model(n=1, m=1, N=2, seed=3)
        p = fo.SmootherProblem(ss.stack(model), plq.L1(), plq.Quadratic(),
                               1.7, plq.Box(-0.8, 0.8))
        prob = ip.smoother_to_plq(p)
    elif case == "huber_box":
        model = random_model(n=2, m=1, N=3, seed=6)
        p = fo.SmootherProblem(ss.stack(model), plq.Huber(0.7),
                               plq.Vapnik(0.4), 0.9, plq.Box(-1.5, 1.5))
        prob = ip.smoother_to_plq(p)
    else:
        inst, pw, sysm = dc_instance(N=4)
        p = fo.SmootherProblem(sysm, plq.Quadratic(), plq.L1(), 1.0)
        prob = ip.smoother_to_plq(p, equality_rows=pw.equality_rows)
    state = _generic_state(prob)
    direction, amax = ip.newton_step(prob, state)
    ref = _dense_newton(prob, state, state.mu)
    for key in ("x", "s", "omega", "lam"):
        if ref[key].size:
            scale = max(1.0, np.abs(ref[key]).max())
            assert np.abs(direction[key] - ref[key]).max() <= 1e-9 * scale, key
    for gi in range(len(prob.groups)):
        for key in ("v", "r", "w"):
            if ref[key][gi].size:
                scale = max(1.0, np.abs(ref[key][gi]).max())
                assert np.abs(direction[key][gi] - ref[key][gi]).max() <= \
                    1e-9 * scale, (key, gi)
    assert 0.0 < amax <= 1.0


def test_newton_single_step_on_quadratic():
    model = random_model(n=2, m=2, N=4, seed=7)
    p = quad_problem(model)
    prob = ip.smoother_to_plq(p)
    x, _, rep = ip.solve_ip(prob, eps=1e-10)
    assert rep.iterations <= 2
    assert rep.extras["final_merit"] <= 1e-10


def test_newton_step_keeps_positivity():
    p, _ = sine_problem(N=15)
    prob = ip.smoother_to_plq(p)
    state = ip.initial_state(prob)
    direction, amax = ip.newton_step(prob, state)
    trial = ip._advance(state, direction, amax)
    assert trial.min_positive() > 0.0


# ---------------------------------------------------------------------------
# full solves
# ---------------------------------------------------------------------------

def test_sine_l1_box_converges_quickly():
    p, _ = sine_problem()
    prob = ip.smoother_to_plq(p)
    x, duals, rep = ip.solve_ip(prob, eps=1e-8)
    assert rep.converged
    assert rep.iterations <= 40
    assert rep.extras["min_positive"].min() > 0.0
    # merit decreases at every accepted step at its own mu
    assert np.all(rep.extras["merit_after"] < rep.residual)


def test_ip_matches_first_order_on_l1():
    p, _ = sine_problem(N=40, constrained=False)
    prob = ip.smoother_to_plq(p)
    x, _, _ = ip.solve_ip(prob, eps=1e-10)
    radmm = fo.solve_admm_l1(p, tau=1.0, eps=1e-10, max_iters=30000)
    f_ip = ip.eval_primal(prob, x)
    f_admm = fo.objective(p, radmm.x)
    assert abs(f_ip - f_admm) <= 1e-6 * abs(f_admm)


def test_equality_constrained_least_squares_oracle():
    inst, pw, sysm = dc_instance(N=40)
    p = fo.SmootherProblem(sysm, plq.Quadratic(), plq.Quadratic(), 1.0)
    prob = ip.smoother_to_plq(p, equality_rows=pw.equality_rows)
    x, duals, rep = ip.solve_ip(prob, eps=1e-10)
    # dense equality-constrained least squares
    nx = sysm.nx
    Phi, av = [], []
    for g in prob.groups:
        D = _dense_rows(g.rows, nx, 2)
        Phi.append(np.sqrt(g.gamma) * D)
        av.append(np.sqrt(g.gamma) * g.a)
    Phi = np.vstack(Phi)
    av = np.concatenate(av)
    Em = _dense_rows(prob.eq, nx, 2)
    KKT = np.block([[Phi.T @ Phi, Em.T],
                    [Em, np.zeros((Em.shape[0], Em.shape[0]))]])
    sol = np.linalg.solve(KKT, np.concatenate([-Phi.T @ av, prob.e]))
    assert np.abs(x - sol[:nx]).max() <= 1e-8 * max(1, np.abs(sol[:nx]).max())


def test_dc_lasso_matches_cvxpy():
    import cvxpy as cp
    inst, pw, sysm = dc_instance(N=30, alpha=0.05, seed=3)
    gamma = 1.0
    p = fo.SmootherProblem(sysm, plq.Quadratic(), plq.L1(), gamma)
    prob = ip.smoother_to_plq(p, equality_rows=pw.equality_rows)
    x, _, _ = ip.solve_ip(prob, eps=1e-10)
    model = inst.model
    N = 30
    xv = cp.Variable((N + 1) * 2)
    Wq1 = ss.sym_pinv(model.Q_seq[0])[1]
    obj = 0
    cons = [xv[0:2] == 0]
    nullv = np.array([0.62, -11.81])
    nullv = nullv / np.linalg.norm(nullv)
    for t in range(N):
        obj += 0.5 * cp.square(model.y_seq[t, 0] - xv[(t + 1) * 2 + 1]) / 0.01
        inc = xv[(t + 1) * 2:(t + 2) * 2] - models.DC_A @ xv[t * 2:(t + 1) * 2]
        obj += gamma * cp.norm1(Wq1 @ inc)
        cons.append(nullv @ inc == 0)
    cp.Problem(cp.Minimize(obj), cons).solve(solver=cp.CLARABEL)
    scale = max(1, np.abs(xv.value).max())
    assert np.abs(x - xv.value).max() <= 1e-5 * scale


def test_l1_dc_outlier_matches_substitution_oracle():
    """The robust l1 smoother on the singular-Q DC model agrees with a dense
    substitution oracle (states parametrized by the scalar disturbances)."""
    import cvxpy as cp
    N = 30
    inst = models.dc_motor_model(
        models.GaussianDisturbance(0.1), 0.1, N, 5,
        meas_noise=ss.GaussianMixtureOutlier(0.1, 100.0))
    pw = ss.pseudo_weights(inst.model)
    sysm = ss.stack(inst.model, pseudo=True)
    p = fo.SmootherProblem(sysm, plq.L1(), plq.Quadratic(), 2.0)
    prob = ip.smoother_to_plq(p, equality_rows=pw.equality_rows)
    x, _, _ = ip.solve_ip(prob, eps=1e-10)
    f_ip = ip.eval_primal(prob, x)
    # oracle over (d_0..d_{N-1}): x_{t+1} = A x_t + b d_t, x_0 = 0
    d = cp.Variable(N)
    xs = [np.zeros(2)]
    for t in range(N):
        xs.append(models.DC_A @ xs[-1] + models.DC_B * d[t])
    obj = cp.sum(cp.abs(cp.hstack([inst.model.y_seq[t, 0] - xs[t + 1][1]
                                   for t in range(N)]))) / 0.1
    obj += cp.sum_squares(d) / 0.01
    cpP = cp.Problem(cp.Minimize(obj))
    cpP.solve(solver=cp.CLARABEL)
    assert f_ip == pytest.approx(cpP.value, rel=1e-6)


def test_max_iters_exceeded_carries_state():
    p, _ = sine_problem(N=20)
    prob = ip.smoother_to_plq(p)
    with pytest.raises(ip.MaxItersExceeded) as exc:
        ip.solve_ip(prob, eps=1e-12, max_iters=2)
    assert exc.value.state.min_positive() > 0.0
    assert exc.value.report.iterations == 2


def test_complementarity_at_termination():
    p, _ = sine_problem(N=20)
    prob = ip.smoother_to_plq(p)
    eps = 1e-9
    x, duals, rep = ip.solve_ip(prob, eps=eps)
    state = rep.extras["state"]
    assert float(np.max(state.omega * state.s)) <= np.sqrt(eps)
    comp = max((float(np.max(state.w[i] * state.r[i]))
                for i in range(len(state.r)) if state.r[i].size), default=0.0)
    assert comp <= np.sqrt(eps)


def test_per_iteration_cost_linear_in_N():
    import time
    times = {}
    for N in (200, 2000):
        p, _ = sine_problem(N=N)
        prob = ip.smoother_to_plq(p)
        layout = ip._BandedLayout(prob)
        state = ip.initial_state(prob)
        reps = []
        for _ in range(5):
            t0 = time.perf_counter()
            ip.newton_step(prob, state, layout)
            reps.append(time.perf_counter() - t0)
        times[N] = np.median(reps)
    ratio = times[2000] / times[200]
    assert 2.0 <= ratio <= 25.0


# ---------------------------------------------------------------------------
# duality
# ---------------------------------------------------------------------------

def test_duality_gap_at_solution():
    p, _ = sine_problem(N=30)
    prob = ip.smoother_to_plq(p)
    x, (v, omega, lam), _ = ip.solve_ip(prob, eps=1e-9)
    gap = ip.duality_gap(prob, x, v, omega, lam)
    assert -1e-10 <= gap <= 1e-6 * max(1.0, ip.eval_primal(prob, x))


def test_duality_gap_zero_duals():
    p, _ = sine_problem(N=10)
    prob = ip.smoother_to_plq(p)
    x = np.zeros(prob.nx)        # feasible for the box
    v0 = [np.zeros((g.count, g.k)) for g in prob.groups]
    gap = ip.duality_gap(prob, x, v0, np.zeros(prob.d.size),
                         np.zeros(prob.e.size))
    assert gap == pytest.approx(ip.eval_primal(prob, x))
    assert gap >= 0.0


def test_duality_gap_quadratic_analytic():
    model = random_model(n=2, m=2, N=5, seed=9)
    p = quad_problem(model)
    prob = ip.smoother_to_plq(p)
    T, r = btd.assemble_normal_equations(p.sys)
    x = btd.solve_rts(T, r)
    # analytic duals: v_c = u_c (the whitened residual) for quadratic blocks
    xs = prob.states(x)
    v = [(g.a + g.rows.apply(xs))[:, None] / g.gamma for g in prob.groups]
    gap = ip.duality_gap(prob, x, v, np.zeros(0), np.zeros(0))
    assert abs(gap) <= 1e-10 * max(1.0, ip.eval_primal(prob, x))


def test_duality_gap_rejects_infeasible_duals():
    p, _ = sine_problem(N=10)
    prob = ip.smoother_to_plq(p)
    x = np.zeros(prob.nx)
    v_bad = [np.full((g.count, g.k), 100.0) for g in prob.groups]
    with pytest.raises(ip.DualInfeasible):
        ip.duality_gap(prob, x, v_bad, np.zeros(prob.d.size))
    with pytest.raises(ip.DualInfeasible):
        ip.duality_gap(prob, x,
                       [np.zeros((g.count, g.k)) for g in prob.groups],
                       np.full(prob.d.size, -1.0))
