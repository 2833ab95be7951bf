import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gks import plq
from conftest import ALL_LOSSES, PLQ_LOSSES


# ---------------------------------------------------------------------------
# values
# ---------------------------------------------------------------------------

def test_eval_huber():
    h = plq.Huber(1.0)
    assert plq.eval(h, 0.5) == pytest.approx(0.125, abs=1e-15)
    assert plq.eval(h, 2.0) == pytest.approx(1.5, abs=1e-15)


def test_eval_vapnik():
    v = plq.Vapnik(0.5)
    assert plq.eval(v, 0.3) == 0.0
    assert plq.eval(v, 1.0) == pytest.approx(0.5, abs=1e-15)


def test_eval_elastic_net():
    # alpha |x| + (1 - alpha) 0.5 x^2 at alpha = 0.5, x = 2
    en = plq.ElasticNet(0.5)
    assert plq.eval(en, 2.0) == pytest.approx(2.0, abs=1e-15)


def test_eval_sum_weighted():
    W = np.array([[2.0, 0.0], [0.0, 1.0]])
    r = np.array([1.0, -3.0])
    assert plq.eval_sum(plq.L1(), W, r) == pytest.approx(5.0)
    assert plq.eval_sum(plq.Quadratic(), None, r) == pytest.approx(5.0)


@pytest.mark.parametrize("loss", PLQ_LOSSES, ids=plq.format_loss)
def test_eval_matches_sup_oracle(loss):
    """Closed forms equal the conjugate-representation sup on a grid."""
    enc = plq.plq_encoding(loss)
    for x in np.linspace(-5.0, 5.0, 101):
        assert plq.sup_eval(enc, x) == pytest.approx(
            float(plq.eval(loss, x)), abs=1e-8)


@pytest.mark.parametrize("gamma", [0.3, 2.5])
def test_encoding_gamma_scaling(gamma):
    loss = plq.Huber(0.8)
    enc = plq.plq_encoding(loss, gamma)
    for x in np.linspace(-3.0, 3.0, 31):
        assert plq.sup_eval(enc, x) == pytest.approx(
            gamma * float(plq.eval(loss, x)), abs=1e-8)


@pytest.mark.parametrize("loss", PLQ_LOSSES, ids=plq.format_loss)
def test_encoding_invariants(loss):
    assert plq.plq_encoding(loss).validate() == []


def test_group_l2_has_no_encoding():
    with pytest.raises(plq.UnsupportedLoss):
        plq.plq_encoding(plq.GroupL2())


# ---------------------------------------------------------------------------
# prox
# ---------------------------------------------------------------------------

def test_prox_l1_soft_threshold():
    assert plq.prox(plq.L1(), 1.0, np.array([2.5]))[0] == pytest.approx(1.5)
    assert plq.prox(plq.L1(), 1.0, np.array([0.5]))[0] == 0.0


def test_prox_quadratic():
    assert plq.prox(plq.Quadratic(), 1.0, np.array([3.0]))[0] == pytest.approx(1.5)


def test_prox_huber():
    h = plq.Huber(1.0)
    assert plq.prox(h, 2.0, np.array([5.0]))[0] == pytest.approx(3.0)
    assert plq.prox(h, 2.0, np.array([1.0]))[0] == pytest.approx(1.0 / 3.0)


def _golden_section(f, lo, hi, iters=200):
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    for _ in range(iters):
        if f(c) < f(d):
            b, d = d, c
            c = b - phi * (b - a)
        else:
            a, c = c, d
            d = a + phi * (b - a)
    return 0.5 * (a + b)


@pytest.mark.parametrize("loss", ALL_LOSSES, ids=plq.format_loss)
@pytest.mark.parametrize("eta", [0.3, 1.0, 2.7])
def test_prox_against_golden_section(loss, eta):
    for y in [-4.0, -1.1, -0.2, 0.0, 0.4, 0.9, 3.3]:
        u = float(np.atleast_1d(plq.prox(loss, eta, np.array([y])))[0])
        f = lambda t: eta * float(plq.eval(loss, t)) + 0.5 * (t - y) ** 2
        u_ref = _golden_section(f, y - 2 * eta - 1, y + 2 * eta + 1)
        assert u == pytest.approx(u_ref, abs=1e-6)


def _subdifferential_interval(loss, u, h=1e-7):
    """[left derivative, right derivative] by one-sided differences."""
    f = lambda t: float(plq.eval(loss, t))
    return ((f(u) - f(u - h)) / h, (f(u + h) - f(u)) / h)


@pytest.mark.parametrize("loss", ALL_LOSSES, ids=plq.format_loss)
def test_prox_optimality_via_subdifferential(loss):
    """0 in eta d(loss)(u) + (u - y): (y - u)/eta inside the subdifferential."""
    rng = np.random.default_rng(7)
    eta = 1.3
    y = rng.standard_normal(200) * 3.0
    u = plq.prox(loss, eta, y)
    for ui, yi in zip(np.atleast_1d(u), y):
        lo, hi = _subdifferential_interval(loss, ui)
        g = (yi - ui) / eta
        assert lo - 1e-5 <= g <= hi + 1e-5


# ---------------------------------------------------------------------------
# conjugates and Moreau
# ---------------------------------------------------------------------------

def test_prox_conjugate_l1_example():
    # prox of the l1 conjugate is the projection onto [-1, 1]
    out = plq.prox_conjugate(plq.L1(), 1.0, np.array([2.5]))
    assert out[0] == pytest.approx(1.0)
    assert plq.prox(plq.L1(), 1.0, np.array([2.5]))[0] + out[0] == pytest.approx(2.5)


def test_prox_conjugate_self_conjugate_quadratic():
    assert plq.prox_conjugate(plq.Quadratic(), 1.0, np.array([4.0]))[0] == \
        pytest.approx(2.0)


@pytest.mark.parametrize("loss", ALL_LOSSES, ids=plq.format_loss)
def test_moreau_identity_thousand_points(loss):
    rng = np.random.default_rng(3)
    y = rng.standard_normal(1000) * 4.0
    lhs = plq.prox(loss, 1.0, y) + plq.prox_conjugate(loss, 1.0, y)
    assert np.abs(lhs - y).max() <= 1e-12


def test_conjugate_eval_examples():
    assert plq.conjugate_eval(plq.L1(), 0.5) == 0.0
    assert plq.conjugate_eval(plq.L1(), 1.5) == np.inf
    assert plq.conjugate_eval(plq.Quadratic(), 3.0) == pytest.approx(4.5)
    h = plq.Huber(0.8)
    for w in np.linspace(-0.79, 0.79, 9):
        assert plq.conjugate_eval(h, w) == pytest.approx(0.5 * w * w)
    assert plq.conjugate_eval(h, 0.9) == np.inf


@pytest.mark.parametrize("loss", ALL_LOSSES, ids=plq.format_loss)
def test_conjugate_against_grid_sup(loss):
    ys = np.linspace(-10.0, 10.0, 40001)
    vals = np.asarray(plq.eval(loss, ys))
    for w in [-1.2, -0.7, -0.3, 0.0, 0.2, 0.6, 0.95]:
        got = float(plq.conjugate_eval(loss, w))
        if np.isfinite(got):
            ref = float(np.max(w * ys - vals))
            assert got == pytest.approx(ref, abs=1e-6)


# ---------------------------------------------------------------------------
# subgradients
# ---------------------------------------------------------------------------

def test_subgradient_examples():
    assert plq.subgradient(plq.L1(), 0.0) == 0.0
    assert plq.subgradient(plq.Huber(1.0), 2.0) == 1.0
    assert plq.subgradient(plq.Huber(1.0), 0.3) == pytest.approx(0.3)
    assert plq.subgradient(plq.Vapnik(0.5), 0.2) == 0.0


@pytest.mark.parametrize("loss", ALL_LOSSES, ids=plq.format_loss)
def test_subgradient_inequality(loss):
    rng = np.random.default_rng(11)
    xs = rng.standard_normal(20) * 3.0
    ys = rng.standard_normal(100) * 4.0
    for x in xs:
        g = float(plq.subgradient(loss, x))
        fx = float(plq.eval(loss, x))
        assert np.all(np.asarray(plq.eval(loss, ys)) >=
                      fx + g * (ys - x) - 1e-12)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def test_project_examples():
    assert np.allclose(plq.project(plq.Ball2(1.0), np.array([3.0, 4.0])),
                       [0.6, 0.8])
    assert np.allclose(plq.project(plq.Box(-1.0, 1.0), np.array([2.0, -0.5])),
                       [1.0, -0.5])
    assert np.allclose(plq.project(plq.Ball1(1.0), np.array([0.8, 0.8])),
                       [0.5, 0.5])


def test_project_ball1_grid_oracle():
    y = np.array([0.9, -0.4])
    proj = plq.project(plq.Ball1(1.0), y)
    grid = np.linspace(-1.0, 1.0, 801)
    best, bestval = None, np.inf
    for a in grid:
        rem = 1.0 - abs(a)
        for b in (np.clip(y[1], -rem, rem),):
            val = (a - y[0]) ** 2 + (b - y[1]) ** 2
            if val < bestval:
                best, bestval = (a, b), val
    assert np.allclose(proj, best, atol=5e-3)
    assert np.sum(np.abs(proj)) <= 1.0 + 1e-12


def test_project_polyhedral_not_implemented():
    with pytest.raises(NotImplementedError):
        plq.project(plq.Polyhedral(np.eye(2), np.ones(2)), np.zeros(2))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6),
       st.lists(st.floats(-10, 10), min_size=2, max_size=6))
def test_projection_idempotent_and_nonexpansive(a, b):
    k = min(len(a), len(b))
    a = np.array(a[:k])
    b = np.array(b[:k])
    for cset in [plq.Ball2(1.3), plq.Ball1(1.3), plq.BallInf(0.7),
                 plq.Box(-0.5, 2.0)]:
        pa, pb = plq.project(cset, a), plq.project(cset, b)
        assert np.abs(plq.project(cset, pa) - pa).max() <= 1e-14
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12


def test_projection_variational_inequality(rng):
    y = rng.standard_normal(5) * 2.0
    for cset in [plq.Ball2(1.0), plq.Ball1(1.0), plq.BallInf(1.0),
                 plq.Box(-1.0, 1.0)]:
        x = plq.project(cset, y)
        for _ in range(50):
            z = plq.project(cset, rng.standard_normal(5) * 2.0)
            assert (y - x) @ (z - x) <= 1e-10


def test_l1_prox_tie_break_is_immaterial():
    """The prox output is unique regardless of the sign(0) convention."""
    y = np.array([1.0, -1.0, 0.0])     # |y| == eta exactly at the kink
    out = plq.prox(plq.L1(), 1.0, y)
    assert np.array_equal(out, np.zeros(3))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def test_parse_loss_round_trip():
    specs = ["l2", "l1", "huber:kappa=2", "vapnik:eps=0.25",
             "huber-ins:kappa=1,eps=0.5", "enet:alpha=0.3", "group-l2"]
    for text in specs:
        loss = plq.parse_loss(text)
        assert plq.parse_loss(plq.format_loss(loss)) == loss


def test_parse_loss_rejects_unknown():
    with pytest.raises(ValueError):
        plq.parse_loss("cauchy")
    with pytest.raises(ValueError):
        plq.parse_loss("huber:kappa")
