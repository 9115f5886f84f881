import math

import numpy as np
import pytest
from scipy.integrate import simpson
from scipy.special import logit

from seqlab.engine import iid_source, run_on_array
from seqlab.errors import PreconditionError
from seqlab.gslrt import (AdaptiveBoundary, CompositeProblem, KieferSacksProcedure, LordenGslrtProcedure,
                          OvershootTable, SchwarzProcedure, error_prob_gslrt, laplace_posterior_approx,
                          lorden_h, posterior_stop_risk, run_schwarz, solve_threshold)
from seqlab.harness import McConfig, mc_run, proportion
from seqlab.model import bernoulli_family, gaussian_family


def bern_problem(c=1e-3, **kw):
    return CompositeProblem(bernoulli_family(), logit(0.2), logit(0.4), logit(0.6), logit(0.8), c, **kw)


def gauss_problem(c=1e-3, width=2.0, **kw):
    return CompositeProblem(gaussian_family(), -width, -0.5, 0.5, width, c, **kw)


@pytest.fixture(scope="module")
def bern_table():
    return OvershootTable.build(bern_problem(), points=24)


def dense_grid_risk(prob, s, n, points=100_001):
    """Composite Simpson on each region with exact breakpoints (L = 1 off the zone)."""
    def piece(a, b):
        t = np.linspace(a, b, points)
        return simpson(np.exp(t * s - n * prob.fam.b(t)) * prob.w(t), x=t)

    lo, mid, hi = (piece(prob.theta_lo, prob.theta0), piece(prob.theta0, prob.theta1),
                   piece(prob.theta1, prob.theta_hi))
    return min(lo, hi) / (lo + mid + hi)


def test_risk_dominated_posterior():
    prob = bern_problem()
    risk, d = posterior_stop_risk(prob, 400.0, 400)
    assert risk < 1e-6 and d == 1
    risk, d = posterior_stop_risk(prob, 0.0, 400)
    assert risk < 1e-6 and d == 0


def test_risk_symmetric_gaussian():
    prob = gauss_problem()
    r0, _ = posterior_stop_risk(prob, 0.0, 10)
    rp, dp = posterior_stop_risk(prob, 1.3, 10)
    rm, dm = posterior_stop_risk(prob, -1.3, 10)
    assert 0 <= r0 <= 1
    assert rp == pytest.approx(rm, rel=1e-8) and (dp, dm) == (1, 0)


def test_risk_against_dense_grid():
    prob = bern_problem()
    risk, _ = posterior_stop_risk(prob, 14.0, 20)
    assert risk == pytest.approx(dense_grid_risk(prob, 14.0, 20), rel=1e-6)


def test_risk_decreases_with_n_at_fixed_estimate():
    prob = gauss_problem()
    risks = [posterior_stop_risk(prob, 0.9 * n, n)[0] for n in (5, 10, 20, 40)]
    assert all(a > b for a, b in zip(risks, risks[1:]))


def test_kiefer_sacks_limits():
    prob = bern_problem()
    x = np.array([1.0, 0.0, 1.0, 1.0])
    b = run_on_array(KieferSacksProcedure(prob, Q=1e6), x[None, :])
    assert b.T[0] == 1
    X = np.random.default_rng(0).integers(0, 2, (300, 3000)).astype(float)
    q1 = run_on_array(KieferSacksProcedure(prob, Q=1.0), X)
    flat = run_on_array(KieferSacksProcedure(prob, table=OvershootTable.constant(prob, 1.0)), X)
    assert np.array_equal(q1.T, flat.T) and np.array_equal(q1.d, flat.d)


def test_kiefer_sacks_adaptive_stops_earlier(bern_table):
    prob = bern_problem()
    X = np.random.default_rng(1).integers(0, 2, (2000, 3000)).astype(float)
    fixed = run_on_array(KieferSacksProcedure(prob, Q=1.0), X)
    adaptive = run_on_array(KieferSacksProcedure(prob, table=bern_table), X)
    diff = fixed.T - adaptive.T
    assert diff.mean() > 3 * diff.std() / math.sqrt(len(diff))


def test_schwarz_pinned_estimate():
    prob = gauss_problem(c=1e-3, width=1.0)
    a = abs(math.log(1e-3))
    need = math.ceil(a / prob.fam.kl(1.0, -0.5))
    out = run_schwarz(prob, iter([5.0] * 100))
    assert (out.T, out.d) == (need, 1)


def test_schwarz_forms_agree_with_interior_estimates():
    prob = gauss_problem(c=1e-3, width=30.0)
    X = np.random.default_rng(2).normal(0.2, 1.0, (20_000, 400))
    a = run_on_array(SchwarzProcedure(prob, "information"), X)
    b = run_on_array(SchwarzProcedure(prob, "sup"), X)
    assert np.array_equal(a.T, b.T) and np.array_equal(a.d, b.d)


def test_schwarz_symmetric_at_theta_star():
    prob = gauss_problem()
    b = mc_run(SchwarzProcedure(prob), iid_source(prob.fam.distribution(0.0)), McConfig(reps=20_000, seed=3))
    assert proportion(b.d == 1).within(0.5)


def test_side_rule_matches_posterior_on_stopped_paths():
    prob = gauss_problem(c=1e-2)
    agree = total = 0
    for k, theta in enumerate((-0.5, 0.0, 0.5)):
        b = mc_run(SchwarzProcedure(prob), iid_source(prob.fam.distribution(theta)), McConfig(reps=200, seed=4 + k))
        for T, d, th in zip(b.T, b.d, b.stat):
            s = th * T  # interior estimate: S_T = T * theta_hat
            agree += posterior_stop_risk(prob, s, int(T))[1] == d
            total += 1
    assert agree / total >= 0.95


def test_lorden_h_homogeneity_and_gaussian_value():
    prob = gauss_problem()
    double_w = gauss_problem(prior=lambda t: 2.0 * np.ones(np.shape(t)) / 4.0)
    double_L = gauss_problem(loss=lambda t: np.where(np.abs(np.asarray(t)) < 0.5, 0.0, 2.0))
    for th in (0.3, 0.9, 1.7):
        h = float(lorden_h(prob, th, 0, 0.8))
        assert float(lorden_h(double_w, th, 0, 0.8)) == pytest.approx(h, rel=1e-12)
        assert float(lorden_h(double_L, th, 0, 0.8)) == pytest.approx(h / 2, rel=1e-12)
        # b = theta^2 / 2: I = (theta - theta0)^2 / 2, b'' = 1
        assert h == pytest.approx(4 * math.sqrt(math.pi) / (th + 0.5) ** 2 / 0.8, rel=1e-12)
    with pytest.raises(PreconditionError):
        lorden_h(prob, -0.5, 0, 1.0)


def test_lorden_flat_reduces_to_schwarz_sup_form():
    prob = gauss_problem(c=1e-3, width=30.0)
    X = np.random.default_rng(5).normal(-0.1, 1.0, (20_000, 400))
    a = run_on_array(LordenGslrtProcedure(prob, AdaptiveBoundary.flat(abs(math.log(1e-3)))), X)
    b = run_on_array(SchwarzProcedure(prob, "sup"), X)
    assert np.array_equal(a.T, b.T) and np.array_equal(a.d, b.d)


def test_lorden_curved_and_weighted_forms_agree(bern_table):
    prob = bern_problem()
    bd = AdaptiveBoundary.lorden(prob, bern_table)
    X = np.random.default_rng(6).integers(0, 2, (1000, 1500)).astype(float)
    a = run_on_array(LordenGslrtProcedure(prob, bd, "curved"), X)
    b = run_on_array(LordenGslrtProcedure(prob, bd, "weighted"), X)
    assert np.array_equal(a.T, b.T) and np.array_equal(a.d, b.d)


def test_lorden_errors_shrink_with_cost():
    errs = []
    for c in (1e-2, 1e-3, 1e-4):
        prob = gauss_problem(c=c)
        bd = AdaptiveBoundary.flat(abs(math.log(c)) - 0.5 * math.log(abs(math.log(c))))
        b = mc_run(LordenGslrtProcedure(prob, bd), iid_source(prob.fam.distribution(-0.5)),
                   McConfig(reps=20_000, seed=7))
        errs.append(proportion(b.d == 1))
    for hi, lo in zip(errs, errs[1:]):
        assert hi.mean - lo.mean > 3 * math.hypot(hi.se, lo.se)


def test_error_constants_linear_in_h(bern_table):
    prob = bern_problem()
    bd = AdaptiveBoundary.lorden(prob, bern_table, a=9.0)
    doubled = AdaptiveBoundary(9.0, lambda t: 2 * bd.h0(t), bd.h1)
    e, e2 = error_prob_gslrt(prob, bd, bern_table), error_prob_gslrt(prob, doubled, bern_table)
    assert e2.C0 == pytest.approx(2 * e.C0, rel=1e-8) and e2.alpha0 == pytest.approx(2 * e.alpha0, rel=1e-8)
    assert e2.C1 == pytest.approx(e.C1, rel=1e-12)
    assert e.alpha0 / e.C0 == pytest.approx(3 * math.exp(-9), rel=1e-12)


def test_error_approximation_against_mc(bern_table):
    prob = bern_problem()
    bd = AdaptiveBoundary.lorden(prob, bern_table, a=9.0)
    approx = error_prob_gslrt(prob, bd, bern_table)
    proc = LordenGslrtProcedure(prob, bd)
    b0 = mc_run(proc, iid_source(prob.fam.distribution(prob.theta0)), McConfig(reps=200_000, seed=8))
    b1 = mc_run(proc, iid_source(prob.fam.distribution(prob.theta1)), McConfig(reps=200_000, seed=9))
    for est, ap in ((np.mean(b0.d == 1), approx.alpha0), (np.mean(b1.d == 0), approx.alpha1)):
        assert ap / 2 <= est <= 2 * ap


def test_solve_threshold():
    alpha = math.exp(-10 + 0.5 * math.log(10))
    assert solve_threshold(1.0, alpha) == pytest.approx(10.0, abs=1e-9)
    a = solve_threshold(2.0, 1e-4)
    assert abs(a - 0.5 * math.log(a) - math.log(2e4)) < 1e-10
    assert solve_threshold(3.0, 1e-4) > a > solve_threshold(2.0, 1e-3)
    with pytest.raises(PreconditionError):
        solve_threshold(1.0, 0.9)


def test_laplace_tracks_quadrature():
    prob = gauss_problem(width=2.0)
    th = 0.8  # keeps the n=800 risk above the double-precision floor
    bands = {50: (0.8, 1.25), 200: (0.9, 1.12), 800: (0.9, 1.12)}
    for n, (lo, hi) in bands.items():
        exact, d_exact = posterior_stop_risk(prob, th * n, n)
        approx, d = laplace_posterior_approx(prob, th * n, n)
        assert d == d_exact == 1
        assert lo <= approx / exact <= hi


def test_laplace_scaling_symmetry_and_guard():
    prob = gauss_problem(width=3.0)
    th = 1.4
    r1, _ = laplace_posterior_approx(prob, th * 50, 50)
    r4, _ = laplace_posterior_approx(prob, th * 200, 200)
    lam = lambda n: prob.llr(th, 0, th * n, n)
    assert r4 * math.exp(lam(200)) == pytest.approx(0.5 * r1 * math.exp(lam(50)), rel=1e-12)
    rp, dp = laplace_posterior_approx(prob, 1.1 * 30, 30)
    rm, dm = laplace_posterior_approx(prob, -1.1 * 30, 30)
    assert rp == pytest.approx(rm, rel=1e-12) and (dp, dm) == (1, 0)
    with pytest.raises(PreconditionError):
        laplace_posterior_approx(prob, 0.5 * 30, 30)
