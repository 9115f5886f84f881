"""Acceptance criteria: one PASS/FAIL line each, printed with -s and collected in
the terminal summary. Criteria known to be unreachable are strict xfails; the
line still records the measured values."""
import itertools
import math
import time

import numpy as np
import pytest
from scipy.special import logit

from conftest import ACCEPTANCE, cusum_arl_lattice
from seqlab.changepoint import (ChangeModel, CusumProcedure, GlrCusumProcedure, OneSidedSprt,
                                RepeatedTestProcedure, cusum_update, glr_false_alarm_bound)
from seqlab.engine import iid_source, run_on_array, run_paths
from seqlab.gslrt import (AdaptiveBoundary, CompositeProblem, KieferSacksProcedure, LordenGslrtProcedure,
                          OvershootTable, error_prob_gslrt)
from seqlab.harness import McConfig, mc_blocks, mc_run, mean_estimate, proportion
from seqlab.kiefer_weiss import ModifiedMsprtProcedure, two_sprt_thresholds
from seqlab.model import SimpleModel, bernoulli_family, gaussian_family, kl
from seqlab.msprt import (MsprtProcedure, ThresholdMatrix, info_matrix, lnumber_matrix, thresholds_corrected,
                          thresholds_first_order)
from seqlab.multistage import MultistageProcedure, three_stage_schedule
from seqlab.oracle import (CONTINUE, bellman_residual, exhaustive_bayes_minimum, make_lattice, match_errors,
                           optimal_bayes_test, propagate)
from seqlab.renewal import StepDistribution, hybrid_grid, l_number, overshoot_sweep
from seqlab.sprt import SprtConfig, SprtProcedure

pytestmark = pytest.mark.acceptance

BERN46 = SimpleModel.bernoulli([0.4, 0.6])
STEP = math.log(1.5)


def report(num, title, ok, detail):
    line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {title} | {detail}"
    ACCEPTANCE[num] = line
    print(line)
    return ok


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_overshoot_bound():
    parts, ok = [], True
    for z in (StepDistribution.two_point(1.0, -1.0, 0.6), StepDistribution.exponential(1.0),
              StepDistribution.gaussian(0.5, 1.0)):
        with Clock() as c:
            rep = overshoot_sweep(z, hybrid_grid(20.0, 40), reps=100_000, seed=1)
        good = rep.holds and len(rep.grid) == 40 and c.seconds < 60
        ok &= good
        parts.append(f"{z.name}: sup {rep.empirical_sup:.4f} vs bound {rep.bound:.4f} ({c.seconds:.1f}s)")
    assert report(1, "expected overshoot below E[(Z+)^2]/E[Z]", ok, "; ".join(parts))


def test_l_number_one_fifteenth():
    with Clock() as c:
        L = l_number(BERN46, 1, 0)
    ok = L.method == "exact-series" and abs(L.value - 1 / 15) <= 0.1 / 15 and c.seconds < 10
    assert report(2, "L-number of Bernoulli(0.6 vs 0.4)", ok,
                  f"L = {L.value:.6f} vs 1/15 = {1 / 15:.6f} ({c.seconds:.2f}s)")


def two_sprt_policy(lat, a, H):
    pol = [None]
    for n in range(1, H + 1):
        S = np.arange(n * (lat.K - 1) + 1)
        lam0 = -(n * lat.alpha[1] + lat.beta[1] * S)
        lam1 = -(n * lat.alpha[2] + lat.beta[2] * S)
        e1, e0 = lam0 - a, lam1 - a
        d = np.where(e1 >= 0, np.where((e0 >= 0) & (e0 >= e1), 0, 1), np.where(e0 >= 0, 0, CONTINUE))
        if n == H:
            d = np.where(d == CONTINUE, 0, d)
        pol.append(d.astype(np.int8))
    return pol


def test_two_sprt_efficiency():
    H = 200
    f0, f1, g = SimpleModel.bernoulli([0.4, 0.6, 0.5]).hypotheses
    with Clock() as c:
        opt = match_errors(g, f0, f1, 0.01, 0.01, H)
        target = max(opt.oc.p_decide[1, 1], opt.oc.p_decide[2, 0])
        # smallest symmetric threshold whose exact errors do not exceed the optimal test's
        lat = make_lattice([g, f0, f1])
        grid_a = np.arange(3.0, 5.0, 0.005)
        errs = np.array([propagate(lat, two_sprt_policy(lat, a, H), H).p_decide[1, 1] for a in grid_a])
        a = float(grid_a[np.argmax(errs <= target)])
        exact = propagate(lat, two_sprt_policy(lat, a, H), H)
        proc = ModifiedMsprtProcedure(g, SimpleModel((f0, f1)), two_sprt_thresholds(a, a))
        b = mc_run(proc, iid_source(g), McConfig(reps=100_000, seed=31, cap=H))
    ess = mean_estimate(b.T)
    ratio = opt.oc.ess[0] / ess.mean
    ok = ratio >= 0.95 and c.seconds < 300
    assert report(3, "2-SPRT efficiency against the optimal truncated test", ok,
                  f"oracle errors ({opt.oc.p_decide[1, 1]:.5f}, {opt.oc.p_decide[2, 0]:.5f}), 2-SPRT a = {a:.3f} "
                  f"errors ({exact.p_decide[1, 1]:.5f}, {exact.p_decide[2, 0]:.5f}); optimal E_G T "
                  f"{opt.oc.ess[0]:.2f}, 2-SPRT MC {ess.mean:.2f} +- {ess.se:.2f} (exact {exact.ess[0]:.2f}); "
                  f"ratio {ratio:.4f} ({c.seconds:.0f}s)")


def test_msprt_error_bounds():
    m = SimpleModel.bernoulli([0.3, 0.5, 0.7])
    off = ~np.eye(3, dtype=bool)
    with Clock() as c:
        first = thresholds_first_order(0.01, 3)
        corrected = thresholds_corrected(0.01, lnumber_matrix(m), info_matrix(m), 3)
        achieved = {}
        for name, thr in (("first-order", first), ("corrected", corrected)):
            proc = MsprtProcedure(m, thr)
            est = np.zeros((3, 3))
            se = np.zeros((3, 3))
            for j in range(3):
                b = mc_run(proc, iid_source(m[j]), McConfig(reps=100_000, seed=40 + j))
                for i in range(3):
                    p = proportion(b.d == i)
                    est[j, i], se[j, i] = p.mean, p.se
            achieved[name] = (est, se)
    est, se = achieved["first-order"]
    bounds_ok = bool(np.all(est[off] <= np.exp(-first.a[off]) + 3 * se[off]))
    dist = {k: float(np.sum(np.abs(v[0][off] - 0.01)) / (6 * 0.01)) for k, v in achieved.items()}
    closer = dist["corrected"] < dist["first-order"]
    ok = bounds_ok and closer and c.seconds < 300
    ratios = {k: v[0][off] / 0.01 for k, v in achieved.items()}
    assert report(4, "MSPRT error bounds and overshoot correction", ok,
                  f"bounds hold: {bounds_ok}; achieved/target first-order "
                  f"{np.round(ratios['first-order'], 3).tolist()}, corrected "
                  f"{np.round(ratios['corrected'], 3).tolist()}; mean |ratio-1| {dist['first-order']:.3f} -> "
                  f"{dist['corrected']:.3f} ({c.seconds:.0f}s)")


@pytest.mark.xfail(strict=True, reason="E_0[T_a] I/a approaches 1 from below for this lattice walk "
                                       "(exact chain: 0.814, 0.879, 0.912 at a = 4, 6, 8)")
def test_cusum_guarantees():
    cm = ChangeModel(BERN46[0], BERN46[1])
    info = kl(BERN46, 1, 0)
    with Clock() as c:
        arl_ok, arl_txt = True, []
        for a in (3.0, 4.0, 5.0):
            b = mc_run(CusumProcedure(cm, a), cm.source(), McConfig(reps=10_000, seed=50, cap=10**6))
            e = mean_estimate(b.T, b.truncated)
            arl_ok &= e.capped_fraction == 0 and e.mean >= math.exp(a) - 3 * e.se
            arl_txt.append(f"a={a:g}: {e.mean:.0f}+-{e.se:.0f} vs e^a {math.exp(a):.0f}")
        ratios = {}
        for a in (4.0, 6.0, 8.0):
            b = mc_run(CusumProcedure(cm, a), cm.at(0).source(), McConfig(reps=20_000, seed=51))
            ratios[a] = b.T.mean() * info / a
        exact = {a: cusum_arl_lattice(0.6, math.ceil(a / STEP - 1e-12)) * info / a for a in ratios}
        band_ok = 1.0 <= ratios[6.0] <= 1.7 and ratios[8.0] < ratios[4.0]
        rng = np.random.default_rng(52)
        X = np.concatenate([rng.binomial(1, 0.4, (10_000, 100)), rng.binomial(1, 0.6, (10_000, 200))],
                           axis=1).astype(float)
        x = run_on_array(CusumProcedure(cm, 4.0), X)
        y = run_on_array(RepeatedTestProcedure(OneSidedSprt(cm, 4.0)), X)
        mismatches = int(np.sum((x.T != y.T) | (x.truncated != y.truncated)))
    ok = arl_ok and band_ok and mismatches == 0 and c.seconds < 300
    assert report(5, "CUSUM guarantees", ok,
                  f"(a) {'ok' if arl_ok else 'FAIL'} [{'; '.join(arl_txt)}]; "
                  f"(b) {'ok' if band_ok else 'FAIL'} E_0[T]I/a MC "
                  f"{', '.join(f'{r:.3f}' for r in ratios.values())} at a=4,6,8, exact chain "
                  f"{', '.join(f'{r:.3f}' for r in exact.values())}, band [1.0, 1.7] and decrease required; "
                  f"(c) {mismatches} mismatches on 10^4 paths ({c.seconds:.0f}s)")


def test_glr_false_alarm_bound():
    fam = gaussian_family()
    parts, ok = [], True
    with Clock() as c:
        for h in (5.0, 8.0):
            proc = GlrCusumProcedure(fam, 0.5, h, restart=False)
            src = iid_source(fam.distribution(0.0))
            runs = mc_blocks(lambda rng, m: run_paths(proc, src, rng, m, 100_000, chunk=1024),
                             McConfig(reps=4096, seed=60))
            p = proportion(np.concatenate([r.d for r in runs]) == 1)
            bound = glr_false_alarm_bound(fam, 0.5, h)
            ok &= p.mean <= bound + 3 * p.se
            parts.append(f"h={h:g}: {p.mean:.5f} +- {p.se:.5f} vs bound {bound:.4f}")
    ok &= c.seconds < 300
    assert report(6, "GLR test false-alarm probability", ok, "; ".join(parts) + f" ({c.seconds:.0f}s)")


@pytest.mark.xfail(strict=True, reason="the first two looks are set by first-order sizes, so the "
                                       "expected sample size stays far above |log alpha|/I at these rates")
def test_three_stage_asymmetric():
    a0, a1 = 1e-5, 1e-2
    sc = three_stage_schedule(BERN46, a0, a1)
    proc = MultistageProcedure(BERN46, sc)
    alphas = (a0, a1)
    parts, ok = [], True
    with Clock() as c:
        for i in (0, 1):
            b = mc_run(proc, iid_source(BERN46[i]), McConfig(reps=20_000, seed=70 + i))
            target = abs(math.log(alphas[1 - i])) / kl(BERN46, i, 1 - i)
            err = proportion(b.d != i)
            third = proportion(b.stat == 3)
            ess = b.T.mean()
            good = (abs(ess / target - 1) <= 0.15 and err.mean <= alphas[i] + 3 * err.se and third.mean <= 0.1)
            ok &= good
            parts.append(f"H{i}: E T {ess:.1f} vs {target:.1f} (ratio {ess / target:.2f}), "
                         f"error {err.mean:.2e}, P(stage 3) {third.mean:.3f}")
    ok &= c.seconds < 300
    assert report(7, "three-stage test on asymmetric error rates", ok,
                  f"looks {list(sc.looks)}; " + "; ".join(parts) + f" ({c.seconds:.0f}s)")


def test_gslrt_suite():
    prob = CompositeProblem(bernoulli_family(), logit(0.2), logit(0.4), logit(0.6), logit(0.8), 1e-3)
    with Clock() as c:
        table = OvershootTable.build(prob, points=24)
        bd = AdaptiveBoundary.lorden(prob, table)
        mism, diffs, trunc = 0, [], 0
        for k in range(5):
            rng = np.random.default_rng(80 + k)
            p = rng.uniform(0.3, 0.7, (2000, 1))
            X = (rng.random((2000, 3000)) < p).astype(float)
            a = run_on_array(LordenGslrtProcedure(prob, bd, "curved"), X)
            b = run_on_array(LordenGslrtProcedure(prob, bd, "weighted"), X)
            mism += int(np.sum((a.T != b.T) | (a.d != b.d)))
            fixed = run_on_array(KieferSacksProcedure(prob, Q=1.0), X)
            adaptive = run_on_array(KieferSacksProcedure(prob, table=table), X)
            trunc += int(fixed.truncated.sum() + adaptive.truncated.sum())
            diffs.append(fixed.T - adaptive.T)
        diff = np.concatenate(diffs)
        d_mean, d_se = diff.mean(), diff.std(ddof=1) / math.sqrt(len(diff))
        earlier = d_mean > 3 * d_se
        bd9 = AdaptiveBoundary.lorden(prob, table, a=9.0)
        approx = error_prob_gslrt(prob, bd9, table)
        proc = LordenGslrtProcedure(prob, bd9)
        b0 = mc_run(proc, iid_source(prob.fam.distribution(prob.theta0)), McConfig(reps=200_000, seed=88))
        b1 = mc_run(proc, iid_source(prob.fam.distribution(prob.theta1)), McConfig(reps=200_000, seed=89))
        mc = (float(np.mean(b0.d == 1)), float(np.mean(b1.d == 0)))
        within = all(ap / 2 <= est <= 2 * ap for est, ap in zip(mc, (approx.alpha0, approx.alpha1)))
    ok = mism == 0 and earlier and within and c.seconds < 600
    assert report(8, "GSLRT suite", ok,
                  f"(a) {mism} mismatches on 10^4 paths; (b) Q=1 minus adaptive stopping time "
                  f"{d_mean:.2f} +- {d_se:.2f} ({trunc} truncated); (c) MC errors ({mc[0]:.2e}, {mc[1]:.2e}) vs "
                  f"approximation ({approx.alpha0:.2e}, {approx.alpha1:.2e}) ({c.seconds:.0f}s)")


def test_oracle_integrity():
    with Clock() as c:
        gaps = []
        for params in ((0.5, 1.0, 1.0, 0.02), (0.3, 3.0, 1.0, 0.01), (0.7, 1.0, 5.0, 0.05)):
            grid = optimal_bayes_test(BERN46, *params, 3)
            gaps.append(abs(grid.root_value - exhaustive_bayes_minimum(grid)))
        residual = bellman_residual(optimal_bayes_test(BERN46, 0.5, 1.0, 1.0, 0.002, 100))
    ok = max(gaps) < 1e-13 and residual < 1e-12 and c.seconds < 60
    assert report(9, "backward induction integrity", ok,
                  f"H=3 DP vs 3888 enumerated rules, max gap {max(gaps):.1e}; H=100 Bellman residual "
                  f"{residual:.1e} ({c.seconds:.1f}s)")


def test_invariant_suites():
    parts, ok = [], True
    with Clock() as c:
        # CUSUM recursion against the max over changepoints, every path of length 12
        Z = np.array([1.3, -0.7])[np.array(list(itertools.product([0, 1], repeat=12)))]
        W = np.zeros(len(Z))
        worst = 0.0
        for n in range(1, 13):
            W = cusum_update(W, Z[:, n - 1])
            brute = np.maximum(np.cumsum(Z[:, :n][:, ::-1], axis=1).max(axis=1), 0.0)
            worst = max(worst, float(np.abs(W - brute).max()))
        ok &= worst < 1e-12
        parts.append(f"CUSUM max gap {worst:.1e}")

        # MSPRT against a loop implementation, every path of length 6 over 3 letters
        three = SimpleModel.finite([0, 1, 2], [[0.6, 0.3, 0.1], [0.3, 0.4, 0.3], [0.1, 0.3, 0.6]])
        a = np.array([[0, 1.1, 1.6], [0.9, 0, 1.3], [2.0, 1.0, 0]])
        X = np.array(list(itertools.product([0.0, 1.0, 2.0], repeat=6)))
        got = run_on_array(MsprtProcedure(three, ThresholdMatrix(a)), X)
        logp = np.log(np.array([h.probs for h in three.hypotheses]))
        bad = 0
        for r, x in enumerate(X.astype(int)):
            lam, ref = np.zeros(3), None
            for n, xi in enumerate(x, 1):
                lam = lam + logp[:, xi]
                acc = [i for i in range(3) if all(lam[i] - lam[j] >= a[j, i] for j in range(3) if j != i)]
                if acc:
                    ref = (n, acc[0])
                    break
            bad += (got.truncated[r] != (ref is None)) or (ref is not None and (got.T[r], got.d[r]) != ref)
        ok &= bad == 0
        parts.append(f"MSPRT {bad} mismatches on {len(X)} paths")

        # SPRT as a two-hypothesis MSPRT
        Xb = np.random.default_rng(100).integers(0, 2, (2000, 300)).astype(float)
        s = run_on_array(SprtProcedure(BERN46, SprtConfig(-3.2, 2.5)), Xb)
        t = run_on_array(MsprtProcedure(BERN46, ThresholdMatrix(np.array([[0.0, 2.5], [3.2, 0.0]]))), Xb)
        same = all(getattr(s, f).tobytes() == getattr(t, f).tobytes() for f in ("T", "d", "truncated", "stat"))
        ok &= same
        parts.append(f"SPRT = MSPRT bytes: {same}")

        # L-numbers: symmetric and in (0, 1]
        m = SimpleModel.bernoulli([0.25, 0.5, 0.65])
        Ls = lnumber_matrix(m)
        sym = bool(np.allclose(Ls, Ls.T, rtol=1e-10) and np.all((Ls > 0) & (Ls <= 1)))
        ok &= sym
        parts.append(f"L symmetric and in (0,1]: {sym}")

        # seed determinism across worker counts
        proc = SprtProcedure(BERN46, SprtConfig(-3.0, 3.0))
        runs = [mc_run(proc, iid_source(BERN46[0]), McConfig(reps=20_000, seed=7, workers=w, block=1000))
                for w in (1, 2, 8)]
        det = all(r.T.tobytes() == runs[0].T.tobytes() and r.d.tobytes() == runs[0].d.tobytes() for r in runs)
        ok &= det
        parts.append(f"workers 1/2/8 identical: {det}")
    ok &= c.seconds < 300
    assert report(10, "invariant suites", ok, "; ".join(parts) + f" ({c.seconds:.0f}s)")
