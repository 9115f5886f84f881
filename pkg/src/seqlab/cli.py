"""Command-line interface: ``seqlab <subcommand> --config file.toml``.

Every subcommand writes CSV to ``--out`` (stdout by default). Errors exit with
2 (bad input), 3 (numerical or calibration failure) or 4 (capacity).
"""
from __future__ import annotations

import math
import sys
from typing import Optional

import click
import numpy as np

from . import changepoint as cp
from . import gslrt, kiefer_weiss as kw, msprt, multistage, oracle, renewal, sprt
from .config import load_config, mc_config, need, section
from .engine import PathBatch, iid_source
from .errors import PreconditionError, SeqlabError
from .harness import calibrate_threshold, mc_run, write_csv
from .model import SimpleModel, family_from_config, kl, model_from_config, natural_parameter


def _emit(out: Optional[str], header, rows):
    write_csv(out if out else sys.stdout, header, rows)


def _model(cfg) -> SimpleModel:
    return model_from_config(section(cfg, "model"))


def _truths(sec, count):
    truths = sec.get("truth", list(range(count)))
    truths = [truths] if isinstance(truths, int) else list(truths)
    if any(not 0 <= t < count for t in truths):
        raise PreconditionError(f"truth indices must lie in 0..{count - 1}")
    return truths


def _batch_rows(truth, batch: PathBatch):
    for k in range(len(batch)):
        yield (truth, k, batch.T[k], batch.d[k], batch.truncated[k], batch.stat[k])


BATCH_HEADER = ["truth", "rep", "T", "d", "truncated", "statistic"]


def _run_truths(proc, dists, truths, mc):
    rows = []
    for t in truths:
        rows.extend(_batch_rows(t, mc_run(proc, iid_source(dists[t]), mc)))
    return rows


def _family_problem(sec) -> gslrt.CompositeProblem:
    kind = need(sec, "family", "test")
    fam = family_from_config(kind)
    th = [natural_parameter(kind, need(sec, k, "test")) for k in ("lo", "h0", "h1", "hi")]
    return gslrt.CompositeProblem(fam, *th, c=float(sec.get("c", 1e-3)))


def _run(fn):
    """Map library errors to exit codes."""
    try:
        fn()
    except SeqlabError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except FloatingPointError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)


def common(f):
    f = click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV output path")(f)
    f = click.option("--workers", type=int, default=None, help="worker threads")(f)
    f = click.option("--reps", type=int, default=None, help="Monte Carlo replications")(f)
    f = click.option("--seed", type=int, default=None, help="base seed")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)(f)
    return f


@click.group()
def main():
    """Sequential tests, changepoint detectors and their operating characteristics."""


@main.command("sprt")
@common
def sprt_cmd(config_path, seed, reps, workers, out):
    """Binary SPRT; thresholds from [test] a0/a1 or Wald's alpha0/alpha1."""
    def go():
        cfg = load_config(config_path)
        model, sec = _model(cfg), section(cfg, "test")
        if "a0" in sec:
            design = sprt.SprtConfig(float(sec["a0"]), float(need(sec, "a1", "test")))
        else:
            design = sprt.wald_thresholds(float(need(sec, "alpha0", "test")), float(need(sec, "alpha1", "test")))
        if model.n_alt != 1:
            raise PreconditionError("the SPRT needs a two-hypothesis model")
        rows = _run_truths(sprt.SprtProcedure(model, design), model.hypotheses, _truths(sec, 2),
                           mc_config(cfg, seed, reps, workers))
        _emit(out, BATCH_HEADER, rows)
    _run(go)


@main.command("msprt")
@common
def msprt_cmd(config_path, seed, reps, workers, out):
    """MSPRT with design = first-order | corrected | bayes."""
    def go():
        cfg = load_config(config_path)
        model, sec = _model(cfg), section(cfg, "test")
        design = sec.get("design", "first-order")
        k = len(model)
        if design == "first-order":
            thr = msprt.thresholds_first_order(need(sec, "alpha", "test"), k)
        elif design == "corrected":
            thr = msprt.thresholds_corrected(need(sec, "alpha", "test"), msprt.lnumber_matrix(model),
                                             msprt.info_matrix(model), k)
        elif design == "bayes":
            prior = sec.get("prior", [1.0 / k] * k)
            loss = sec.get("loss", (1 - np.eye(k)).tolist())
            thr = msprt.thresholds_bayes(prior, loss, msprt.lnumber_matrix(model), float(need(sec, "c", "test")))
        else:
            raise PreconditionError(f"unknown MSPRT design {design!r}")
        rows = _run_truths(msprt.MsprtProcedure(model, thr), model.hypotheses, _truths(sec, k),
                           mc_config(cfg, seed, reps, workers))
        _emit(out, BATCH_HEADER, rows)
    _run(go)


@main.command("multistream")
@common
def multistream_cmd(config_path, seed, reps, workers, out):
    """Weighted GSLRT over independent streams; [test] streams, K, a0, a1, signal."""
    def go():
        cfg = load_config(config_path)
        sec = section(cfg, "test")
        kind = need(sec, "kind", "test")
        streams = [model_from_config({"kind": kind, "params": p}) for p in need(sec, "streams", "test")]
        spec = msprt.StreamsSpec.k_bounded([(s[0], s[1]) for s in streams], int(sec.get("K", 1)))
        proc = msprt.MultistreamProcedure(spec, float(need(sec, "a0", "test")), float(need(sec, "a1", "test")))
        mc = mc_config(cfg, seed, reps, workers)
        rows = []
        for subset in sec.get("signal", [0] + list(spec.subsets)):
            batch = mc_run(proc, spec.source(int(subset)), mc)
            rows.extend(_batch_rows(int(subset), batch))
        _emit(out, BATCH_HEADER, rows)
    _run(go)


@main.command("kw")
@common
def kw_cmd(config_path, seed, reps, workers, out):
    """2-SPRT against g. [test] g (same parameterization as the model) and
    a0/a1, or alpha0/alpha1 with g = "least-favorable" | "second-order".
    Truth indices: 0 = f0, 1 = f1, 2 = g."""
    def go():
        cfg = load_config(config_path)
        msec, sec = section(cfg, "model"), section(cfg, "test")
        kind, params = need(msec, "kind", "model"), list(need(msec, "params", "model"))
        g_spec = need(sec, "g", "test")
        if isinstance(g_spec, str):
            fam = family_from_config(kind)
            t0, t1 = (natural_parameter(kind, p) for p in params[:2])
            a0, a1 = (float(need(sec, k, "test")) for k in ("alpha0", "alpha1"))
            if g_spec == "least-favorable":
                theta = kw.theta_star(fam, t0, t1, a0, a1)[0]
            elif g_spec == "second-order":
                theta = kw.huffman_tuning(fam, t0, t1, a0, a1).theta_second_order
            else:
                raise PreconditionError(f"unknown g rule {g_spec!r}")
            g, f0, f1 = (fam.distribution(t) for t in (theta, t0, t1))
            A0, A1 = abs(math.log(a0)), abs(math.log(a1))
        else:
            full = model_from_config({"kind": kind, "params": params[:2] + [g_spec]})
            f0, f1, g = full[0], full[1], full[2]
            A0, A1 = float(need(sec, "a0", "test")), float(need(sec, "a1", "test"))
        proc = kw.ModifiedMsprtProcedure(g, SimpleModel((f0, f1)), kw.two_sprt_thresholds(A0, A1))
        rows = _run_truths(proc, [f0, f1, g], _truths(sec, 3), mc_config(cfg, seed, reps, workers))
        _emit(out, BATCH_HEADER, rows)
    _run(go)


@main.command("gslrt")
@common
def gslrt_cmd(config_path, seed, reps, workers, out):
    """Composite tests: [test] procedure = kiefer-sacks | schwarz | lorden, with
    family, lo, h0, h1, hi (usual parameterization), c, and truth = list of
    parameter values."""
    def go():
        cfg = load_config(config_path)
        sec = section(cfg, "test")
        prob = _family_problem(sec)
        kind = sec["family"]
        which = sec.get("procedure", "lorden")
        if which == "kiefer-sacks":
            table = gslrt.OvershootTable.build(prob) if sec.get("adaptive", False) else None
            proc = gslrt.KieferSacksProcedure(prob, float(sec.get("Q", 1.0)), table)
        elif which == "schwarz":
            proc = gslrt.SchwarzProcedure(prob, sec.get("form", "information"))
        elif which == "lorden":
            a = float(sec["a"]) if "a" in sec else None
            if sec.get("flat", False):
                boundary = gslrt.AdaptiveBoundary.flat(a if a is not None else gslrt.default_threshold(prob.c))
            else:
                boundary = gslrt.AdaptiveBoundary.lorden(prob, gslrt.OvershootTable.build(prob), a)
            proc = gslrt.LordenGslrtProcedure(prob, boundary)
        else:
            raise PreconditionError(f"unknown composite procedure {which!r}")
        mc = mc_config(cfg, seed, reps, workers)
        rows = []
        for v in need(sec, "truth", "test"):
            batch = mc_run(proc, iid_source(prob.fam.distribution(natural_parameter(kind, v))), mc)
            rows.extend(_batch_rows(v, batch))
        _emit(out, BATCH_HEADER, rows)
    _run(go)


@main.command("multistage")
@common
def multistage_cmd(config_path, seed, reps, workers, out):
    """Two- or three-stage tests; [test] stages = 2 | 3, alpha0, alpha1, rho,
    halving; composite = true uses family/h0/h1 and truth parameter values."""
    def go():
        cfg = load_config(config_path)
        sec = section(cfg, "test")
        a0, a1 = float(need(sec, "alpha0", "test")), float(need(sec, "alpha1", "test"))
        rho = float(sec.get("rho", 0.75))
        mc = mc_config(cfg, seed, reps, workers)
        rows = []
        if sec.get("composite", False):
            kind = need(sec, "family", "test")
            fam = family_from_config(kind)
            t0, t1 = (natural_parameter(kind, need(sec, k, "test")) for k in ("h0", "h1"))
            proc = multistage.ThreeStageCompositeProcedure(fam, t0, t1, a0, a1,
                                                           fraction=float(sec.get("fraction", 0.4)))
            for v in need(sec, "truth", "test"):
                b = mc_run(proc, iid_source(fam.distribution(natural_parameter(kind, v))), mc)
                rows.extend((v, k, int(b.stat[k]), b.T[k], b.d[k]) for k in range(len(b)))
        else:
            model = _model(cfg)
            build = {2: multistage.two_stage_schedule, 3: multistage.three_stage_schedule}
            stages = int(sec.get("stages", 3))
            if stages not in build:
                raise PreconditionError("stages must be 2 or 3")
            schedule = build[stages](model, a0, a1, rho, bool(sec.get("halving", True)))
            proc = multistage.MultistageProcedure(model, schedule)
            for t in _truths(sec, 2):
                b = mc_run(proc, iid_source(model[t]), mc)
                rows.extend((t, k, int(b.stat[k]), b.T[k], b.d[k]) for k in range(len(b)))
        _emit(out, ["truth", "rep", "stages_used", "T", "d"], rows)
    _run(go)


def _detector_builder(cfg):
    sec = section(cfg, "detector")
    kind = need(sec, "kind", "detector")
    if kind in ("cusum", "sr"):
        model = _model(cfg)
        cm = cp.ChangeModel(model[0], model[1])
        thr = float(need(sec, "threshold", "detector"))
        if kind == "cusum":
            return cm, lambda c: cp.CusumProcedure(c, thr), True
        r = float(sec.get("head_start", 0.0))
        return cm, lambda c: cp.ShiryaevRobertsProcedure(c, thr, r), False
    if kind == "glr-cusum":
        fkind = need(sec, "family", "detector")
        fam = family_from_config(fkind)
        pre_value = sec.get("pre", 0.0) if fkind == "gaussian-unit-variance" else need(sec, "pre", "detector")
        pre = natural_parameter(fkind, pre_value)
        post = natural_parameter(fkind, need(sec, "post", "detector"))
        cm = cp.ChangeModel(fam.distribution(pre), fam.distribution(post))
        theta1 = float(need(sec, "theta1", "detector"))
        h = float(need(sec, "threshold", "detector"))
        window = sec.get("window")
        return cm, lambda c: cp.GlrCusumProcedure(fam, theta1, h, window, theta0=pre), False
    raise PreconditionError(f"unknown detector kind {kind!r}")


@main.command("detect")
@common
@click.option("--stream", "stream_mode", is_flag=True,
              help="read one observation per line from stdin and print alarms as n,statistic")
def detect_cmd(config_path, seed, reps, workers, out, stream_mode):
    """Changepoint detectors; [detector] kind = cusum | sr | glr-cusum, threshold,
    nus = changepoint grid."""
    def go():
        cfg = load_config(config_path)
        cm, builder, restartable = _detector_builder(cfg)
        if stream_mode:
            _stream_alarms(builder(cm), out)
            return
        sec = section(cfg, "detector")
        report = cp.detection_report(builder, cm, sec.get("nus", [0, 10, 50]),
                                     mc_config(cfg, seed, reps, workers), restart_worst_case=restartable)
        rows = report.rows()
        rows.append(("esedd", report.esedd.mean, report.esedd.se, report.esedd.capped_fraction))
        _emit(out, ["nu", "mean_delay", "se", "capped_fraction"], rows)
    _run(go)


def _stream_alarms(proc, out):
    """Run the detector on stdin, restarting after every alarm."""
    from .engine import step

    fh = open(out, "w") if out else sys.stdout
    try:
        state = proc.initial_state(1)
        n = 0
        for line in sys.stdin:
            line = line.strip()
            if not line:
                continue
            try:
                x = float(line)
            except ValueError as exc:
                raise PreconditionError(f"line {n + 1}: not a number: {line!r}") from exc
            n += 1
            dec = step(proc, state, np.array([x]))
            if dec[0] == 1:
                fh.write(f"{n},{float(proc.statistic(state)[0]):.17g}\n")
                state = proc.initial_state(1)
    finally:
        if out:
            fh.close()


@main.command("lnumber")
@common
def lnumber_cmd(config_path, seed, reps, workers, out):
    """L-numbers, zeta factors and KL numbers for every ordered pair of hypotheses."""
    def go():
        cfg = load_config(config_path)
        model = _model(cfg)
        sec = section(cfg, "lnumber", required=False)
        mc = mc_config(cfg, seed, reps, workers)
        tol = float(sec.get("tol", 1e-6))
        rows = []
        for i in range(len(model)):
            for j in range(len(model)):
                if i != j:
                    L = renewal.l_number(model, i, j, tol, reps=mc.reps, seed=mc.seed)
                    I = kl(model, i, j)
                    rows.append((i, j, L.value, L.value / I, I, L.method, L.se))
        _emit(out, ["i", "j", "L", "zeta", "I", "method", "se"], rows)
    _run(go)


@main.command("oracle")
@common
def oracle_cmd(config_path, seed, reps, workers, out):
    """Exact optimal truncated tests by backward induction. [oracle] problem =
    bayes (p0, L0, L1, c) or kw (g, v0, v1, or alpha0/alpha1 to match), H."""
    def go():
        cfg = load_config(config_path)
        sec = section(cfg, "oracle")
        msec = section(cfg, "model")
        H = int(need(sec, "H", "oracle"))
        cap = int(sec.get("max_horizon", oracle.MAX_HORIZON))
        problem = sec.get("problem", "bayes")
        if problem == "bayes":
            model = _model(cfg)
            grid = oracle.optimal_bayes_test(model, float(sec.get("p0", 0.5)), float(sec.get("L0", 1.0)),
                                             float(sec.get("L1", 1.0)), float(need(sec, "c", "oracle")), H, cap)
        elif problem == "kw":
            full = model_from_config({"kind": msec["kind"],
                                      "params": list(msec["params"])[:2] + [need(sec, "g", "oracle")]})
            f0, f1, g = full[0], full[1], full[2]
            if "alpha0" in sec:
                grid = oracle.match_errors(g, f0, f1, float(sec["alpha0"]), float(need(sec, "alpha1", "oracle")), H,
                                           max_horizon=cap)
            else:
                grid = oracle.optimal_kw_test(g, f0, f1, float(need(sec, "v0", "oracle")),
                                              float(need(sec, "v1", "oracle")), H, cap)
        else:
            raise PreconditionError(f"unknown oracle problem {problem!r}")
        oc = grid.oc
        click.echo(f"value={grid.root_value:.17g} ess={','.join(f'{v:.17g}' for v in oc.ess)}", err=True)
        _emit(out, ["n", "s_lower", "s_upper"], grid.boundaries())
    _run(go)


@main.command("calibrate")
@common
def calibrate_cmd(config_path, seed, reps, workers, out):
    """Threshold search. [calibrate] metric = arl (uses [detector]) or
    alpha (symmetric SPRT thresholds +-a, P0(d=1)); target, lo, hi."""
    def go():
        cfg = load_config(config_path)
        sec = section(cfg, "calibrate")
        mc = mc_config(cfg, seed, reps, workers)
        metric = sec.get("metric", "arl")
        target = float(need(sec, "target", "calibrate"))
        lo, hi = float(need(sec, "lo", "calibrate")), float(need(sec, "hi", "calibrate"))
        if metric == "arl":
            dsec = section(cfg, "detector")
            if dsec.get("kind") != "cusum":
                raise PreconditionError("ARL calibration supports the cusum detector")
            model = _model(cfg)
            cm = cp.ChangeModel(model[0], model[1])

            def evaluate(a):
                proc = cp.CusumProcedure(cm, a)
                b = mc_run(proc, iid_source(model[0]), mc)
                return float(b.T.mean())
        elif metric == "alpha":
            model = _model(cfg)

            def evaluate(a):
                b = mc_run(sprt.SprtProcedure(model, sprt.SprtConfig(-a, a)), iid_source(model[0]), mc)
                return float(np.mean(b.d == 1))
        else:
            raise PreconditionError(f"unknown calibration metric {metric!r}")
        thr, achieved = calibrate_threshold(evaluate, target, lo, hi, float(sec.get("rel_tol", 0.1)))
        _emit(out, ["threshold", "achieved", "target"], [(thr, achieved, target)])
    _run(go)


if __name__ == "__main__":
    main()
