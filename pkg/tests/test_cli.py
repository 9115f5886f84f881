import csv
import io
from pathlib import Path

import pytest
from click.testing import CliRunner

from seqlab.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::seqlab.changepoint.ReliabilityWarning")

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

EXPECTED_HEADERS = {
    "sprt": ["truth", "rep", "T", "d", "truncated", "statistic"],
    "msprt": ["truth", "rep", "T", "d", "truncated", "statistic"],
    "multistream": ["truth", "rep", "T", "d", "truncated", "statistic"],
    "kw": ["truth", "rep", "T", "d", "truncated", "statistic"],
    "gslrt": ["truth", "rep", "T", "d", "truncated", "statistic"],
    "multistage": ["truth", "rep", "stages_used", "T", "d"],
    "detect": ["nu", "mean_delay", "se", "capped_fraction"],
    "lnumber": ["i", "j", "L", "zeta", "I", "method", "se"],
    "oracle": ["n", "s_lower", "s_upper"],
    "calibrate": ["threshold", "achieved", "target"],
}


def invoke(*args, input=None):
    return CliRunner().invoke(main, list(args), input=input)


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_run(path):
    sub = path.stem.split("_")[0]
    res = invoke(sub, "--config", str(path), "--reps", "200", "--seed", "3")
    assert res.exit_code == 0, res.output
    table = rows(res.stdout)
    assert table[0] == EXPECTED_HEADERS[sub]
    assert len(table) > 1


def test_output_file_and_worker_independence(tmp_path):
    cfg = str(CONFIGS / "sprt_bernoulli.toml")
    out1, out4 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert invoke("sprt", "--config", cfg, "--reps", "3000", "--workers", "1", "--out", str(out1)).exit_code == 0
    assert invoke("sprt", "--config", cfg, "--reps", "3000", "--workers", "4", "--out", str(out4)).exit_code == 0
    assert out1.read_bytes() == out4.read_bytes()
    assert len(rows(out1.read_text())) == 1 + 2 * 3000


def test_detect_report_rows():
    res = invoke("detect", "--config", str(CONFIGS / "detect_cusum.toml"), "--reps", "500")
    table = rows(res.stdout)
    assert [r[0] for r in table[1:]] == ["0", "10", "50", "100", "inf", "esedd"]
    assert table[-1][1] == table[1][1]  # the restart worst case is the change-at-0 delay


def test_detect_stream_mode(tmp_path):
    cfg = write(tmp_path, """
[model]
kind = "gaussian-unit-variance"
params = [0.0, 1.0]
[detector]
kind = "cusum"
threshold = 3.0
""")
    # llr(x) = x - 1/2; 4.0 gives 3.5 >= 3 and the detector restarts after an alarm
    res = invoke("detect", "--config", cfg, "--stream", input="0.1\n4.0\n\n-2\n2.0\n2.0\n")
    assert res.exit_code == 0, res.output
    lines = res.stdout.strip().splitlines()
    assert lines == ["2,3.5", "5,3"]


def test_stream_mode_rejects_text(tmp_path):
    cfg = write(tmp_path, '[model]\nkind = "bernoulli"\nparams = [0.4, 0.6]\n[detector]\nkind = "cusum"\nthreshold = 3.0\n')
    res = invoke("detect", "--config", cfg, "--stream", input="1\nabc\n")
    assert res.exit_code == 2


@pytest.mark.parametrize("text", [
    "[mc]\nreps = 10\n",  # no [model]
    '[model]\nkind = "cauchy"\nparams = [0, 1]\n[test]\nalpha0 = 0.01\nalpha1 = 0.01\n',
    '[model]\nkind = "bernoulli"\nparams = [0.4, 0.6]\n[test]\nalpha0 = 0.7\nalpha1 = 0.7\n',
    "this is = = not toml",
])
def test_bad_input_exits_2(tmp_path, text):
    res = invoke("sprt", "--config", write(tmp_path, text))
    assert res.exit_code == 2
    assert "error:" in res.stderr


def test_missing_config_file_exits_2(tmp_path):
    assert invoke("sprt", "--config", str(tmp_path / "none.toml")).exit_code == 2


def test_unreachable_calibration_exits_3(tmp_path):
    cfg = write(tmp_path, """
[model]
kind = "bernoulli"
params = [0.4, 0.6]
[detector]
kind = "cusum"
[calibrate]
metric = "arl"
target = 1000.0
lo = 3.7
hi = 4.8
[mc]
reps = 600
seed = 1
""")
    res = invoke("calibrate", "--config", cfg)
    assert res.exit_code == 3
    assert "calibration" in res.stderr


def test_alpha_calibration(tmp_path):
    cfg = write(tmp_path, """
[model]
kind = "bernoulli"
params = [0.3, 0.7]
[calibrate]
metric = "alpha"
target = 0.05
lo = 0.5
hi = 6.0
[mc]
reps = 4000
""")
    res = invoke("calibrate", "--config", cfg)
    assert res.exit_code == 0, res.output
    thr, achieved, target = map(float, rows(res.stdout)[1])
    assert abs(achieved - 0.05) <= 0.005


def test_oracle_horizon_limit_exits_4(tmp_path):
    cfg = write(tmp_path, """
[model]
kind = "bernoulli"
params = [0.4, 0.6]
[oracle]
problem = "bayes"
c = 0.01
H = 500
""")
    assert invoke("oracle", "--config", cfg).exit_code == 4
    ok = cfg.replace("cfg.toml", "cfg2.toml")
    Path(ok).write_text(Path(cfg).read_text().replace("H = 500", "H = 500\nmax_horizon = 500"))
    assert invoke("oracle", "--config", ok).exit_code == 0


def test_oracle_reports_value(tmp_path):
    res = invoke("oracle", "--config", str(CONFIGS / "oracle_kw.toml"))
    assert res.exit_code == 0
    assert res.stderr.startswith("value=")
    table = rows(res.stdout)
    assert len(table) == 200  # header plus n = 1..199


def test_help_lists_subcommands():
    res = invoke("--help")
    for sub in EXPECTED_HEADERS:
        assert sub in res.output
