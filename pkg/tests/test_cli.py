"""Config parsing, pipeline orchestration and the command-line entry point."""
import json
import math

import numpy as np
import pytest

from mfcglobal import bench
from mfcglobal import cli
from mfcglobal import network as nw
from mfcglobal.errors import ConfigError, FormatError

SMOKE = """
[experiment]
problem = ex3
n_players = 2
dt = 0.1
seed = 3

[train]
batch_size = 16
max_iters = 50
patience = 50
learning_rate = 0.01

[fit]
samples_per_epoch = 16
rollouts = 4
max_iters = 10
patience = 10

[evaluate]
t = 0.0
n_points = 256
measure.gauss = {"type": "gaussian", "mean": [0.0], "std": [1.0]}
measure.origin = {"type": "dirac", "point": [0.0]}

[metrics]
P = 4
L = 3
n_probes = 16
"""


def _strip_times(report):
    report = dict(report)
    report.pop("wall_times")
    return report


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = cli.load_config(text=SMOKE, out=str(out))
    return out, cli.run_pipeline(cfg)


class TestConfig:
    def test_defaults_follow_experiment(self):
        cfg = cli.load_config(text=SMOKE)
        assert cfg.train.dt == 0.1 and cfg.fit.dt == 0.1
        assert cfg.train.batch_size == 16 and cfg.metric_P == 4
        assert set(cfg.measures) == {"gauss", "origin"}

    def test_overrides(self):
        cfg = cli.load_config(text=SMOKE, seed=9, workers=2, out="elsewhere")
        assert (cfg.seed, cfg.workers, cfg.out) == (9, 2, "elsewhere")

    def test_resolved_round_trip(self):
        cfg = cli.load_config(text=SMOKE)
        again = cli.load_config(text=cli.dump_config(cfg))
        assert cli.dump_config(again) == cli.dump_config(cfg)

    @pytest.mark.parametrize("text,match", [
        ("[experiment]\nproblem = ex7\n", "problem"),
        ("[experiment]\ncolour = red\n", "colour"),
        ("[train]\nlearning_rate = fast\n", "learning_rate"),
        ("[train]\nlearning_rate = -1\n", "learning_rate"),
        ("[experiment]\nstages = train, dance\n", "dance"),
        ("[evaluate]\nmeasure.m = {\"type\": \"cauchy\"}\n", "cauchy"),
        ("[evaluate]\nmeasure.m = /no/such/file.json\n", "measure"),
        ("[fit]\nbox = 1, -1\n", "box"),
        ("no section header\n", "malformed"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            cli.load_config(text=text)


class TestPipeline:
    def test_smoke_report(self, smoke_run):
        out, report = smoke_run
        assert set(report) == set(cli.REPORT_KEYS)
        assert set(report["wall_times"]) >= set(cli.STAGES)
        for name in ("policy.mfcnet", "value.mfcnet", "policy_history.csv", "value_history.csv",
                     "report.json", "config.resolved.ini"):
            assert (out / name).exists()
        gauss = next(r for r in report["evaluate"] if r["name"] == "gauss")
        assert gauss["exact"] == pytest.approx(math.log(2.0) + 0.25)
        assert report["metrics"]["residual_loss"] >= 0.0
        assert report["metrics"]["hjb_loss"] >= 0.0

    def test_rerun_identical_modulo_times(self, smoke_run, tmp_path):
        out, report = smoke_run
        again = cli.run_pipeline(cli.load_config(text=SMOKE, out=str(tmp_path)))
        assert json.dumps(_strip_times(again), sort_keys=True) == json.dumps(_strip_times(report), sort_keys=True)
        assert (tmp_path / "policy.mfcnet").read_bytes() == (out / "policy.mfcnet").read_bytes()
        assert (tmp_path / "value.mfcnet").read_bytes() == (out / "value.mfcnet").read_bytes()

    def test_missing_policy_labelled(self, tmp_path):
        text = SMOKE.replace("seed = 3", "seed = 3\nstages = fit")
        with pytest.raises(cli.StageError, match=r"\[fit\]"):
            cli.run_pipeline(cli.load_config(text=text, out=str(tmp_path)))

    def test_partial_stages_reuse_checkpoints(self, smoke_run, tmp_path):
        out, report = smoke_run
        text = SMOKE.replace("seed = 3", "seed = 3\nstages = evaluate")
        for name in ("policy.mfcnet", "value.mfcnet"):
            (tmp_path / name).write_bytes((out / name).read_bytes())
        partial = cli.run_pipeline(cli.load_config(text=text, out=str(tmp_path)))
        assert partial["train"] is None and partial["evaluate"] == report["evaluate"]


class TestEvaluate:
    def test_constant_checkpoint(self, tmp_path):
        cfg = nw.MLPConfig(state_dim=3, output_shift=2.5)
        path = nw.save_checkpoint(tmp_path / "c.mfcnet", np.zeros(nw.n_params(cfg)), cfg)
        assert cli.evaluate(path, 0.0, '{"type": "uniform", "low": [0.0], "high": [1.0]}') == 2.5

    def test_dimension_mismatch(self, tmp_path):
        cfg = nw.MLPConfig(state_dim=3)
        path = nw.save_checkpoint(tmp_path / "c.mfcnet", np.zeros(nw.n_params(cfg)), cfg)
        with pytest.raises(ConfigError):
            cli.evaluate(path, 0.0, '{"type": "dirac", "point": [0.0, 1.0]}')

    def test_corrupt_checkpoint_names_field(self, tmp_path):
        cfg = nw.MLPConfig(state_dim=2)
        path = nw.save_checkpoint(tmp_path / "c.mfcnet", np.zeros(nw.n_params(cfg)), cfg)
        path.write_bytes(path.read_bytes().replace(b'"n_params"', b'"n_parms"'))
        with pytest.raises(FormatError, match="n_params"):
            cli.evaluate(path, 0.0, '{"type": "dirac", "point": [0.0]}')


class TestMain:
    def test_bench(self, capsys):
        assert cli.main(["bench", "--examples", "ex3"]) == 0
        assert capsys.readouterr().out.startswith("PASS")

    def test_evaluate_json(self, tmp_path, capsys):
        cfg = nw.MLPConfig(state_dim=2, output_shift=-1.0)
        path = nw.save_checkpoint(tmp_path / "c.mfcnet", np.zeros(nw.n_params(cfg)), cfg)
        code = cli.main(["evaluate", "--checkpoint", str(path), "--measure", '{"type": "dirac", "point": [0.3]}'])
        assert code == 0
        assert json.loads(capsys.readouterr().out)["value"] == -1.0

    def test_evaluate_csv(self, tmp_path, capsys):
        cfg = nw.MLPConfig(state_dim=1)
        path = nw.save_checkpoint(tmp_path / "c.mfcnet", np.zeros(nw.n_params(cfg)), cfg)
        cli.main(["evaluate", "--checkpoint", str(path), "--measure", '{"type": "dirac", "point": [0.3]}',
                  "--format", "csv"])
        assert capsys.readouterr().out.splitlines() == ["t,value", "0.0,0.0"]

    def test_exit_code_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[experiment]\nproblem = nope\n")
        assert cli.main(["train", "--config", str(bad)]) == 2
        assert "error" in capsys.readouterr().err

    def test_exit_code_missing_config(self):
        assert cli.main(["train"]) == 2

    def test_exit_code_io(self, tmp_path):
        assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none.mfcnet"),
                         "--measure", '{"type": "dirac", "point": [0.0]}']) == 4

    def test_exit_code_format(self, tmp_path):
        junk = tmp_path / "junk.mfcnet"
        junk.write_bytes(b"garbage")
        assert cli.main(["evaluate", "--checkpoint", str(junk), "--measure", '{"type": "dirac", "point": [0.0]}']) == 4

    def test_exit_code_divergence(self, tmp_path):
        cfgfile = tmp_path / "div.ini"
        cfgfile.write_text("[experiment]\nproblem = ex3\nn_players = 2\ndt = 0.25\n"
                           "[train]\nlearning_rate = 10000\noptimizer = sgd\nbatch_size = 8\nmax_iters = 40\n")
        with np.errstate(all="ignore"):
            assert cli.main(["train", "--config", str(cfgfile), "--out", str(tmp_path / "o")]) == 3

    def test_train_fit_metrics_commands(self, tmp_path, capsys):
        cfgfile = tmp_path / "s.ini"
        cfgfile.write_text(SMOKE.replace("max_iters = 50", "max_iters = 3"))
        out = str(tmp_path / "o")
        assert cli.main(["train", "--config", str(cfgfile), "--out", out]) == 0
        assert cli.main(["fit", "--config", str(cfgfile), "--out", out]) == 0
        assert cli.main(["metrics", "--config", str(cfgfile), "--out", out]) == 0
        assert "hjb_loss" in (tmp_path / "o" / "metrics.json").read_text()


@pytest.mark.slow
class TestDeskRun:
    def test_example1_dirac_value(self, tmp_path):
        text = """
[experiment]
problem = ex1
n_players = 20
dt = 0.02
seed = 1
stages = train, evaluate

[train]
batch_size = 256
max_iters = 300
patience = 60
learning_rate = 0.01

[evaluate]
measure.half = {"type": "dirac", "point": [0.5]}
"""
        report = cli.run_pipeline(cli.load_config(text=text, out=str(tmp_path)))
        assert report["evaluate"] == []
        assert abs(report["mean_field"]["half"]["value"] - 0.25) <= 0.025
