"""Experiment runner: ``mfcglobal {train,fit,evaluate,metrics,run,bench}``.

Experiments are described by an INI file::

    [experiment]
    problem = ex3
    n_players = 10
    dt = 0.01
    seed = 0

    [train]
    batch_size = 256
    max_iters = 400

    [evaluate]
    t = 0.0
    measure.gauss = {"type": "gaussian", "mean": [0.0], "std": [1.0]}

Every run writes the resolved configuration next to its outputs.  Exit
codes: 0 success, 2 configuration error, 3 numerical divergence, 4 I/O or
file-format error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bench as bm
from . import measure as ms
from . import metrics as mt
from . import network as nw
from . import rng
from .errors import ConfigError, FormatError, NumericError
from .policy import NeuralPolicy, TrainConfig, policy_network_config, train_policy
from .valuefit import RegressionConfig, fit_value, value_network_config

log = logging.getLogger("mfcglobal")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
STAGES = ("train", "fit", "evaluate", "metrics")
REPORT_KEYS = ("problem", "n_players", "dt", "seed", "stages", "train", "fit", "evaluate",
               "metrics", "mean_field", "wall_times")


class StageError(Exception):
    """A module error tagged with the pipeline stage that raised it."""

    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage, self.error = stage, error


# -- configuration ----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    problem: str = "ex3"
    n_players: int = 10
    dt: float = 0.01
    seed: int = 0
    workers: int = 1
    out: str = "runs/experiment"
    stages: tuple = STAGES
    overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    fit: RegressionConfig = field(default_factory=RegressionConfig)
    fit_box: tuple | None = None
    eval_t: float = 0.0
    eval_mode: str = "sobol"
    eval_points: int = 4096
    measures: dict = field(default_factory=dict)
    metric_P: int = 200
    metric_L: int = 4
    metric_probes: int = 1024
    metric_box: tuple | None = None
    metric_t: float = 0.0

    def benchmark(self) -> bm.Benchmark:
        try:
            return bm.get_benchmark(self.problem, self.overrides)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad problem section: {exc}") from None


def _typed(dc_type, section, defaults):
    """Build a dataclass from an INI section, converting by field type."""
    kw = {}
    known = {f.name: f for f in fields(dc_type)}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        kw[key] = _convert(raw, type(getattr(defaults, key)), key)
    try:
        return dc_type(**{**asdict(defaults), **kw})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}]: {exc}") from None


def _convert(raw, typ, key):
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(float(v) for v in raw.split(","))
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None


def _box(raw):
    vals = tuple(float(v) for v in raw.split(","))
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise ConfigError(f"box must be 'lo, hi' with lo < hi, got {raw!r}")
    return vals


def load_config(path=None, text: str | None = None, seed: int | None = None,
                workers: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Parse an experiment file; command-line values override the file."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        if text is not None:
            cp.read_string(text)
        else:
            with open(path) as fh:
                cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    if cp.has_section("experiment"):
        sec = cp["experiment"]
        for key, raw in sec.items():
            if key == "stages":
                cfg.stages = tuple(s.strip() for s in raw.split(",") if s.strip())
                bad = set(cfg.stages) - set(STAGES)
                if bad:
                    raise ConfigError(f"unknown stage(s) {sorted(bad)}")
            elif key in ("problem", "out"):
                setattr(cfg, key, raw.strip())
            elif key in ("n_players", "seed", "workers"):
                setattr(cfg, key, _convert(raw, int, key))
            elif key == "dt":
                cfg.dt = _convert(raw, float, key)
            else:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
    if cp.has_section("problem"):
        for key, raw in cp["problem"].items():
            cfg.overrides[key] = _box(raw) if key == "training_box" else _convert(raw, float, key)
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if out is not None:
        cfg.out = out
    train_default = TrainConfig(dt=cfg.dt, seed=rng.derive_key(cfg.seed, "train") % 2 ** 31)
    cfg.train = _typed(TrainConfig, cp["train"], train_default) if cp.has_section("train") else train_default
    fit_default = RegressionConfig(dt=cfg.dt, seed=rng.derive_key(cfg.seed, "fit") % 2 ** 31)
    if cp.has_section("fit"):
        sec = dict(cp["fit"])
        if "box" in sec:
            cfg.fit_box = _box(sec.pop("box"))
        proxy = configparser.ConfigParser(interpolation=None)
        proxy.optionxform = str
        proxy.read_dict({"fit": sec})
        cfg.fit = _typed(RegressionConfig, proxy["fit"], fit_default)
    else:
        cfg.fit = fit_default
    if cp.has_section("evaluate"):
        for key, raw in cp["evaluate"].items():
            if key.startswith("measure."):
                try:
                    cfg.measures[key[len("measure."):]] = ms.parse_measure(raw)
                except (FormatError, OSError, ValueError) as exc:
                    raise ConfigError(f"measure {key!r}: {exc}") from None
            elif key == "t":
                cfg.eval_t = _convert(raw, float, key)
            elif key == "mode":
                cfg.eval_mode = raw.strip()
            elif key == "n_points":
                cfg.eval_points = _convert(raw, int, key)
            else:
                raise ConfigError(f"unknown key {key!r} in [evaluate]")
        if cfg.eval_mode not in ("sobol", "pseudo"):
            raise ConfigError(f"unknown integration mode {cfg.eval_mode!r}")
    if cp.has_section("metrics"):
        for key, raw in cp["metrics"].items():
            if key in ("P", "L", "n_probes"):
                setattr(cfg, {"P": "metric_P", "L": "metric_L", "n_probes": "metric_probes"}[key],
                        _convert(raw, int, key))
            elif key == "box":
                cfg.metric_box = _box(raw)
            elif key == "t":
                cfg.metric_t = _convert(raw, float, key)
            else:
                raise ConfigError(f"unknown key {key!r} in [metrics]")
    if cfg.n_players < 1:
        raise ConfigError("n_players must be at least 1")
    cfg.benchmark()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved configuration in the same INI layout."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = dict(problem=cfg.problem, n_players=str(cfg.n_players), dt=repr(cfg.dt),
                            seed=str(cfg.seed), workers=str(cfg.workers), out=cfg.out,
                            stages=", ".join(cfg.stages))
    cp["problem"] = {k: (", ".join(map(repr, v)) if isinstance(v, tuple) else repr(v))
                     for k, v in cfg.overrides.items()}
    cp["train"] = {k: (", ".join(map(repr, v)) if isinstance(v, tuple) else str(v))
                   for k, v in asdict(cfg.train).items()}
    fit = {k: str(v) for k, v in asdict(cfg.fit).items()}
    if cfg.fit_box:
        fit["box"] = ", ".join(map(repr, cfg.fit_box))
    cp["fit"] = fit
    ev = dict(t=repr(cfg.eval_t), mode=cfg.eval_mode, n_points=str(cfg.eval_points))
    ev.update({f"measure.{k}": m.to_json() for k, m in cfg.measures.items()})
    cp["evaluate"] = ev
    met = dict(P=str(cfg.metric_P), L=str(cfg.metric_L), n_probes=str(cfg.metric_probes), t=repr(cfg.metric_t))
    if cfg.metric_box:
        met["box"] = ", ".join(map(repr, cfg.metric_box))
    cp["metrics"] = met
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# -- stages -----------------------------------------------------------------------

def _policy_config(cfg, b):
    return policy_network_config(b.spec, cfg.n_players, **b.policy_overrides)


def _value_config(cfg, b):
    return value_network_config(cfg.n_players, b.spec.d, **b.value_overrides)


def stage_train(cfg: ExperimentConfig, out: Path):
    b = cfg.benchmark()
    net = _policy_config(cfg, b)
    theta, state = train_policy(b.spec, cfg.train, b.sampler(cfg.n_players), cfg.n_players,
                                net_config=net, out_dir=out)
    info = {"iterations": state.iterations, "best_cost": state.best_cost,
            "checkpoint": "policy.mfcnet", "n_params": int(theta.size)}
    return NeuralPolicy(net, theta), info


def load_policy(path):
    params, config, _ = nw.load_checkpoint(path)
    return NeuralPolicy(config, params)


def stage_fit(cfg: ExperimentConfig, policy, out: Path):
    b = cfg.benchmark()
    box = cfg.fit_box or b.training_box
    sampler = None if b.name != "ex2" else bm.Example2Sampler(b.params, cfg.n_players, q_spread=2.0)
    eta, state = fit_value(b.spec, policy, cfg.n_players, cfg.fit, box, net_config=_value_config(cfg, b),
                           x_sampler=sampler, out_dir=out)
    info = {"iterations": state.iterations, "best_loss": state.best_loss, "checkpoint": "value.mfcnet"}
    return nw.Network(_value_config(cfg, b), eta), info


def _exact(b: bm.Benchmark, t, mu):
    if b.name == "ex3" and mu.dim == 1:
        return bm.example3_exact_value(t, mu, b.params.T)
    if b.name == "ex1" and isinstance(mu, ms.Dirac) and t == 0.0 and mu.point[0] >= 0:
        return bm.example1_exact(float(mu.point[0]))
    return None


def stage_evaluate(cfg: ExperimentConfig, value_net, policy=None):
    b = cfg.benchmark()
    rows, mean_field = [], {}
    for name, mu in sorted(cfg.measures.items()):
        if value_net is not None:
            v = ms.integrate_value(mt.as_value_fn(value_net), cfg.eval_t, mu, cfg.n_players,
                                   n_points=cfg.eval_points, mode=cfg.eval_mode, seed=cfg.seed)
            rows.append({"name": name, "t": cfg.eval_t, "measure": mu.to_dict(), "value": v,
                         "exact": _exact(b, cfg.eval_t, mu)})
        if b.name == "ex1" and isinstance(mu, ms.Dirac) and policy is not None:
            x0 = float(mu.point[0])
            mean_field[name] = {"x0": x0, "value": bm.example1_mean_field_value(
                b.spec, policy, x0, cfg.n_players, 2000, cfg.dt, rng.derive_key(cfg.seed, "mf") % 2 ** 31),
                "exact": _exact(b, 0.0, mu)}
    return rows, mean_field


def stage_metrics(cfg: ExperimentConfig, value_net, policy):
    b = cfg.benchmark()
    box = cfg.metric_box or b.training_box
    v_exact = (lambda t, mu: bm.example3_exact_value(t, mu, b.params.T)) if b.name == "ex3" else None
    return mt.metrics_report(value_net, b.spec, policy, cfg.n_players, v_exact=v_exact, t=cfg.metric_t,
                             P=cfg.metric_P, L=cfg.metric_L, box=box, n_probes=cfg.metric_probes,
                             dt=cfg.dt, seed=cfg.seed, n_points=cfg.eval_points)


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """train -> fit -> evaluate -> metrics, writing checkpoints and ``report.json``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(dump_config(cfg))
    report = {k: None for k in REPORT_KEYS}
    report.update(problem=cfg.problem, n_players=cfg.n_players, dt=cfg.dt, seed=cfg.seed,
                  stages=list(cfg.stages), evaluate=[], mean_field={}, wall_times={})
    policy = value_net = None

    def timed(stage, fn, *args):
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        report["wall_times"][stage] = time.perf_counter() - t0
        return result

    if "train" in cfg.stages:
        policy, report["train"] = timed("train", stage_train, cfg, out)
    elif (out / "policy.mfcnet").exists():
        policy = load_policy(out / "policy.mfcnet")
    if "fit" in cfg.stages:
        if policy is None:
            raise StageError("fit", ConfigError("no trained policy available"))
        value_net, report["fit"] = timed("fit", stage_fit, cfg, policy, out)
    elif (out / "value.mfcnet").exists():
        p, c, _ = nw.load_checkpoint(out / "value.mfcnet")
        value_net = nw.Network(c, p)
    if "evaluate" in cfg.stages and (value_net is not None or policy is not None):
        report["evaluate"], report["mean_field"] = timed("evaluate", stage_evaluate, cfg, value_net, policy)
    if "metrics" in cfg.stages and value_net is not None and policy is not None:
        m = timed("metrics", stage_metrics, cfg, value_net, policy)
        report["wall_times"].update({k: m.pop(k) for k in list(m) if k.startswith("wall_time")})
        report["metrics"] = m
    mt.write_report(out / "report.json", report)
    return report


def evaluate(checkpoint, t: float, mu, n_players: int | None = None, n_points: int = 4096,
             mode: str = "sobol", seed: int = 0) -> float:
    """Integral of a saved value network against ``mu^N``; logs the wall time."""
    params, config, _ = nw.load_checkpoint(checkpoint)
    if isinstance(mu, str):
        mu = ms.parse_measure(mu)
    N = n_players or config.state_dim // mu.dim
    if N * mu.dim != config.state_dim:
        raise ConfigError(f"measure of dimension {mu.dim} does not fit a network on {config.state_dim} inputs")
    t0 = time.perf_counter()
    v = ms.integrate_value(mt.as_value_fn(nw.Network(config, params)), t, mu, N, n_points, mode, seed)
    log.info("evaluate: %.6g in %.3fs", v, time.perf_counter() - t0)
    return v


# -- bench ------------------------------------------------------------------------

def bench_checks(names=bm.BENCHMARKS, seed: int = 0) -> list:
    """Fast closed-form checks of each example; returns ``(name, ok, detail)`` rows."""
    rows = []
    if "ex1" in names:
        spec = bm.example1_spec()
        zero = lambda t, x: np.zeros_like(np.asarray(x))
        v = bm.example1_mean_field_value(spec, zero, 0.5, 10, 2000, 0.02, seed)
        rows.append(("ex1 zero control reaches x0^2", abs(v - 0.25) <= 0.025, f"{v:.5f} vs 0.25"))
    if "ex2" in names:
        p = bm.Example2Params()
        _, grid, prices = bm.example2_explicit_cost(10, 2000, 0.01, seed, p)
        err = np.max(np.abs(prices - bm.example2_price_trajectory(grid, p)) / bm.example2_price_trajectory(grid, p))
        rows.append(("ex2 explicit control reproduces price path", err <= 0.05, f"sup rel err {err:.4f}"))
    if "ex3" in names:
        worst = 0.0
        spec = bm.example3_spec()
        for N in (1, 5, 10):
            grid = mt.HJBGrid.random((-2.0, 2.0), 256, N, 1.0, 0.01, seed)
            worst = max(worst, mt.hjb_loss(bm.Example3ExactValue(N), spec, None, grid, N,
                                           policy_from_gradient=lambda t, x, dx, N=N: -N * dx))
        rows.append(("ex3 exact solution has zero HJB residual", worst <= 1e-6, f"max loss {worst:.3g}"))
    return rows


# -- entry point --------------------------------------------------------------------

def _emit(obj, fmt, stream=None):
    stream = stream or sys.stdout
    if fmt == "json":
        stream.write(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
        return
    rows = obj if isinstance(obj, list) else [obj]
    flat = [{k: (json.dumps(v) if isinstance(v, (dict, list)) else v) for k, v in r.items()} for r in rows]
    keys = list(dict.fromkeys(k for r in flat for k in r))
    w = csv.DictWriter(stream, fieldnames=keys)
    w.writeheader()
    w.writerows(flat)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment INI file")
    common.add_argument("--seed", type=int, help="master seed (overrides the file)")
    common.add_argument("--workers", type=int, help="cap on parallel workers")
    common.add_argument("--out", help="output directory (overrides the file)")
    common.add_argument("--format", choices=("csv", "json"), default="json")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="mfcglobal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="learn the N-player control")
    f = sub.add_parser("fit", parents=[common], help="fit the value network to a trained control")
    f.add_argument("--policy", help="policy checkpoint (default OUT/policy.mfcnet)")
    e = sub.add_parser("evaluate", parents=[common], help="integrate a value network against mu^N")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--measure", required=True, help="inline JSON or path to a JSON file")
    e.add_argument("--t", type=float, default=0.0)
    e.add_argument("--n-points", type=int, default=4096)
    e.add_argument("--mode", choices=("sobol", "pseudo"), default="sobol")
    e.add_argument("--players", type=int)
    m = sub.add_parser("metrics", parents=[common], help="residual and HJB losses of a fitted value")
    m.add_argument("--policy")
    m.add_argument("--value")
    sub.add_parser("run", parents=[common], help="full pipeline")
    b = sub.add_parser("bench", parents=[common], help="closed-form checks of ex1, ex2, ex3")
    b.add_argument("--examples", default="ex1,ex2,ex3")
    return p


def _need_config(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_config(args.config, seed=args.seed, workers=args.workers, out=args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code(exc.error)
    except Exception as exc:
        code = _code(exc)
        if code is None:
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


def _code(exc):
    if isinstance(exc, (ConfigError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return None


def _dispatch(args) -> int:
    if args.command == "evaluate":
        v = evaluate(args.checkpoint, args.t, args.measure, args.players, args.n_points, args.mode,
                     args.seed or 0)
        _emit({"t": args.t, "value": v}, args.format)
        return EXIT_OK
    if args.command == "bench":
        rows = bench_checks(tuple(s.strip() for s in args.examples.split(",")), args.seed or 0)
        for name, ok, detail in rows:
            print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        return EXIT_OK if all(ok for _, ok, _ in rows) else 1
    cfg = _need_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(dump_config(cfg))
    if args.command == "run":
        report = run_pipeline(cfg)
        _emit(report if args.format == "json" else report["evaluate"], args.format)
        return EXIT_OK
    if args.command == "train":
        _, info = stage_train(cfg, out)
        _emit(info, args.format)
        return EXIT_OK
    policy = load_policy(args.policy or out / "policy.mfcnet")
    if args.command == "fit":
        _, info = stage_fit(cfg, policy, out)
        _emit(info, args.format)
        return EXIT_OK
    p, c, _ = nw.load_checkpoint(args.value or out / "value.mfcnet")
    m = stage_metrics(cfg, nw.Network(c, p), policy)
    mt.write_report(out / "metrics.json", m)
    _emit(m, args.format)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
