"""Command-line experiment runner: ``aeqprop run|compare|verify``.

Exit codes: 0 success, 1 configuration error, 2 a run diverged, 3 a
verification check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .core import AeqpropError, NudgeVariant
from .data import RegressionStream, load_mnist
from .models import HopfieldModel, LinRegModel, init_params
from .relax import CoordConfig, GradFlowConfig
from .train import AeqpropConfig, TrainTrace, error_rate, sgd_baseline, train
from .verify import SuiteConfig, theorem_suite

log = logging.getLogger("aeqprop")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3
TRACE_COLUMNS = ("step", "loss", "lyapunov", "dtheta_norm", "phase_gap", "iterations", "controller_residual")

# per-layer learning rates and gains used for the MNIST networks
DENSE_DEFAULTS = {"gains": [0.8, 1.2], "lr": {"w1": 0.1, "w2": 0.05, "b1": 0.02, "b2": 0.01}}
CONV_DEFAULTS = {"gains": [0.6, 0.6, 1.5],
                 "lr": {"w1": 0.128, "w2": 0.032, "w3": 0.008, "b1": 0.032, "b2": 0.008, "b3": 0.002}}


# Traces ---------------------------------------------------------------------------------


def write_trace(path, trace: TrainTrace, experiment: str, config_hash: str, run: str | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# experiment: {experiment}\n")
        fh.write(f"# run: {run or trace.method}\n")
        fh.write(f"# method: {trace.method}\n")
        fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in trace.steps:
            writer.writerow([r.step, repr(r.loss), repr(r.lyapunov), repr(r.dtheta_norm), repr(r.phase_gap),
                             r.iterations, repr(r.controller_residual)])


@dataclass
class TraceFile:
    meta: dict
    columns: tuple
    data: dict

    def __len__(self):
        return len(self.data["step"])


def read_trace(path) -> TraceFile:
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise AeqpropError(f"{path}: no header row")
    rows = list(csv.reader(body))
    columns = tuple(rows[0])
    values = np.array([[float(v) for v in row] for row in rows[1:]]).reshape(-1, len(columns))
    return TraceFile(meta, columns, {c: values[:, i] for i, c in enumerate(columns)})


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average; shorter series are averaged whole."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return values
    window = min(window, len(values))
    return np.convolve(values, np.ones(window) / window, mode="valid")


def compare(a, b, window: int = 50, prefix: bool = False) -> dict:
    """Loss-curve comparison of two traces (paths or :class:`TraceFile`)."""
    ta = a if isinstance(a, TraceFile) else read_trace(a)
    tb = b if isinstance(b, TraceFile) else read_trace(b)
    if ta.columns != tb.columns:
        raise AeqpropError("traces have different columns")
    if ta.meta.get("experiment") != tb.meta.get("experiment"):
        raise AeqpropError(f"traces come from different experiments "
                           f"({ta.meta.get('experiment')!r} vs {tb.meta.get('experiment')!r})")
    n = min(len(ta), len(tb))
    if len(ta) != len(tb) and not prefix:
        raise AeqpropError(f"traces have {len(ta)} and {len(tb)} steps; pass prefix=True to compare the overlap")
    la, lb = ta.data["loss"][:n], tb.data["loss"][:n]
    report = {"steps": n, "window": window}
    if n == 0:
        report.update(max_gap=0.0, mean_gap=0.0, max_relative_gap=0.0, ratio_mean=math.nan, ratio_max=math.nan)
        return report
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = la / lb
    sa, sb = smooth(la, window), smooth(lb, window)
    gap = np.abs(sa - sb)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(gap == 0, 0.0, gap / np.abs(sb))
    finite = ratio[np.isfinite(ratio)]
    report.update(
        max_gap=float(gap.max()), mean_gap=float(gap.mean()), max_relative_gap=float(rel.max()),
        ratio_mean=float(finite.mean()) if finite.size else math.nan,
        ratio_max=float(finite.max()) if finite.size else math.nan,
    )
    return report


# Experiments ------------------------------------------------------------------------------


def _relax_configs(cfg: ExperimentConfig) -> tuple[CoordConfig, GradFlowConfig]:
    r = cfg.relax
    schedule = r.param_schedule or ("after_state" if cfg.experiment.startswith("hopfield") else "every_sweep")
    return (CoordConfig(max_iters=r.max_iters, threshold=r.threshold, param_schedule=schedule),
            GradFlowConfig(n_steps=r.n_steps, eta_s0=r.eta_s0, seed=cfg.seed))


def _epsilon(t, beta: float, default):
    if t.epsilon is not None:
        return t.epsilon
    lr = t.lr if t.lr is not None else default
    if isinstance(lr, dict):
        return {k: v / beta for k, v in lr.items()}
    return lr / beta


def _aeqprop_cfg(cfg: ExperimentConfig, method: str, beta: float, epsilon) -> AeqpropConfig:
    t = cfg.training
    coord, gradflow = _relax_configs(cfg)
    return AeqpropConfig(variant=NudgeVariant.from_name(method, beta), epsilon=epsilon,
                         homeostatic_mode=t.homeostatic_mode, relaxer=t.relaxer, coord=coord, gradflow=gradflow,
                         lr_decay=t.lr_decay, adaptive_threshold=t.adaptive_threshold,
                         verify_lyapunov=t.verify_lyapunov, seed=t.seed)


def run_linreg(cfg: ExperimentConfig, epsilon: float, beta: float, regularize: bool | None = None,
               samples: int | None = None, methods=None) -> dict[str, TrainTrace]:
    t = cfg.training
    model = LinRegModel(cfg.model.n_freq, cfg.model.regularize_state if regularize is None else regularize)
    x, y = RegressionStream.from_seed(cfg.model.target_seed, t.seed).sample(samples or t.samples)
    theta0 = np.zeros(model.param_layout.size)
    coord, _ = _relax_configs(cfg)
    traces = {}
    for method in methods or t.methods:
        if method == "sgd":
            lr = model.param_layout.broadcast(epsilon) * beta
            traces[method] = sgd_baseline(model, (x, y), lr, t.epochs, theta0, t.batch_size, t.shuffle, t.seed,
                                          coord)
        else:
            traces[method] = train(model, (x, y), _aeqprop_cfg(cfg, method, beta, epsilon), t.epochs, theta0,
                                   t.batch_size, t.shuffle)
    return traces


def _linreg_epsilon(cfg: ExperimentConfig):
    t = cfg.training
    return _epsilon(t, t.beta, 0.01 * t.beta) if (t.epsilon is not None or t.lr is not None) else 0.01


def run_grid(cfg: ExperimentConfig) -> dict[str, TrainTrace]:
    """The (eps, beta) grid plus the stabilized large-beta runs, one trace per cell and method."""
    g = cfg.grid
    cells = [(f"eps{e:g}_beta{b:g}", e, b, None, None) for b in g.beta for e in g.epsilon]
    cells += [(f"stab_eps{e:g}_beta{g.stabilized_beta:g}", e, g.stabilized_beta, True, g.stabilized_samples)
              for e in g.epsilon]

    def job(cell):
        name, e, b, reg, n = cell
        return name, run_linreg(cfg, e, b, reg, n)

    out = {}
    with ThreadPoolExecutor(max_workers=g.workers) as pool:
        for name, traces in pool.map(job, cells):
            for method, trace in traces.items():
                out[f"{name}_{method}"] = trace
    return out


def run_hopfield(cfg: ExperimentConfig, conv: bool) -> tuple[dict[str, TrainTrace], dict]:
    t, d = cfg.training, cfg.data
    if "sgd" in t.methods:
        raise ConfigError("training.methods", "sgd needs a loss gradient, which is not available for Hopfield models")
    defaults = CONV_DEFAULTS if conv else DENSE_DEFAULTS
    train_set = load_mnist("train", d.root, d.train_limit, d.verify_checksums)
    test_set = load_mnist("test", d.root, d.test_limit, d.verify_checksums)
    if conv:
        model = HopfieldModel.conv_mnist()
    else:
        model = HopfieldModel.dense([784, *cfg.model.hidden, 10])
        train_set, test_set = train_set.flat(), test_set.flat()
    gains = cfg.model.gains or defaults["gains"]
    if len(gains) != model.n_layers:
        raise ConfigError("model.gains", f"need {model.n_layers} values")
    epsilon = _epsilon(t, t.beta, defaults["lr"])
    if isinstance(epsilon, dict) and set(epsilon) != set(model.param_layout.names):
        raise ConfigError("training.lr", f"need one value per segment {model.param_layout.names}")
    theta0 = init_params(model, gains, cfg.seed)
    coord, _ = _relax_configs(cfg)
    eval_coord = replace(coord, threshold=1e-4)

    def evaluate(theta):
        return math.nan, error_rate(model, theta, test_set.images, test_set.one_hot, eval_coord)

    traces, errors = {}, {}
    for method in t.methods:
        trace = train(model, train_set, _aeqprop_cfg(cfg, method, t.beta, epsilon), t.epochs, theta0,
                      t.batch_size, shuffle=True, evaluate=evaluate)
        traces[method] = trace
        errors[method] = [e.test_error for e in trace.epochs]
    return traces, {"test_error": errors}


def _model_for_verify(name: str):
    if name == "linreg":
        return LinRegModel()
    if name == "linreg_stabilized":
        return LinRegModel(regularize_state=True)
    return HopfieldModel.dense([2, 3, 2])


def _trace_summary(trace: TrainTrace, window: int) -> dict:
    losses = trace.losses()
    finite = losses[np.isfinite(losses)]
    return {
        "method": trace.method,
        "steps": len(trace.steps),
        "diverged": trace.diverged,
        "final_smoothed_loss": float(smooth(finite, window)[-1]) if finite.size else None,
        "mean_loss": float(finite.mean()) if finite.size else None,
        "lyapunov_violations": trace.lyapunov_violations(),
        "epochs": [{"epoch": e.epoch, "mean_loss": e.mean_loss, "test_error": e.test_error, "xi": e.xi}
                   for e in trace.epochs],
    }


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, default=_json_default, allow_nan=True))


def execute(cfg: ExperimentConfig) -> int:
    """Run the configured experiment and write its artifacts; returns the exit status."""
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.hash()
    _write_json(out / "config.resolved.json", {"config_hash": digest, **cfg.to_dict()})
    summary = {"experiment": cfg.experiment, "config_hash": digest, "runs": {}}
    status = EXIT_OK
    if cfg.experiment == "verify":
        report = run_verify(cfg)
        summary["verify"] = report.to_dict()
        _write_json(out / "verify_report.json", {"config_hash": digest, **report.to_dict()})
        status = EXIT_OK if report.passed else EXIT_CHECK_FAILED
    else:
        extra = {}
        if cfg.experiment == "linreg":
            traces = run_linreg(cfg, _linreg_epsilon(cfg), cfg.training.beta)
        elif cfg.experiment == "linreg_grid":
            traces = run_grid(cfg)
        else:
            traces, extra = run_hopfield(cfg, conv=cfg.experiment == "hopfield_conv")
        summary.update(extra)
        for name, trace in traces.items():
            write_trace(out / f"trace_{name}.csv", trace, cfg.experiment, digest, run=name)
            summary["runs"][name] = _trace_summary(trace, cfg.output.window)
        if any(tr.diverged for tr in traces.values()):
            status = EXIT_DIVERGED
    summary["status"] = status
    _write_json(out / "summary.json", summary)
    return status


def run_verify(cfg: ExperimentConfig):
    v = cfg.verify
    return theorem_suite(_model_for_verify(v.model), SuiteConfig(n_instances=v.n_instances, seed=v.seed))


# Entry point ------------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aeqprop", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment described by a TOML config")
    r.add_argument("config")
    r.add_argument("--out", help="override output.dir")
    c = sub.add_parser("compare", help="compare the loss curves of two trace CSVs")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--window", type=int, default=50)
    c.add_argument("--prefix", action="store_true", help="compare the common prefix of unequal traces")
    v = sub.add_parser("verify", help="run the theorem suite for the model in a config")
    v.add_argument("config")
    v.add_argument("--out", help="override output.dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            print(json.dumps(compare(args.a, args.b, args.window, args.prefix), indent=2))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.out:
            cfg.output.dir = args.out
        if args.command == "verify":
            cfg.experiment = "verify"
        status = execute(cfg)
        print(f"{cfg.experiment}: status {status}, artifacts in {cfg.output.dir}")
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AeqpropError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
