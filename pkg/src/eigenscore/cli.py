"""Command-line front end.

Subcommands: gen-data, train, fit, score, eval, verify.  Exit codes:
0 success, 1 verification failure, 2 usage or config error, 3 I/O or
file-format error, 4 numerical failure.  All outputs are deterministic
for a fixed config and seed, and all writes are atomic.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as cfgmod
from .errors import (
    AnalyticModelRequiredError,
    CheckpointFormatError,
    ConfigError,
    EigenscoreError,
    TensorFormatError,
)
from .evaluate import auroc
from .gmm import GaussianMixture
from .mlp import MlpDenoiser
from .pipeline import (
    Calibration,
    EigenFeature,
    config_hash,
    eigen_score,
    extract_features,
    fit_calibration,
    mse_score,
    nll_score,
    score_derivative_norm,
    score_norm,
)
from .rng import LANE_DATA, RngStream
from .spectral import subspace_iteration
from .tensorio import atomic_write_text, read_tensor, write_tensor
from .verify import run_all

log = logging.getLogger(__name__)

METRICS = ("eigenscore", "mse", "score-norm", "score-deriv", "nll")
FLOAT_FMT = "%.17g"


def _thread_count(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("EIGENSCORE_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"EIGENSCORE_THREADS={env!r} is not an integer")
        if n < 1:
            raise ConfigError(f"EIGENSCORE_THREADS must be >= 1, got {n}")
        return n
    return 1


def _model_desc(cfg: dict):
    section = cfg.get("model", {})
    if section.get("kind") == "gmm":
        return section
    return {"kind": "mlp", "checkpoint": os.path.basename(section.get("checkpoint", ""))}


def _metric_features(metric, model, xs, schedule, fcfg, seed, threads):
    """A feature vector per row of xs, shaped per metric.

    The spectral metric keeps one value per (timestep, slot); the
    baselines collapse to one scalar with a whole-sample layout slot.
    """
    if metric == "eigenscore":
        return extract_features(model, xs, schedule, fcfg, seed, threads=threads)
    scalar_layout = ((0, 1),)
    ts = fcfg.timesteps
    feats = []
    for sid, row in enumerate(xs):
        if metric == "mse":
            v = mse_score(model, row, schedule, ts, fcfg.n_reps, seed, sample_id=sid)
        elif metric == "score-norm":
            v = score_norm(model, row, schedule, ts, fcfg.n_reps, seed, sample_id=sid)
        elif metric == "score-deriv":
            v = score_derivative_norm(model, row, schedule, ts, fcfg.n_reps, seed, sample_id=sid)
        elif metric == "nll":
            v = nll_score(model, row, schedule, ts)
        else:
            raise ConfigError(f"unknown metric {metric!r}")
        feats.append(EigenFeature(sample_id=sid, values=np.array([v]), layout=scalar_layout))
    return feats


def _load_inputs(args):
    cfg = cfgmod.load_config(args.config)
    model = cfgmod.model_from_config(cfg)
    schedule = cfgmod.schedule_from_config(cfg)
    fcfg = cfgmod.feature_config_from_config(cfg, schedule)
    seed = cfg.get("seed", 0)
    return cfg, model, schedule, fcfg, seed


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load_config(args.config)
    model = cfgmod.model_from_config(cfg)
    if not isinstance(model, GaussianMixture):
        raise AnalyticModelRequiredError("gen-data samples from an analytic mixture")
    data_cfg = cfg.get("data", {})
    n = args.n if args.n is not None else data_cfg.get("n", 1000)
    stream = args.stream if args.stream is not None else data_cfg.get("stream", 0)
    seed = cfg.get("seed", 0)
    xs = model.sample(RngStream(seed, (LANE_DATA, stream)), n)
    write_tensor(args.out, xs)
    print(f"wrote {n} samples of dim {model.dim} to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    schedule = cfgmod.schedule_from_config(cfg)
    tcfg, hidden = cfgmod.train_config_from_config(cfg)
    data = read_tensor(args.data).astype(float)
    if data.ndim != 2:
        raise TensorFormatError(f"training data must be 2-d, got shape {data.shape}")
    net = MlpDenoiser(data.shape[1], hidden=hidden, seed=tcfg.seed)
    losses = net.train(data, schedule, tcfg)
    net.save(args.out, train_config=tcfg)
    print(
        f"trained {len(hidden)}-hidden-layer denoiser on {data.shape[0]} samples: "
        f"loss {losses[0]:.6g} -> {losses[-1]:.6g}, saved to {args.out}"
    )
    return 0


def cmd_fit(args) -> int:
    cfg, model, schedule, fcfg, seed = _load_inputs(args)
    metric = args.metric
    xs = read_tensor(args.data).astype(float)
    if xs.ndim != 2:
        raise TensorFormatError(f"fit data must be 2-d, got shape {xs.shape}")
    threads = _thread_count(args)
    feats = _metric_features(metric, model, xs, schedule, fcfg, seed, threads)
    agg = fcfg.aggregation if metric == "eigenscore" else "mean"
    calib = fit_calibration(
        feats,
        aggregation=agg,
        metric=metric,
        config_hash=config_hash(_model_desc(cfg), schedule, fcfg, metric),
        timesteps=fcfg.timesteps,
    )
    atomic_write_text(args.out, json.dumps(calib.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"calibrated {metric} on {len(feats)} samples -> {args.out}")
    return 0


def _score_rows(model, xs, schedule, fcfg, calib, seed, threads):
    if calib.metric == "eigenscore":
        run_cfg = replace(fcfg, timesteps=calib.timesteps, aggregation=calib.aggregation)
        feats = extract_features(model, xs, schedule, run_cfg, seed, threads=threads)
    else:
        feats = _metric_features(calib.metric, model, xs, schedule, fcfg, seed, threads)
    return [eigen_score(f, calib) for f in feats]


def cmd_score(args) -> int:
    cfg, model, schedule, fcfg, seed = _load_inputs(args)
    calib = Calibration.from_dict(cfgmod.load_calibration_doc(args.calibration))
    if args.metric is not None and args.metric != calib.metric:
        raise ConfigError(
            f"--metric {args.metric} conflicts with calibration metric {calib.metric}"
        )
    expected_hash = config_hash(_model_desc(cfg), schedule, fcfg, calib.metric)
    if calib.config_hash and calib.config_hash != expected_hash:
        log.warning(
            "calibration was fit under a different configuration "
            "(hash %s, current %s)", calib.config_hash, expected_hash,
        )
    xs = read_tensor(args.data).astype(float)
    if xs.ndim != 2:
        raise TensorFormatError(f"score data must be 2-d, got shape {xs.shape}")
    threads = _thread_count(args)
    records = _score_rows(model, xs, schedule, fcfg, calib, seed, threads)

    buf = io.StringIO()
    m = len(calib.mu)
    header = ["id", "score"] + [f"z_{j}" for j in range(1, m + 1)]
    buf.write(",".join(header) + "\n")
    for rec in records:
        cells = [str(rec.sample_id), FLOAT_FMT % rec.score]
        cells += [FLOAT_FMT % z for z in rec.z]
        buf.write(",".join(cells) + "\n")
    atomic_write_text(args.out, buf.getvalue())

    if args.export_components is not None:
        comps = _export_components(model, xs, schedule, fcfg, calib, seed)
        write_tensor(args.export_components, comps)
    if args.json_out is not None:
        scores = np.array([r.score for r in records])
        summary = {
            "metric": calib.metric,
            "n": len(records),
            "mean_score": float(scores.mean()),
            "min_score": float(scores.min()),
            "max_score": float(scores.max()),
            "config_hash": expected_hash,
        }
        atomic_write_text(args.json_out, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"scored {len(records)} samples with {calib.metric} -> {args.out}")
    return 0


def _export_components(model, xs, schedule, fcfg, calib, seed):
    """Leading eigenvector per (sample, timestep) from the first repetition."""
    from .rng import LANE_NOISE, LANE_SPECTRAL, gaussian_vec
    from .schedule import sigma_at, validate_timesteps

    ts = validate_timesteps(schedule, calib.timesteps)
    spectral = replace(fcfg.spectral, top_k=fcfg.top_k)
    d = xs.shape[1]
    out = np.zeros((xs.shape[0], len(ts), d))
    for sid, row in enumerate(xs):
        for ti, t in enumerate(ts):
            sigma = sigma_at(schedule, t)
            z = gaussian_vec(RngStream(seed, (sid, t, 0, LANE_NOISE)), d, sigma)
            result = subspace_iteration(
                model,
                row + z,
                sigma,
                spectral,
                rng=RngStream(seed, (sid, t, 0, LANE_SPECTRAL)),
            )
            out[sid, ti] = result.eigenvectors[:, 0]
    return out


def _read_scores_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2 or header[0] != "id" or header[1] != "score":
            raise ConfigError(f"{path} is not a score CSV (want 'id,score,...' header)")
        scores = []
        for row in reader:
            if not row:
                continue
            scores.append(float(row[1]))
    return np.array(scores)


def cmd_eval(args) -> int:
    ind = _read_scores_csv(args.ind)
    ood = _read_scores_csv(args.ood)
    result = auroc(ind, ood)
    print(
        f"AUROC {result.auroc:.6f}  (n_ind={result.n_ind} n_ood={result.n_ood}, "
        f"higher score = more out-of-distribution)"
    )
    if args.json_out is not None:
        atomic_write_text(
            args.json_out, json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
        )
    if args.roc_out is not None:
        buf = io.StringIO()
        buf.write("threshold,fpr,tpr\n")
        # curve arrays carry the prepended origin; thresholds align from 1
        for th, f, t in zip(result.thresholds, result.fpr[1:], result.tpr[1:]):
            buf.write(
                ",".join((FLOAT_FMT % th, FLOAT_FMT % f, FLOAT_FMT % t)) + "\n"
            )
        atomic_write_text(args.roc_out, buf.getvalue())
    return 0


def cmd_verify(args) -> int:
    report = run_all(args.seed)
    print(report.format_table())
    if args.json_out is not None:
        atomic_write_text(
            args.json_out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
        )
    return 0 if report.all_pass else 1


# -- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eigenscore",
        description="Out-of-distribution detection from the posterior spectrum of a denoiser.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, threads=False, metric=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        if threads:
            p.add_argument(
                "--threads",
                type=int,
                default=None,
                help="worker threads (default: EIGENSCORE_THREADS or 1)",
            )
        if metric:
            p.add_argument("--metric", choices=METRICS, default=None)

    p = sub.add_parser("gen-data", help="sample a dataset from an analytic mixture")
    add_common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--stream", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a small denoising network")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="calibrate a metric on training data")
    add_common(p, threads=True, metric=True)
    p.set_defaults(metric="eigenscore")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score samples against a calibration")
    add_common(p, threads=True, metric=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json-out", default=None)
    p.add_argument("--export-components", default=None, help="tensor of leading eigenvectors")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AUROC from two score CSVs")
    p.add_argument("--ind", required=True, help="in-distribution scores")
    p.add_argument("--ood", required=True, help="out-of-distribution scores")
    p.add_argument("--json-out", default=None)
    p.add_argument("--roc-out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the analytic self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TensorFormatError, CheckpointFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except EigenscoreError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
