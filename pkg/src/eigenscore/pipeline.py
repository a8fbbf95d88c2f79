"""From per-sample spectra to calibrated out-of-distribution scores.

For each selected timestep t and repetition i, a sample x is perturbed to
x_t = x + sigma_t z and the top eigenvalues of the posterior covariance are
estimated at x_t; their sum is the raw feature.  Features are aggregated
over repetitions, z-scored per coordinate against training-set statistics,
and summed into a single score where larger means more out-of-distribution.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AnalyticModelRequiredError,
    BadRangeError,
    LayoutMismatchError,
    RankDeficientError,
    TooFewSamplesError,
    TooFewTimestepsError,
)
from .rng import (
    LANE_NOISE,
    LANE_NOISE_RETRY,
    LANE_SPECTRAL,
    LANE_SPECTRAL_RETRY,
    RngStream,
    gaussian_vec,
)
from .schedule import NoiseSchedule, sigma_at, validate_timesteps
from .spectral import SpectralConfig, subspace_iteration, subspace_iteration_batch

log = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "median", "all")
SIGMA_FLOOR = 1e-12

# Shared unit-noise draws for the score-derivative baseline use this lane in
# place of a timestep index, since one draw spans all selected timesteps.
_PATH_LANE = 0


@dataclass
class FeatureConfig:
    timesteps: tuple[int, ...]
    top_k: int = 3
    n_reps: int = 20
    aggregation: str = "mean"
    spectral: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        self.timesteps = tuple(int(t) for t in self.timesteps)
        if self.aggregation not in AGGREGATIONS:
            raise BadRangeError(
                f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}"
            )
        if self.n_reps < 1:
            raise BadRangeError(f"n_reps must be >= 1, got {self.n_reps}")


@dataclass
class EigenFeature:
    """Aggregated eigenvalue-sum features for one sample.

    layout pairs (timestep, slot): slot is 1 for mean/median aggregation
    and runs 1..n_reps when all repetitions are kept.
    """

    sample_id: int
    values: np.ndarray
    layout: tuple[tuple[int, int], ...]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "values": [float(v) for v in self.values],
            "layout": [[int(t), int(s)] for t, s in self.layout],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EigenFeature":
        return cls(
            sample_id=int(d["sample_id"]),
            values=np.asarray(d["values"], dtype=float),
            layout=tuple((int(t), int(s)) for t, s in d["layout"]),
        )


@dataclass
class Calibration:
    """Per-coordinate training statistics used to z-score features."""

    metric: str
    timesteps: tuple[int, ...]
    aggregation: str
    mu: np.ndarray
    sigma: np.ndarray
    layout: tuple[tuple[int, int], ...]
    n_train: int
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "timesteps": list(self.timesteps),
            "aggregation": self.aggregation,
            "mu": [float(v) for v in self.mu],
            "sigma": [float(v) for v in self.sigma],
            "layout": [[int(t), int(s)] for t, s in self.layout],
            "n_train": self.n_train,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(
            metric=d["metric"],
            timesteps=tuple(int(t) for t in d["timesteps"]),
            aggregation=d["aggregation"],
            mu=np.asarray(d["mu"], dtype=float),
            sigma=np.asarray(d["sigma"], dtype=float),
            layout=tuple((int(t), int(s)) for t, s in d["layout"]),
            n_train=int(d["n_train"]),
            config_hash=d.get("config_hash", ""),
        )


@dataclass
class ScoreRecord:
    sample_id: int
    score: float
    z: np.ndarray


def config_hash(model_desc, schedule: NoiseSchedule, config: FeatureConfig, metric: str) -> str:
    """Stable short hash of everything that shapes a feature vector."""
    doc = {
        "model": model_desc,
        "schedule": schedule.to_dict(),
        "metric": metric,
        "top_k": config.top_k,
        "n_reps": config.n_reps,
        "spectral": {
            "n_iters": config.spectral.n_iters,
            "fd_rel": config.spectral.fd_rel,
            "early_stop_tol": config.spectral.early_stop_tol,
        },
    }
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# -- feature extraction ---------------------------------------------------


def _one_repetition(denoiser, x, sigma, t, rep, config, seed, sample_id, retry):
    noise_lane = LANE_NOISE_RETRY if retry else LANE_NOISE
    spectral_lane = LANE_SPECTRAL_RETRY if retry else LANE_SPECTRAL
    z = gaussian_vec(RngStream(seed, (sample_id, t, rep, noise_lane)), x.shape[0], sigma)
    result = subspace_iteration(
        denoiser,
        x + z,
        sigma,
        config.spectral,
        rng=RngStream(seed, (sample_id, t, rep, spectral_lane)),
    )
    return float(np.sum(result.eigenvalues[: config.top_k]))


def eigen_feature(
    denoiser,
    x: np.ndarray,
    schedule: NoiseSchedule,
    config: FeatureConfig,
    seed: int,
    sample_id: int = 0,
) -> EigenFeature:
    """Eigenvalue-sum feature vector for one sample.

    Per (timestep, repetition) the noise draw and the spectral starting
    directions come from streams keyed by (sample_id, t, repetition), so
    the result does not depend on evaluation order.  A repetition whose
    orthonormalization collapses is retried once on a fresh stream and
    otherwise imputed with the median of the successful repetitions.
    """
    x = np.asarray(x, dtype=float)
    timesteps = validate_timesteps(schedule, config.timesteps)
    spectral = config.spectral
    if spectral.top_k != config.top_k:
        spectral = replace(spectral, top_k=config.top_k)
    cfg = replace(config, spectral=spectral)

    raw = np.empty((len(timesteps), config.n_reps))
    d = x.shape[0]
    for ti, t in enumerate(timesteps):
        sigma = sigma_at(schedule, t)
        # all repetitions of this timestep share each denoiser call; every
        # row still follows its own (sample, t, rep)-keyed streams
        x_ts = np.stack(
            [
                x + gaussian_vec(RngStream(seed, (sample_id, t, rep, LANE_NOISE)), d, sigma)
                for rep in range(config.n_reps)
            ]
        )
        rngs = [
            RngStream(seed, (sample_id, t, rep, LANE_SPECTRAL))
            for rep in range(config.n_reps)
        ]
        outcomes = subspace_iteration_batch(denoiser, x_ts, sigma, cfg.spectral, rngs)
        failed: list[int] = []
        for rep, out in enumerate(outcomes):
            if isinstance(out, RankDeficientError):
                try:
                    raw[ti, rep] = _one_repetition(
                        denoiser, x, sigma, t, rep, cfg, seed, sample_id, retry=True
                    )
                    log.warning(
                        "sample %d t=%d rep %d: rank-deficient subspace, retry succeeded",
                        sample_id, t, rep,
                    )
                except RankDeficientError:
                    failed.append(rep)
            else:
                raw[ti, rep] = float(np.sum(out.eigenvalues[: config.top_k]))
        if failed:
            ok = np.delete(raw[ti], failed)
            if ok.size == 0:
                raise RankDeficientError(
                    f"all {config.n_reps} repetitions failed at t={t}"
                )
            raw[ti, failed] = np.median(ok)
            log.warning(
                "sample %d t=%d: %d repetition(s) imputed with the median",
                sample_id, t, len(failed),
            )
    return _aggregate(raw, timesteps, config.aggregation, config.n_reps, sample_id)


def _aggregate(raw, timesteps, aggregation, n_reps, sample_id) -> EigenFeature:
    if aggregation == "mean":
        values = raw.mean(axis=1)
        layout = tuple((t, 1) for t in timesteps)
    elif aggregation == "median":
        values = np.median(raw, axis=1)
        layout = tuple((t, 1) for t in timesteps)
    else:
        values = raw.reshape(-1)
        layout = tuple((t, i + 1) for t in timesteps for i in range(n_reps))
    return EigenFeature(sample_id=sample_id, values=values, layout=layout)


def extract_features(
    denoiser,
    xs: np.ndarray,
    schedule: NoiseSchedule,
    config: FeatureConfig,
    seed: int,
    threads: int = 1,
    sample_ids=None,
) -> list[EigenFeature]:
    """eigen_feature over the rows of xs, optionally on a thread pool.

    Results are identical for any thread count: all randomness is keyed by
    (seed, sample_id, timestep, repetition) and collection preserves order.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ids = list(range(xs.shape[0])) if sample_ids is None else list(sample_ids)
    if len(ids) != xs.shape[0]:
        raise BadRangeError("sample_ids length does not match data")

    def work(row_and_id):
        row, sid = row_and_id
        return eigen_feature(denoiser, row, schedule, config, seed, sample_id=sid)

    items = list(zip(xs, ids))
    if threads <= 1:
        return [work(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, items))


# -- calibration and scoring ----------------------------------------------


def _common_layout(features) -> tuple[tuple[int, int], ...]:
    layout = features[0].layout
    for f in features[1:]:
        if f.layout != layout:
            raise LayoutMismatchError(
                f"feature layouts differ: {f.layout} vs {layout}"
            )
    return layout


def fit_calibration(
    features: list[EigenFeature],
    aggregation: str,
    metric: str = "eigenscore",
    config_hash: str = "",
    timesteps=None,
) -> Calibration:
    """Per-coordinate mean and population standard deviation (divide by N).

    timesteps defaults to the distinct ones in the layout; scalar metrics
    whose layout does not encode timesteps pass them explicitly.
    """
    if len(features) < 2:
        raise TooFewSamplesError(f"calibration needs >= 2 samples, got {len(features)}")
    layout = _common_layout(features)
    stacked = np.stack([f.values for f in features])
    if timesteps is None:
        timesteps = tuple(dict.fromkeys(t for t, _ in layout))
    else:
        timesteps = tuple(int(t) for t in timesteps)
    return Calibration(
        metric=metric,
        timesteps=timesteps,
        aggregation=aggregation,
        mu=stacked.mean(axis=0),
        sigma=stacked.std(axis=0),  # population convention, ddof=0
        layout=layout,
        n_train=len(features),
        config_hash=config_hash,
    )


def eigen_score(feature: EigenFeature, calibration: Calibration) -> ScoreRecord:
    """Sum of per-coordinate z-scores; higher means more out-of-distribution."""
    if feature.layout != calibration.layout:
        raise LayoutMismatchError(
            f"feature layout {feature.layout} does not match calibration"
        )
    z = (feature.values - calibration.mu) / np.maximum(calibration.sigma, SIGMA_FLOOR)
    return ScoreRecord(sample_id=feature.sample_id, score=float(np.sum(z)), z=z)


def reduce_feature(feature: EigenFeature, timesteps, aggregation: str) -> EigenFeature:
    """Restrict an all-repetitions feature to a timestep subset and aggregate."""
    if aggregation not in AGGREGATIONS:
        raise BadRangeError(f"unknown aggregation {aggregation!r}")
    per_t: dict[int, list[float]] = {}
    for (t, _), v in zip(feature.layout, feature.values):
        per_t.setdefault(t, []).append(float(v))
    missing = [t for t in timesteps if t not in per_t]
    if missing:
        raise LayoutMismatchError(f"timesteps {missing} absent from feature layout")
    n_reps = len(per_t[timesteps[0]])
    raw = np.array([per_t[t] for t in timesteps])
    return _aggregate(raw, tuple(timesteps), aggregation, n_reps, feature.sample_id)


# -- tuning ---------------------------------------------------------------


@dataclass
class TuneResult:
    timesteps: tuple[int, ...]
    aggregation: str
    auroc: float
    table: list


def contiguous_subsets(timesteps) -> list[tuple[int, ...]]:
    ts = tuple(timesteps)
    return [ts[i:j] for i in range(len(ts)) for j in range(i + 1, len(ts) + 1)]


def tune(
    train_features: list[EigenFeature],
    val_ind_features: list[EigenFeature],
    val_ood_features,
    timesteps_grid=None,
    aggregations=AGGREGATIONS,
) -> TuneResult:
    """Pick (timesteps, aggregation) maximizing validation AUROC.

    All features must carry every repetition (aggregation "all") over the
    full timestep list; candidates are evaluated by reducing them.  Ties
    prefer fewer timesteps, then mean over median over all.  Without
    validation out-of-distribution data the configured defaults are
    returned with a warning.
    """
    from .evaluate import auroc  # local import to avoid a cycle

    full_t = tuple(dict.fromkeys(t for t, _ in _common_layout(train_features)))
    if not val_ood_features:
        log.warning("no validation out-of-distribution data; keeping default timesteps and mean aggregation")
        return TuneResult(timesteps=full_t, aggregation="mean", auroc=float("nan"), table=[])
    if timesteps_grid is None:
        timesteps_grid = contiguous_subsets(full_t)
    agg_rank = {a: i for i, a in enumerate(AGGREGATIONS)}
    table = []
    for ts in timesteps_grid:
        for agg in aggregations:
            calib = fit_calibration(
                [reduce_feature(f, ts, agg) for f in train_features], agg
            )
            ind = [eigen_score(reduce_feature(f, ts, agg), calib).score for f in val_ind_features]
            ood = [eigen_score(reduce_feature(f, ts, agg), calib).score for f in val_ood_features]
            table.append((auroc(ind, ood).auroc, tuple(ts), agg))
    table.sort(key=lambda row: (-row[0], len(row[1]), agg_rank[row[2]], row[1]))
    best = table[0]
    return TuneResult(timesteps=best[1], aggregation=best[2], auroc=best[0], table=table)


# -- baseline scores ------------------------------------------------------


def _noisy_points(x, sigma, t, n_reps, seed, sample_id):
    d = x.shape[0]
    zs = np.stack(
        [
            gaussian_vec(RngStream(seed, (sample_id, t, i, LANE_NOISE)), d, sigma)
            for i in range(n_reps)
        ]
    )
    return x[None, :] + zs


def mse_score(denoiser, x, schedule, timesteps, n_reps, seed, sample_id: int = 0) -> float:
    """Mean squared denoising error over timesteps and repetitions."""
    x = np.asarray(x, dtype=float)
    fn = denoiser.denoise
    total = 0.0
    ts = validate_timesteps(schedule, timesteps)
    for t in ts:
        sigma = sigma_at(schedule, t)
        pts = _noisy_points(x, sigma, t, n_reps, seed, sample_id)
        err = fn(pts, sigma) - x[None, :]
        total += float(np.mean(np.sum(err * err, axis=1)))
    return total / len(ts)


def score_norm(denoiser, x, schedule, timesteps, n_reps, seed, sample_id: int = 0) -> float:
    """Root of the summed mean squared noise-estimate norm.

    The noise estimate is eps = (x_t - D(x_t)) / sigma_t; the score is
    sqrt(sum over t of mean over repetitions of ||eps||^2).
    """
    x = np.asarray(x, dtype=float)
    fn = denoiser.denoise
    total = 0.0
    for t in validate_timesteps(schedule, timesteps):
        sigma = sigma_at(schedule, t)
        pts = _noisy_points(x, sigma, t, n_reps, seed, sample_id)
        eps = (pts - fn(pts, sigma)) / sigma
        total += float(np.mean(np.sum(eps * eps, axis=1)))
    return float(np.sqrt(total))


def score_derivative_norm(denoiser, x, schedule, timesteps, n_reps, seed, sample_id: int = 0) -> float:
    """Root-sum-square of finite differences of eps across timesteps.

    Each repetition keeps one underlying unit draw z and evaluates
    eps_t = (x_t - D(x_t)) / sigma_t at x_t = x + sigma_t z for every
    selected t; consecutive differences are divided by the index gap.
    """
    x = np.asarray(x, dtype=float)
    ts = validate_timesteps(schedule, timesteps)
    if len(ts) < 2:
        raise TooFewTimestepsError("need at least two timesteps for a t-derivative")
    fn = denoiser.denoise
    d = x.shape[0]
    eps = np.empty((len(ts), n_reps, d))
    zs = np.stack(
        [
            gaussian_vec(RngStream(seed, (sample_id, _PATH_LANE, i, LANE_NOISE)), d, 1.0)
            for i in range(n_reps)
        ]
    )
    for ti, t in enumerate(ts):
        sigma = sigma_at(schedule, t)
        pts = x[None, :] + sigma * zs
        eps[ti] = (pts - fn(pts, sigma)) / sigma
    total = 0.0
    for ti in range(len(ts) - 1):
        gap = ts[ti + 1] - ts[ti]
        diff = (eps[ti + 1] - eps[ti]) / gap
        total += float(np.mean(np.sum(diff * diff, axis=1)))
    return float(np.sqrt(total))


def nll_score(model, x, schedule, timesteps) -> float:
    """Negative noisy log density summed over timesteps (analytic models only)."""
    logpdf = getattr(model, "noisy_logpdf", None)
    if logpdf is None:
        raise AnalyticModelRequiredError("nll_score needs a model with noisy_logpdf")
    x = np.asarray(x, dtype=float)
    return float(
        -sum(logpdf(x, sigma_at(schedule, t)) for t in validate_timesteps(schedule, timesteps))
    )
