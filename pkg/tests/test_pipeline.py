import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eigenscore.errors import (
    AnalyticModelRequiredError,
    BadRangeError,
    LayoutMismatchError,
    TooFewSamplesError,
    TooFewTimestepsError,
)
from eigenscore.gmm import GaussianMixture
from eigenscore.pipeline import (
    Calibration,
    EigenFeature,
    FeatureConfig,
    config_hash,
    contiguous_subsets,
    eigen_feature,
    eigen_score,
    extract_features,
    fit_calibration,
    mse_score,
    nll_score,
    reduce_feature,
    score_derivative_norm,
    score_norm,
    tune,
)
from eigenscore.rng import LANE_NOISE, LANE_SPECTRAL, RngStream, gaussian_vec
from eigenscore.schedule import build_schedule, sigma_at
from eigenscore.spectral import SpectralConfig, subspace_iteration


def small_model():
    return GaussianMixture(
        [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [np.eye(2) * 0.6, np.eye(2) * 0.9]
    )


def small_schedule():
    return build_schedule("geometric", 0.1, 3.0, 12)


def test_feature_layout_mean_and_median():
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(3, 7), top_k=2, n_reps=3, aggregation="mean")
    feat = eigen_feature(model, np.array([0.2, -0.1]), sched, cfg, seed=0, sample_id=4)
    assert feat.sample_id == 4
    assert feat.layout == ((3, 1), (7, 1))
    assert feat.values.shape == (2,)
    med = eigen_feature(
        model,
        np.array([0.2, -0.1]),
        sched,
        FeatureConfig(timesteps=(3, 7), top_k=2, n_reps=3, aggregation="median"),
        seed=0,
        sample_id=4,
    )
    assert med.layout == feat.layout


def test_feature_layout_all_keeps_every_repetition():
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(3, 7), top_k=2, n_reps=3, aggregation="all")
    feat = eigen_feature(model, np.zeros(2), sched, cfg, seed=0)
    assert feat.layout == ((3, 1), (3, 2), (3, 3), (7, 1), (7, 2), (7, 3))
    assert feat.values.shape == (6,)


def test_feature_aggregations_consistent():
    model, sched = small_model(), small_schedule()
    base = dict(timesteps=(3, 7), top_k=2, n_reps=5)
    x = np.array([0.5, 0.5])
    all_f = eigen_feature(
        model, x, sched, FeatureConfig(aggregation="all", **base), seed=1
    )
    mean_f = eigen_feature(
        model, x, sched, FeatureConfig(aggregation="mean", **base), seed=1
    )
    med_f = eigen_feature(
        model, x, sched, FeatureConfig(aggregation="median", **base), seed=1
    )
    per_t = all_f.values.reshape(2, 5)
    assert np.allclose(mean_f.values, per_t.mean(axis=1), atol=0.0)
    assert np.allclose(med_f.values, np.median(per_t, axis=1), atol=0.0)


def test_feature_matches_manual_subspace_run():
    # one repetition recomputed by hand from the same streams
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(5,), top_k=2, n_reps=3, aggregation="all")
    seed, sid, t, rep = 9, 2, 5, 1
    feat = eigen_feature(model, np.array([0.3, 0.7]), sched, cfg, seed=seed, sample_id=sid)
    sigma = sigma_at(sched, t)
    z = gaussian_vec(RngStream(seed, (sid, t, rep, LANE_NOISE)), 2, sigma)
    res = subspace_iteration(
        model,
        np.array([0.3, 0.7]) + z,
        sigma,
        SpectralConfig(top_k=2),
        rng=RngStream(seed, (sid, t, rep, LANE_SPECTRAL)),
    )
    assert feat.values[rep] == float(np.sum(res.eigenvalues))


def test_feature_independent_of_other_samples():
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(3, 7), top_k=2, n_reps=2)
    alone = eigen_feature(model, np.array([1.0, 1.0]), sched, cfg, seed=3, sample_id=17)
    xs = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    feats = extract_features(model, xs, sched, cfg, seed=3, sample_ids=[5, 17, 40])
    assert np.array_equal(feats[1].values, alone.values)


def test_extract_features_threads_equal():
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(3, 7), top_k=2, n_reps=2)
    xs = model.sample(RngStream(0, (0,)), 6)
    a = extract_features(model, xs, sched, cfg, seed=0, threads=1)
    b = extract_features(model, xs, sched, cfg, seed=0, threads=4)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert [f.sample_id for f in a] == [f.sample_id for f in b] == list(range(6))


def test_extract_features_checks_ids():
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(3,), top_k=1, n_reps=1)
    with pytest.raises(BadRangeError):
        extract_features(model, np.zeros((2, 2)), sched, cfg, seed=0, sample_ids=[1])


def test_retry_recovers_from_local_rank_deficiency(caplog):
    # a denoiser whose Jacobian collapses in a small ball around the
    # first-attempt noisy point of one repetition; the retry lane lands
    # elsewhere and succeeds
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(5,), top_k=2, n_reps=3, aggregation="all")
    seed, sid, t, rep = 11, 0, 5, 1
    sigma = sigma_at(sched, t)
    x = np.array([0.4, -0.2])
    bad_center = x + gaussian_vec(RngStream(seed, (sid, t, rep, LANE_NOISE)), 2, sigma)

    class Collapsing:
        def denoise(self, pts, s):
            pts2 = np.atleast_2d(np.asarray(pts, dtype=float))
            out = model.denoise(pts2, s)
            bad = np.linalg.norm(pts2 - bad_center, axis=1) < 0.1
            out[bad] = 0.0
            return out[0] if np.asarray(pts).ndim == 1 else out

    with caplog.at_level(logging.WARNING, logger="eigenscore.pipeline"):
        feat = eigen_feature(Collapsing(), x, sched, cfg, seed=seed, sample_id=sid)
    assert np.all(np.isfinite(feat.values))
    assert any("retry succeeded" in r.message for r in caplog.records)


def test_all_failures_imputed_with_median(caplog):
    # collapse around both the first-attempt and the retry point of one
    # repetition; its value must equal the median of the others
    model, sched = small_model(), small_schedule()
    cfg = FeatureConfig(timesteps=(5,), top_k=2, n_reps=3, aggregation="all")
    seed, sid, t, rep = 11, 0, 5, 1
    sigma = sigma_at(sched, t)
    x = np.array([0.4, -0.2])
    from eigenscore.rng import LANE_NOISE_RETRY

    centers = [
        x + gaussian_vec(RngStream(seed, (sid, t, rep, lane)), 2, sigma)
        for lane in (LANE_NOISE, LANE_NOISE_RETRY)
    ]

    class Collapsing:
        def denoise(self, pts, s):
            pts2 = np.atleast_2d(np.asarray(pts, dtype=float))
            out = model.denoise(pts2, s)
            for c in centers:
                out[np.linalg.norm(pts2 - c, axis=1) < 0.1] = 0.0
            return out[0] if np.asarray(pts).ndim == 1 else out

    with caplog.at_level(logging.WARNING, logger="eigenscore.pipeline"):
        feat = eigen_feature(Collapsing(), x, sched, cfg, seed=seed, sample_id=sid)
    others = np.delete(feat.values, rep)
    assert feat.values[rep] == np.median(others)
    assert any("imputed" in r.message for r in caplog.records)


def test_fit_calibration_oracle():
    layout = ((1, 1), (2, 1))
    feats = [
        EigenFeature(0, np.array([1.0, 10.0]), layout),
        EigenFeature(1, np.array([3.0, 10.0]), layout),
        EigenFeature(2, np.array([5.0, 10.0]), layout),
    ]
    calib = fit_calibration(feats, aggregation="mean")
    assert np.allclose(calib.mu, [3.0, 10.0])
    # population convention: std of (1,3,5) is sqrt(8/3)
    assert calib.sigma[0] == pytest.approx(np.sqrt(8.0 / 3.0), rel=1e-12)
    assert calib.sigma[1] == 0.0
    assert calib.timesteps == (1, 2)
    assert calib.n_train == 3


def test_fit_calibration_needs_two_samples():
    with pytest.raises(TooFewSamplesError):
        fit_calibration([EigenFeature(0, np.array([1.0]), ((1, 1),))], "mean")


def test_fit_calibration_rejects_mixed_layouts():
    with pytest.raises(LayoutMismatchError):
        fit_calibration(
            [
                EigenFeature(0, np.array([1.0]), ((1, 1),)),
                EigenFeature(1, np.array([1.0]), ((2, 1),)),
            ],
            "mean",
        )


def test_eigen_score_z_oracle():
    layout = ((1, 1), (2, 1))
    calib = Calibration(
        metric="eigenscore",
        timesteps=(1, 2),
        aggregation="mean",
        mu=np.array([1.0, 2.0]),
        sigma=np.array([2.0, 0.5]),
        layout=layout,
        n_train=10,
    )
    rec = eigen_score(EigenFeature(3, np.array([2.0, 1.0]), layout), calib)
    assert np.allclose(rec.z, [0.5, -2.0])
    assert rec.score == pytest.approx(-1.5)
    assert rec.sample_id == 3


def test_eigen_score_floors_zero_spread():
    layout = ((1, 1),)
    calib = Calibration(
        metric="eigenscore",
        timesteps=(1,),
        aggregation="mean",
        mu=np.array([5.0]),
        sigma=np.array([0.0]),
        layout=layout,
        n_train=4,
    )
    rec = eigen_score(EigenFeature(0, np.array([5.0 + 1e-9]), layout), calib)
    assert np.isfinite(rec.score)
    assert rec.z[0] == pytest.approx(1e-9 / 1e-12)


def test_eigen_score_layout_mismatch():
    calib = Calibration(
        metric="eigenscore",
        timesteps=(1,),
        aggregation="mean",
        mu=np.array([0.0]),
        sigma=np.array([1.0]),
        layout=((1, 1),),
        n_train=4,
    )
    with pytest.raises(LayoutMismatchError):
        eigen_score(EigenFeature(0, np.array([0.0]), ((2, 1),)), calib)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_training_z_scores_average_to_zero(seed):
    gen = np.random.default_rng(seed)
    layout = ((1, 1), (2, 1), (3, 1))
    vals = gen.normal(size=(6, 3)) + np.arange(3)
    vals[:, 0] += np.linspace(0.0, 1.0, 6)  # guarantee spread
    feats = [EigenFeature(i, vals[i], layout) for i in range(6)]
    calib = fit_calibration(feats, "mean")
    zbar = np.mean([eigen_score(f, calib).z for f in feats], axis=0)
    assert np.allclose(zbar, 0.0, atol=1e-9)


def test_reduce_feature_subsets_and_aggregates():
    layout = ((2, 1), (2, 2), (5, 1), (5, 2))
    feat = EigenFeature(7, np.array([1.0, 3.0, 10.0, 20.0]), layout)
    red = reduce_feature(feat, (5,), "mean")
    assert red.layout == ((5, 1),)
    assert red.values[0] == pytest.approx(15.0)
    assert red.sample_id == 7
    both = reduce_feature(feat, (2, 5), "median")
    assert np.allclose(both.values, [2.0, 15.0])
    kept = reduce_feature(feat, (2,), "all")
    assert kept.layout == ((2, 1), (2, 2))
    assert np.allclose(kept.values, [1.0, 3.0])


def test_reduce_feature_validates():
    feat = EigenFeature(0, np.array([1.0, 2.0]), ((2, 1), (2, 2)))
    with pytest.raises(LayoutMismatchError):
        reduce_feature(feat, (9,), "mean")
    with pytest.raises(BadRangeError):
        reduce_feature(feat, (2,), "mode")


def test_contiguous_subsets():
    assert contiguous_subsets((1, 2, 3)) == [
        (1,),
        (1, 2),
        (1, 2, 3),
        (2,),
        (2, 3),
        (3,),
    ]


def _planted_features(gen, n, shift_t5=0.0, base_id=0):
    layout = tuple((t, s) for t in (2, 5) for s in (1, 2, 3))
    out = []
    for i in range(n):
        vals = gen.normal(0.0, 1.0, size=6)
        vals[3:] += shift_t5
        out.append(EigenFeature(base_id + i, vals, layout))
    return out


def test_tune_finds_planted_timestep():
    gen = np.random.default_rng(0)
    train = _planted_features(gen, 20)
    val_ind = _planted_features(gen, 15, base_id=100)
    val_ood = _planted_features(gen, 15, shift_t5=50.0, base_id=200)
    result = tune(train, val_ind, val_ood)
    # timestep 5 alone separates perfectly; ties prefer fewer timesteps
    # and mean aggregation
    assert result.timesteps == (5,)
    assert result.aggregation == "mean"
    assert result.auroc == 1.0


def test_tune_without_ood_returns_defaults(caplog):
    gen = np.random.default_rng(1)
    train = _planted_features(gen, 8)
    val_ind = _planted_features(gen, 8, base_id=50)
    with caplog.at_level(logging.WARNING, logger="eigenscore.pipeline"):
        result = tune(train, val_ind, [])
    assert result.timesteps == (2, 5)
    assert result.aggregation == "mean"
    assert np.isnan(result.auroc)
    assert any("no validation" in r.message for r in caplog.records)


def test_mse_score_matches_manual_recomputation():
    model, sched = small_model(), small_schedule()
    x = np.array([0.5, -0.5])
    ts, n_reps, seed, sid = (3, 7), 4, 2, 6
    got = mse_score(model, x, sched, ts, n_reps, seed, sample_id=sid)
    total = 0.0
    for t in ts:
        sigma = sigma_at(sched, t)
        errs = []
        for i in range(n_reps):
            z = gaussian_vec(RngStream(seed, (sid, t, i, LANE_NOISE)), 2, sigma)
            err = model.denoise(x + z, sigma) - x
            errs.append(err @ err)
        total += np.mean(errs)
    assert got == pytest.approx(total / len(ts), rel=1e-12)


def test_score_norm_statistical_oracle():
    # unit 1-d Gaussian at sigma=1 and x = 0: x_t = z with unit variance,
    # eps = x_t / 2, so E||eps||^2 = 1/4 and the score is about 1/2
    g = GaussianMixture.single([0.0], [[1.0]])
    sched = build_schedule("linear", 1.0, 2.0, 2)
    val = score_norm(g, np.array([0.0]), sched, (1,), 400, seed=0)
    assert val == pytest.approx(0.5, abs=0.05)


def test_score_derivative_norm_manual():
    model, sched = small_model(), small_schedule()
    x = np.array([0.1, 0.2])
    ts, n_reps, seed, sid = (3, 5, 9), 3, 4, 2
    got = score_derivative_norm(model, x, sched, ts, n_reps, seed, sample_id=sid)
    zs = np.stack(
        [
            gaussian_vec(RngStream(seed, (sid, 0, i, LANE_NOISE)), 2, 1.0)
            for i in range(n_reps)
        ]
    )
    eps = []
    for t in ts:
        sigma = sigma_at(sched, t)
        pts = x[None, :] + sigma * zs
        eps.append((pts - model.denoise(pts, sigma)) / sigma)
    total = 0.0
    for a, b, gap in ((0, 1, 2), (1, 2, 4)):
        diff = (eps[b] - eps[a]) / gap
        total += np.mean(np.sum(diff * diff, axis=1))
    assert got == pytest.approx(np.sqrt(total), rel=1e-12)


def test_score_derivative_needs_two_timesteps():
    model, sched = small_model(), small_schedule()
    with pytest.raises(TooFewTimestepsError):
        score_derivative_norm(model, np.zeros(2), sched, (3,), 2, seed=0)


def test_nll_score_oracle():
    g = GaussianMixture.single([0.0], [[1.0]])
    sched = build_schedule("linear", 1.0, 2.0, 2)
    # -log density of N(0, 1 + 1) at zero
    assert nll_score(g, np.array([0.0]), sched, (1,)) == pytest.approx(
        1.2655121234846454, abs=1e-14
    )
    assert nll_score(g, np.array([0.0]), sched, (1, 2)) > nll_score(
        g, np.array([0.0]), sched, (1,)
    )


def test_nll_score_needs_analytic_model():
    sched = build_schedule("linear", 1.0, 2.0, 2)
    with pytest.raises(AnalyticModelRequiredError):
        nll_score(lambda x, s: x, np.zeros(1), sched, (1,))


def test_config_hash_stable_and_sensitive():
    sched = small_schedule()
    cfg = FeatureConfig(timesteps=(3, 7), top_k=2, n_reps=4)
    a = config_hash({"kind": "gmm"}, sched, cfg, "eigenscore")
    b = config_hash({"kind": "gmm"}, sched, cfg, "eigenscore")
    assert a == b and len(a) == 16
    c = config_hash({"kind": "gmm"}, sched, FeatureConfig(timesteps=(3, 7), top_k=3), "eigenscore")
    assert c != a
    d = config_hash({"kind": "gmm"}, sched, cfg, "mse")
    assert d != a


def test_feature_round_trips_through_dict():
    feat = EigenFeature(4, np.array([1.5, 2.5]), ((3, 1), (7, 1)))
    back = EigenFeature.from_dict(feat.to_dict())
    assert back.sample_id == 4
    assert np.array_equal(back.values, feat.values)
    assert back.layout == feat.layout


def test_calibration_round_trips_through_dict():
    calib = Calibration(
        metric="mse",
        timesteps=(3, 7),
        aggregation="mean",
        mu=np.array([1.0]),
        sigma=np.array([2.0]),
        layout=((0, 1),),
        n_train=12,
        config_hash="abc",
    )
    back = Calibration.from_dict(calib.to_dict())
    assert back.metric == "mse"
    assert back.timesteps == (3, 7)
    assert np.array_equal(back.mu, calib.mu)
    assert back.layout == ((0, 1),)
    assert back.config_hash == "abc"


def test_feature_config_validates():
    with pytest.raises(BadRangeError):
        FeatureConfig(timesteps=(1,), aggregation="max")
    with pytest.raises(BadRangeError):
        FeatureConfig(timesteps=(1,), n_reps=0)
