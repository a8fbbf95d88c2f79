"""Jacobian-free estimation of a denoiser's posterior covariance spectrum.

For x_t = x + sigma z, the posterior covariance Cov[x | x_t] equals sigma^2
times the denoiser Jacobian at x_t.  Its top eigenpairs are found by
subspace iteration where every Jacobian-vector product is a central finite
difference of two denoiser evaluations, so no Jacobian is ever formed.  A
dense finite-difference oracle (`exact_spectrum`) and the closed-form
posterior covariance of analytic mixtures (`analytic_spectrum`) back every
estimate in the tests.

A denoiser is any object with a `denoise(x, sigma)` method or any callable
`f(x, sigma)`, vectorized over a leading batch axis.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AnalyticModelRequiredError,
    BadRangeError,
    DimMismatchError,
    DimTooLargeError,
    NonFiniteDenoiserOutputError,
    RankDeficientError,
)
from .linalg import qr_orthonormalize, sym_eig
from .rng import RngStream, gaussian_vec

# Dense-oracle guard: 2d evaluations and an O(d^3) factorization beyond
# this are a mistake, not a use case.
MAX_DENSE_DIM = 4096


@dataclass
class SpectralConfig:
    """Knobs for the matrix-free spectral probe.

    top_k        number of leading eigenpairs (clamped to the data dim)
    n_iters      maximum subspace iterations
    fd_rel       finite-difference step as a fraction of sigma
    early_stop_tol  stop when every eigenvalue estimate changes by less
                 than this relative amount between iterations; 0 disables
    seed         used only when no explicit rng stream is supplied
    """

    top_k: int = 3
    n_iters: int = 15
    fd_rel: float = 1e-3
    early_stop_tol: float = 1e-4
    seed: int = 0


@dataclass
class SpectralResult:
    """Eigenvalue estimates of sigma^2 * (denoiser Jacobian) at one point.

    `eigenvalues` are descending and clamped to be non-negative;
    `raw_eigenvalues` keep the signed estimates in the same order.
    `residual` is the subspace residual of the last iteration performed
    and `asymmetry` (dense oracle only) is max |J - J^T|.
    """

    eigenvalues: np.ndarray
    raw_eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sigma: float
    residual: float
    residual_history: list = field(default_factory=list)
    n_iters: int = 0
    n_evals: int = 0
    asymmetry: float | None = None


def _as_denoise_fn(denoiser):
    fn = getattr(denoiser, "denoise", None)
    if fn is None:
        if not callable(denoiser):
            raise TypeError("denoiser must expose denoise(x, sigma) or be callable")
        fn = denoiser
    return fn


def _eval_batch(fn, points: np.ndarray, sigma: float) -> np.ndarray:
    out = np.asarray(fn(points, sigma), dtype=float)
    if out.shape != points.shape:
        # Fall back for denoisers that only accept single points.
        out = np.stack([np.asarray(fn(p, sigma), dtype=float) for p in points])
    if not np.all(np.isfinite(out)):
        raise NonFiniteDenoiserOutputError(
            f"denoiser returned non-finite values at sigma={sigma}"
        )
    return out


def _check_fd_step(c: float, sigma: float) -> None:
    if c <= 0.0:
        raise BadRangeError(f"finite-difference step must be positive, got {c}")
    if c > 0.1 * sigma:
        warnings.warn(
            f"finite-difference step c={c:.3g} exceeds 0.1*sigma={0.1 * sigma:.3g}; "
            "the linearization may be poor",
            stacklevel=3,
        )


def jvp(denoiser, x_t: np.ndarray, sigma: float, v: np.ndarray, c: float) -> np.ndarray:
    """Jacobian-vector product of the denoiser at x_t along v.

    Central difference (D(x_t + c v) - D(x_t - c v)) / (2 c); exactly two
    denoiser evaluations.
    """
    x_t = np.asarray(x_t, dtype=float)
    v = np.asarray(v, dtype=float)
    if x_t.shape != v.shape or x_t.ndim != 1:
        raise DimMismatchError(f"shapes {x_t.shape} and {v.shape} must be equal 1-d")
    if not np.any(v != 0.0):
        raise BadRangeError("direction v must be non-zero")
    if sigma <= 0.0:
        raise BadRangeError(f"sigma must be positive, got {sigma}")
    _check_fd_step(c, sigma)
    fn = _as_denoise_fn(denoiser)
    out = _eval_batch(fn, np.stack([x_t + c * v, x_t - c * v]), sigma)
    return (out[0] - out[1]) / (2.0 * c)


def _jvp_block(fn, x_t: np.ndarray, sigma: float, cols: np.ndarray, c: float) -> np.ndarray:
    """FD Jacobian products for all columns in one batched evaluation."""
    k = cols.shape[1]
    pts = np.concatenate([x_t + c * cols.T, x_t - c * cols.T], axis=0)
    out = _eval_batch(fn, pts, sigma)
    return (out[:k] - out[k:]).T / (2.0 * c)


def subspace_iteration(
    denoiser,
    x_t: np.ndarray,
    sigma: float,
    config: SpectralConfig,
    rng: RngStream | None = None,
) -> SpectralResult:
    """Estimate the top eigenpairs of sigma^2 * dD/dx at x_t.

    Starting from random N(0, sigma^2 I) directions, each iteration applies
    the finite-difference Jacobian product to every column and
    re-orthonormalizes.  Eigenvalues are then re-evaluated on the final
    orthonormal columns: magnitude sigma^2 * ||J v_k|| per the product norm,
    sign from the Rayleigh quotient v_k^T J v_k (analytic posteriors are
    PSD, learned models occasionally are not; negatives are clamped in
    `eigenvalues` and kept in `raw_eigenvalues`).

    Denoiser evaluations total 2 * k * (iterations performed + 1).

    Parameters
    ----------
    rng : RngStream, optional
        Stream for the starting directions.  Defaults to a stream derived
        from config.seed; callers that need per-work-item determinism pass
        their own.
    """
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 1:
        raise DimMismatchError(f"x_t must be 1-d, got shape {x_t.shape}")
    if sigma <= 0.0:
        raise BadRangeError(f"sigma must be positive, got {sigma}")
    if config.top_k < 1:
        raise BadRangeError(f"top_k must be >= 1, got {config.top_k}")
    if config.n_iters < 1:
        raise BadRangeError(f"n_iters must be >= 1, got {config.n_iters}")
    d = x_t.shape[0]
    k = min(config.top_k, d)  # more directions than dims cannot stay orthonormal
    fn = _as_denoise_fn(denoiser)
    c = config.fd_rel * sigma
    _check_fd_step(c, sigma)
    if rng is None:
        rng = RngStream(config.seed)

    cols = np.stack(
        [gaussian_vec(rng.child(j), d, sigma) for j in range(k)], axis=1
    )
    s2 = sigma * sigma
    prev: np.ndarray | None = None
    history: list[float] = []
    n_evals = 0
    performed = 0
    for _ in range(config.n_iters):
        products = _jvp_block(fn, x_t, sigma, cols, c)
        n_evals += 2 * k
        performed += 1
        norms_in = np.linalg.norm(cols, axis=0)
        lam = s2 * np.linalg.norm(products, axis=0) / norms_in
        top = max(float(np.max(lam)), 1e-300)
        resid = (
            np.linalg.norm(s2 * products / norms_in - lam * cols / norms_in, axis=0)
            / top
        )
        history.append(float(np.max(resid)))
        cols, _ = qr_orthonormalize(products)
        est = np.sort(lam)[::-1]
        if (
            prev is not None
            and config.early_stop_tol > 0.0
            and np.all(
                np.abs(est - prev) <= config.early_stop_tol * np.maximum(prev, 1e-12 * top)
            )
        ):
            prev = est
            break
        prev = est

    # Final eigenvalue pass on the converged orthonormal directions.
    products = _jvp_block(fn, x_t, sigma, cols, c)
    n_evals += 2 * k
    lam_mag = s2 * np.linalg.norm(products, axis=0)
    sign = np.where(np.einsum("ij,ij->j", cols, products) < 0.0, -1.0, 1.0)
    raw = sign * lam_mag
    top = max(float(np.max(lam_mag)), 1e-300)
    final_resid = float(
        np.max(np.linalg.norm(s2 * products - raw * cols, axis=0)) / top
    )
    history.append(final_resid)
    order = np.argsort(raw)[::-1]
    raw = raw[order]
    return SpectralResult(
        eigenvalues=np.clip(raw, 0.0, None),
        raw_eigenvalues=raw,
        eigenvectors=cols[:, order],
        sigma=float(sigma),
        residual=final_resid,
        residual_history=history,
        n_iters=performed,
        n_evals=n_evals,
    )


def subspace_iteration_batch(
    denoiser,
    x_ts: np.ndarray,
    sigma: float,
    config: SpectralConfig,
    rngs: list,
) -> list:
    """Run independent subspace iterations with shared denoiser calls.

    Row r iterates at x_ts[r] with starting directions from rngs[r]; all
    active rows' finite-difference points go into one denoiser evaluation
    per sweep.  Because the denoisers here act on each input row
    independently, every row reproduces exactly what `subspace_iteration`
    would return for it alone; batching only cuts call overhead, which is
    what dominates at small dimension.

    Returns a list aligned with rngs whose entries are SpectralResult, or
    the RankDeficientError a row's orthonormalization raised so the caller
    can retry that row alone.
    """
    x_ts = np.atleast_2d(np.asarray(x_ts, dtype=float))
    n_rows, d = x_ts.shape
    if len(rngs) != n_rows:
        raise DimMismatchError(f"{n_rows} points but {len(rngs)} streams")
    if sigma <= 0.0:
        raise BadRangeError(f"sigma must be positive, got {sigma}")
    if config.top_k < 1 or config.n_iters < 1:
        raise BadRangeError("top_k and n_iters must be >= 1")
    k = min(config.top_k, d)
    fn = _as_denoise_fn(denoiser)
    c = config.fd_rel * sigma
    _check_fd_step(c, sigma)
    s2 = sigma * sigma

    cols = [
        np.stack([gaussian_vec(rng.child(j), d, sigma) for j in range(k)], axis=1)
        for rng in rngs
    ]
    prev = [None] * n_rows
    history: list[list[float]] = [[] for _ in range(n_rows)]
    n_evals = [0] * n_rows
    performed = [0] * n_rows
    outcome: list = [None] * n_rows
    active = list(range(n_rows))

    while active:
        pts = np.concatenate(
            [
                np.concatenate([x_ts[r] + c * cols[r].T, x_ts[r] - c * cols[r].T])
                for r in active
            ]
        )
        out = _eval_batch(fn, pts, sigma)
        still = []
        for slot, r in enumerate(active):
            seg = out[2 * k * slot : 2 * k * (slot + 1)]
            products = (seg[:k] - seg[k:]).T / (2.0 * c)
            n_evals[r] += 2 * k
            performed[r] += 1
            norms_in = np.linalg.norm(cols[r], axis=0)
            lam = s2 * np.linalg.norm(products, axis=0) / norms_in
            top = max(float(np.max(lam)), 1e-300)
            resid = (
                np.linalg.norm(
                    s2 * products / norms_in - lam * cols[r] / norms_in, axis=0
                )
                / top
            )
            history[r].append(float(np.max(resid)))
            try:
                cols[r], _ = qr_orthonormalize(products)
            except RankDeficientError as e:
                outcome[r] = e
                continue
            est = np.sort(lam)[::-1]
            stop = (
                prev[r] is not None
                and config.early_stop_tol > 0.0
                and bool(
                    np.all(
                        np.abs(est - prev[r])
                        <= config.early_stop_tol * np.maximum(prev[r], 1e-12 * top)
                    )
                )
            )
            prev[r] = est
            if not stop and performed[r] < config.n_iters:
                still.append(r)
        active = still

    # one shared final pass over every surviving row
    finals = [r for r in range(n_rows) if outcome[r] is None]
    if finals:
        pts = np.concatenate(
            [
                np.concatenate([x_ts[r] + c * cols[r].T, x_ts[r] - c * cols[r].T])
                for r in finals
            ]
        )
        out = _eval_batch(fn, pts, sigma)
        for slot, r in enumerate(finals):
            seg = out[2 * k * slot : 2 * k * (slot + 1)]
            products = (seg[:k] - seg[k:]).T / (2.0 * c)
            n_evals[r] += 2 * k
            lam_mag = s2 * np.linalg.norm(products, axis=0)
            sign = np.where(np.einsum("ij,ij->j", cols[r], products) < 0.0, -1.0, 1.0)
            raw = sign * lam_mag
            top = max(float(np.max(lam_mag)), 1e-300)
            final_resid = float(
                np.max(np.linalg.norm(s2 * products - raw * cols[r], axis=0)) / top
            )
            history[r].append(final_resid)
            order = np.argsort(raw)[::-1]
            raw = raw[order]
            outcome[r] = SpectralResult(
                eigenvalues=np.clip(raw, 0.0, None),
                raw_eigenvalues=raw,
                eigenvectors=cols[r][:, order],
                sigma=float(sigma),
                residual=final_resid,
                residual_history=history[r],
                n_iters=performed[r],
                n_evals=n_evals[r],
            )
    return outcome


def exact_spectrum(
    denoiser,
    x_t: np.ndarray,
    sigma: float,
    top_k: int | None = None,
    fd_step: float | None = None,
) -> SpectralResult:
    """Dense finite-difference oracle for the same spectrum.

    Builds the full Jacobian column by column with central differences
    (2d evaluations), symmetrizes, and solves the dense symmetric
    eigenproblem.  Guarded to d <= 4096.
    """
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 1:
        raise DimMismatchError(f"x_t must be 1-d, got shape {x_t.shape}")
    if sigma <= 0.0:
        raise BadRangeError(f"sigma must be positive, got {sigma}")
    d = x_t.shape[0]
    if d > MAX_DENSE_DIM:
        raise DimTooLargeError(f"dense oracle limited to d <= {MAX_DENSE_DIM}, got {d}")
    k = d if top_k is None else min(top_k, d)
    if k < 1:
        raise BadRangeError(f"top_k must be >= 1, got {top_k}")
    fn = _as_denoise_fn(denoiser)
    h = fd_step if fd_step is not None else 1e-4 * max(1.0, float(np.max(np.abs(x_t))))
    steps = h * np.eye(d)
    out = _eval_batch(fn, np.concatenate([x_t + steps, x_t - steps], axis=0), sigma)
    jac = (out[:d] - out[d:]).T / (2.0 * h)
    asym = float(np.max(np.abs(jac - jac.T)))
    vals, vecs = sym_eig((sigma * sigma) * jac)
    raw = vals[:k]
    return SpectralResult(
        eigenvalues=np.clip(raw, 0.0, None),
        raw_eigenvalues=raw.copy(),
        eigenvectors=vecs[:, :k],
        sigma=float(sigma),
        residual=0.0,
        residual_history=[],
        n_iters=0,
        n_evals=2 * d,
        asymmetry=asym,
    )


def analytic_spectrum(model, x_t: np.ndarray, sigma: float, top_k: int | None = None) -> SpectralResult:
    """Closed-form spectrum from an analytic model's posterior covariance."""
    post = getattr(model, "posterior_cov", None)
    if post is None:
        raise AnalyticModelRequiredError(
            "model has no posterior_cov; use exact_spectrum for learned denoisers"
        )
    stats = post(np.asarray(x_t, dtype=float), sigma)
    vals, vecs = sym_eig(stats.cov)
    d = vals.shape[0]
    k = d if top_k is None else min(top_k, d)
    raw = vals[:k]
    return SpectralResult(
        eigenvalues=np.clip(raw, 0.0, None),
        raw_eigenvalues=raw.copy(),
        eigenvectors=vecs[:, :k],
        sigma=float(sigma),
        residual=0.0,
        residual_history=[],
        n_iters=0,
        n_evals=0,
    )
