"""Analytic Gaussian mixtures under additive Gaussian noise.

For a mixture p and noise level sigma, every quantity the rest of the
package estimates numerically has a closed form here: the marginal density
of x_t = x + sigma z, its score, the minimum-MSE denoiser E[x | x_t], and
the posterior covariance Cov[x | x_t].  These exact values are the oracles
for the spectral estimator and the verification suite.

Each component's covariance is eigendecomposed once at construction; all
per-sigma quantities are assembled from those factors, so adding sigma^2 I
never needs a fresh factorization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import (
    BadRangeError,
    DimMismatchError,
    NonFiniteError,
    NotPSDError,
    NotSingleGaussianError,
    SingularCovarianceError,
)
from .linalg import sym_eig
from .rng import RngStream

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PosteriorStats:
    """Exact posterior mean and covariance of x given x_t."""

    mean: np.ndarray
    cov: np.ndarray


class GaussianMixture:
    """A finite mixture of Gaussians with exact noisy-marginal quantities.

    Parameters
    ----------
    weights : array_like, shape (m,)
        Positive and summing to 1 (a small tolerance is renormalized away).
    means : array_like, shape (m, d)
    covariances : array_like, shape (m, d, d)
        Symmetric positive semi-definite.
    """

    def __init__(self, weights, means, covariances):
        w = np.asarray(weights, dtype=float)
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        cov = np.asarray(covariances, dtype=float)
        if cov.ndim == 2:
            cov = cov[None, :, :]
        if w.ndim != 1:
            raise DimMismatchError("weights must be 1-d")
        m = w.shape[0]
        if mu.shape[0] != m or cov.shape[0] != m:
            raise DimMismatchError(
                f"component counts disagree: {m} weights, {mu.shape[0]} means, "
                f"{cov.shape[0]} covariances"
            )
        d = mu.shape[1]
        if cov.shape[1:] != (d, d):
            raise DimMismatchError(
                f"covariance shape {cov.shape[1:]} does not match dim {d}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise NonFiniteError("mixture parameters contain non-finite entries")
        if np.any(w <= 0.0):
            raise BadRangeError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-6:
            raise BadRangeError(f"weights must sum to 1, got {w.sum()!r}")

        self.weights = w / w.sum()
        self.means = mu
        self.covariances = cov
        self.n_components = m
        self.dim = d

        # Eigenfactors of each component covariance; sym_eig also enforces
        # symmetry.  Eigenvalues below a small negative floor are rejected,
        # tiny negatives are clamped to zero.
        evals = np.empty((m, d))
        evecs = np.empty((m, d, d))
        for i in range(m):
            asym = np.max(np.abs(cov[i] - cov[i].T))
            if asym > 1e-8:
                raise NotPSDError(f"covariance {i} asymmetric by {asym:.3e}")
            vals, vecs = sym_eig(cov[i])
            if np.min(vals) < -1e-10:
                raise NotPSDError(
                    f"covariance {i} has eigenvalue {np.min(vals):.3e} < 0"
                )
            evals[i] = np.clip(vals, 0.0, None)
            evecs[i] = vecs
        self._evals = evals
        self._evecs = evecs
        self._sigma_cache: dict[float, tuple] = {}

    @classmethod
    def single(cls, mean, cov) -> "GaussianMixture":
        return cls([1.0], [np.asarray(mean, dtype=float)], [np.asarray(cov, dtype=float)])

    def mean(self) -> np.ndarray:
        """Mixture mean."""
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Mixture covariance (within- plus between-component parts)."""
        mbar = self.mean()
        total = -np.outer(mbar, mbar)
        for i in range(self.n_components):
            total += self.weights[i] * (
                self.covariances[i] + np.outer(self.means[i], self.means[i])
            )
        return total

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    # -- per-sigma factors ------------------------------------------------

    def _factors(self, sigma: float):
        """(inv, gain, postcov, lognorm) for each component at this sigma.

        inv     = (C_i + sigma^2 I)^-1
        gain    = C_i (C_i + sigma^2 I)^-1          (posterior-mean gain)
        postcov = sigma^2 C_i (C_i + sigma^2 I)^-1  (per-component posterior cov)
        lognorm = log w_i - (d/2) log 2pi - (1/2) log det(C_i + sigma^2 I)
        """
        if sigma <= 0.0:
            raise BadRangeError(f"sigma must be positive, got {sigma}")
        key = float(sigma)
        hit = self._sigma_cache.get(key)
        if hit is not None:
            return hit
        s2 = key * key
        lifted = self._evals + s2  # (m, d), strictly positive
        inv = np.einsum("mij,mj,mkj->mik", self._evecs, 1.0 / lifted, self._evecs)
        gain = np.einsum("mij,mj,mkj->mik", self._evecs, self._evals / lifted, self._evecs)
        postcov = s2 * gain
        lognorm = (
            np.log(self.weights)
            - 0.5 * self.dim * _LOG_2PI
            - 0.5 * np.sum(np.log(lifted), axis=1)
        )
        out = (inv, gain, postcov, lognorm)
        self._sigma_cache[key] = out
        return out

    def _log_components(self, x2: np.ndarray, sigma: float) -> np.ndarray:
        """log of w_i * N(x; mu_i, C_i + sigma^2 I), shape (m, B)."""
        inv, _, _, lognorm = self._factors(sigma)
        dx = x2[None, :, :] - self.means[:, None, :]  # (m, B, d)
        quad = np.einsum("mbi,mij,mbj->mb", dx, inv, dx)
        return lognorm[:, None] - 0.5 * quad

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        a = np.asarray(x, dtype=float)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.ndim != 2 or a.shape[1] != self.dim:
            raise DimMismatchError(f"expected points of dim {self.dim}, got shape {np.shape(x)}")
        return a, single

    # -- public operations ------------------------------------------------

    def noisy_logpdf(self, x, sigma: float):
        """log density of x_t = x + sigma z at the given point(s)."""
        x2, single = self._as_batch(x)
        out = logsumexp(self._log_components(x2, sigma), axis=0)
        return float(out[0]) if single else out

    def responsibilities(self, x, sigma: float):
        """Posterior component probabilities given x_t, shape (..., m)."""
        x2, single = self._as_batch(x)
        logc = self._log_components(x2, sigma)
        r = np.exp(logc - logsumexp(logc, axis=0, keepdims=True)).T
        return r[0] if single else r

    def score(self, x, sigma: float):
        """Gradient of the noisy log density at x_t."""
        x2, single = self._as_batch(x)
        inv, _, _, _ = self._factors(sigma)
        logc = self._log_components(x2, sigma)
        r = np.exp(logc - logsumexp(logc, axis=0, keepdims=True))  # (m, B)
        pull = np.einsum("mij,mbj->mbi", inv, self.means[:, None, :] - x2[None, :, :])
        out = np.einsum("mb,mbi->bi", r, pull)
        return out[0] if single else out

    def denoise(self, x, sigma: float):
        """Minimum-MSE denoiser E[x | x_t] = x_t + sigma^2 * score(x_t).

        This is the same code path used to verify the posterior-mean/score
        identity, so the two agree exactly by construction.
        """
        x2, single = self._as_batch(x)
        out = x2 + (sigma * sigma) * self.score(x2, sigma)
        return out[0] if single else out

    def posterior_cov(self, x, sigma: float) -> PosteriorStats:
        """Exact posterior mean and covariance of x given x_t = x.

        Cov[x | x_t] mixes the per-component posterior covariances with the
        spread of the per-component posterior means:
        sum_i r_i (C^post_i + m_i m_i^T) - m m^T.
        """
        x2, single = self._as_batch(x)
        if not single:
            raise DimMismatchError("posterior_cov takes a single point")
        xt = x2[0]
        inv, gain, postcov, _ = self._factors(sigma)
        r = self.responsibilities(xt, sigma)
        pmeans = self.means + np.einsum("mij,mj->mi", gain, xt - self.means)
        mbar = r @ pmeans
        cov = -np.outer(mbar, mbar)
        for i in range(self.n_components):
            cov += r[i] * (postcov[i] + np.outer(pmeans[i], pmeans[i]))
        cov = 0.5 * (cov + cov.T)
        return PosteriorStats(mean=mbar, cov=cov)

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        """Draw n exact samples; deterministic in (seed, stream)."""
        if n < 1:
            raise BadRangeError(f"n must be >= 1, got {n}")
        gen = rng.generator()
        comps = gen.choice(self.n_components, size=n, p=self.weights)
        normals = gen.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for i in range(self.n_components):
            rows = comps == i
            if not np.any(rows):
                continue
            # Symmetric square root from the cached eigenfactors; components
            # with zero covariance just return their mean.
            root = self._evecs[i] * np.sqrt(self._evals[i])
            out[rows] = self.means[i] + normals[rows] @ root.T
        return out


def kl_gaussians(p: GaussianMixture, q: GaussianMixture) -> float:
    """KL divergence between two single-component Gaussians.

    KL(p || q) = 1/2 [ tr(Sq^-1 Sp) + (mq-mp)^T Sq^-1 (mq-mp) - d
                       + log det Sq - log det Sp ]
    """
    for g, name in ((p, "p"), (q, "q")):
        if g.n_components != 1:
            raise NotSingleGaussianError(f"{name} has {g.n_components} components")
    if p.dim != q.dim:
        raise DimMismatchError(f"dims disagree: {p.dim} vs {q.dim}")
    sp_vals = p._evals[0]
    sq_vals = q._evals[0]
    if np.min(sp_vals) <= 0.0 or np.min(sq_vals) <= 0.0:
        raise SingularCovarianceError("KL needs non-singular covariances")
    sq_inv = np.einsum("ij,j,kj->ik", q._evecs[0], 1.0 / sq_vals, q._evecs[0])
    delta = q.means[0] - p.means[0]
    return 0.5 * float(
        np.trace(sq_inv @ p.covariances[0])
        + delta @ sq_inv @ delta
        - p.dim
        + np.sum(np.log(sq_vals))
        - np.sum(np.log(sp_vals))
    )
