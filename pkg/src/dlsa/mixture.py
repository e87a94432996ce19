"""Latent Gaussian mixture with fixed centers and unit covariance.

The mixture replaces the usual standard-normal flow prior: K equally weighted
unit-covariance components whose centers stay fixed after initialisation.
Cluster ids are 1-based at the public boundary.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Node, Tape
from .errors import ContractError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))


def default_center_scale(dim: int) -> float:
    """Spread that keeps neighbouring components overlapping but separable."""
    return float(np.sqrt(3.0 / (2.0 * dim)))


class GaussianMixtureLatent:
    def __init__(self, centers: np.ndarray):
        centers = np.asarray(centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ContractError(f"centers must be (K, dim) with K >= 1, got {centers.shape}")
        self.centers = centers
        self.n_components, self.dim = centers.shape

    # ----- plain array paths ----------------------------------------------

    def _sqdist(self, z: np.ndarray) -> np.ndarray:
        z = self._check(z)
        diff = z[:, None, :] - self.centers[None, :, :]
        return np.einsum("nkd,nkd->nk", diff, diff)

    def component_logpdf(self, z: np.ndarray) -> np.ndarray:
        """(N, K) log density of each unit-covariance component."""
        return -0.5 * self._sqdist(z) - 0.5 * self.dim * LOG_2PI

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        """Per-sample log density under the equally weighted mixture."""
        comp = self.component_logpdf(z) - np.log(self.n_components)
        m = comp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(comp - m).sum(axis=1, keepdims=True)))[:, 0]

    def posterior(self, z: np.ndarray) -> np.ndarray:
        """(N, K) component responsibilities; rows sum to 1."""
        comp = -0.5 * self._sqdist(z)
        comp -= comp.max(axis=1, keepdims=True)
        e = np.exp(comp)
        return e / e.sum(axis=1, keepdims=True)

    def predict_cluster(self, z: np.ndarray) -> np.ndarray:
        """Most responsible component per sample, 1-based; ties pick the lowest id."""
        return np.argmax(self.posterior(z), axis=1) + 1

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw n latent points; returns (z, 1-based component ids)."""
        ks = rng.integers(0, self.n_components, size=n)
        z = self.centers[ks] + rng.normal(size=(n, self.dim))
        return z, ks + 1

    def _check(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ContractError(f"expected (N, {self.dim}) latent codes, got {z.shape}")
        if not np.isfinite(z).all():
            raise NumericError("latent codes contain non-finite values")
        return z

    # ----- tape paths -------------------------------------------------------

    def _sqdist_tape(self, t: Tape, z: Node) -> Node:
        # ||z - mu||^2 = ||z||^2 - 2 z.mu + ||mu||^2, built from affine/mul/add
        cross = t.affine(z, t.const(self.centers))
        z_sq = t.sum(t.mul(z, z), axis=1, keepdims=True)
        c_sq = (self.centers**2).sum(axis=1)
        return t.add(t.add(z_sq, t.mul(cross, -2.0)), t.const(c_sq[None, :]))

    def logpdf_tape(self, t: Tape, z: Node) -> Node:
        comp = t.add(t.mul(self._sqdist_tape(t, z), -0.5),
                     t.const(-0.5 * self.dim * LOG_2PI - np.log(self.n_components)))
        return t.logsumexp(comp, axis=1)

    def posterior_tape(self, t: Tape, z: Node) -> Node:
        return t.softmax(t.mul(self._sqdist_tape(t, z), -0.5), axis=1)


def init_mixture(n_components: int, dim: int, sigma: float | None = None,
                 seed: int = 0) -> GaussianMixtureLatent:
    """Centers drawn from N(0, sigma^2 I); sigma defaults to sqrt(3 / (2 dim))."""
    if n_components < 1:
        raise ContractError(f"need at least one component, got {n_components}")
    if sigma is None:
        sigma = default_center_scale(dim)
    if sigma < 0:
        raise ContractError(f"center scale must be non-negative, got {sigma}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return GaussianMixtureLatent(rng.normal(size=(n_components, dim)) * sigma)


def flow_loglik(flow, mixture: GaussianMixtureLatent, x: np.ndarray) -> np.ndarray:
    """Per-sample log density of features under flow + mixture latent."""
    z, logdet = flow.inverse_with_logdet(x)
    return mixture.logpdf(z) + logdet


def flow_posterior(flow, mixture: GaussianMixtureLatent, x: np.ndarray) -> np.ndarray:
    """Component responsibilities of features after mapping to latent space."""
    z, _ = flow.inverse_with_logdet(x)
    return mixture.posterior(z)
