"""Training objectives for one flow filter.

Three terms: a class-weighted negative log-likelihood that pushes tail
samples toward high density, a balancedness penalty (negative entropy of the
estimated cluster marginal), and a purity penalty on cross-class sample
pairs. The cluster marginal is estimated with a bias-corrected momentum
average over batches; gradients flow only through the current batch, the
history is frozen.
"""

from __future__ import annotations

import numpy as np

from .autodiff import LOG_EPS, Node, Tape
from .errors import ContractError
from .mixture import GaussianMixtureLatent


def class_weights(counts, q: float = 2.0) -> np.ndarray:
    """Per-class weights n_i^-q, normalised to sum 1. Smaller classes weigh more."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 1).any():
        raise ContractError("every class needs at least one training sample")
    if q <= 0:
        raise ContractError(f"weight exponent must be positive, got {q}")
    w = counts**-q
    return w / w.sum()


def momentum_variance_ratio(eta: float, t: int) -> float:
    """Variance of the bias-corrected momentum mean relative to a raw batch mean."""
    phi = lambda s: (1.0 - eta**s) / (1.0 + eta**s)
    return phi(1) / phi(t)


class PosteriorMomentum:
    """Decayed running mean of batch cluster marginals, with bias correction.

    update() advances the state and returns the corrected estimate; the tape
    variant additionally wires the gradient of the current batch term through.
    """

    def __init__(self, n_components: int, eta: float = 0.7):
        if not 0.0 < eta < 1.0:
            raise ContractError(f"decay must lie in (0,1), got {eta}")
        self.eta = eta
        self.p_tilde = np.zeros(n_components)
        self.t = 0

    def _validate(self, batch_mean: np.ndarray):
        if batch_mean.shape != self.p_tilde.shape:
            raise ContractError(
                f"expected {self.p_tilde.shape[0]} cluster probabilities, got shape {batch_mean.shape}")
        if (batch_mean < -1e-9).any() or abs(batch_mean.sum() - 1.0) > 1e-6:
            raise ContractError("batch posterior mean is not a probability vector")

    def update(self, batch_mean) -> np.ndarray:
        batch_mean = np.asarray(batch_mean, dtype=np.float64)
        self._validate(batch_mean)
        self.t += 1
        self.p_tilde = self.eta * self.p_tilde + (1.0 - self.eta) * batch_mean
        return self.p_tilde / (1.0 - self.eta**self.t)

    def update_tape(self, t: Tape, batch_mean: Node) -> Node:
        """Corrected estimate as a tape node; history enters as a constant."""
        self._validate(batch_mean.value)
        step = self.t + 1
        denom = 1.0 - self.eta**step
        gain = (1.0 - self.eta) / denom
        offset = self.eta * self.p_tilde / denom
        corrected = t.add(t.mul(batch_mean, gain), t.const(offset))
        self.t = step
        self.p_tilde = self.eta * self.p_tilde + (1.0 - self.eta) * batch_mean.value
        return corrected


def balance_loss(p: np.ndarray) -> float:
    """Negative entropy of a cluster marginal; -log K at uniform, 0 at one-hot."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.sum(p * np.log(np.maximum(p, LOG_EPS))))


def sample_purity_pairs(labels: np.ndarray, rng: np.random.Generator,
                        count: int) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j) with different labels, classes drawn uniformly.

    Every class present in the batch is equally likely to contribute a pair
    member regardless of its size. Returns empty arrays when the batch holds
    fewer than two classes.
    """
    labels = np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2 or count < 1:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    order = np.argsort(labels, kind="stable")
    sizes = np.array([(labels == c).sum() for c in present])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    first = rng.integers(0, present.size, size=count)
    second = (first + rng.integers(1, present.size, size=count)) % present.size
    pick_i = np.floor(rng.random(count) * sizes[first]).astype(np.intp)
    pick_j = np.floor(rng.random(count) * sizes[second]).astype(np.intp)
    return order[starts[first] + pick_i], order[starts[second] + pick_j]


def purity_loss_value(post_i: np.ndarray, post_j: np.ndarray) -> float:
    """Mean over pairs of sum_k p_i(k) log p_j(k); lower = better separated."""
    if len(post_i) != len(post_j):
        raise ContractError("paired posterior lists must have equal length")
    if len(post_i) == 0:
        return 0.0
    return float(np.mean(np.sum(post_i * np.log(np.maximum(post_j, LOG_EPS)), axis=1)))


def flow_filter_loss(t: Tape, flow, mixture: GaussianMixtureLatent,
                     x: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                     momentum: PosteriorMomentum, pair_rng: np.random.Generator,
                     lam_bal: float = 1.0, lam_pure: float = 0.02,
                     n_pairs: int | None = None) -> tuple[Node, dict]:
    """Build the combined objective on a tape; returns (scalar node, term values).

    labels are 1-based; weights is the per-class vector from class_weights.
    Zero lambdas keep the term out of the total exactly but the momentum state
    and pair sampling still advance, so ablation runs stay step-for-step
    comparable.
    """
    if lam_bal < 0 or lam_pure < 0:
        raise ContractError("loss weights must be non-negative")
    labels = np.asarray(labels)
    if labels.min() < 1 or labels.max() > len(weights):
        raise ContractError(f"labels must lie in 1..{len(weights)}")

    z, logdet = flow.inverse_with_logdet_tape(t, x)
    loglik = t.add(mixture.logpdf_tape(t, z), logdet)
    per_sample_w = np.asarray(weights, dtype=np.float64)[labels - 1]
    mle = t.mul(t.sum(t.mul(loglik, t.const(per_sample_w))), -1.0)

    posterior = mixture.posterior_tape(t, z)
    corrected = momentum.update_tape(t, t.mean(posterior, axis=0))
    bal = t.sum(t.mul(corrected, t.log(corrected)))

    if n_pairs is None:
        n_pairs = len(x)
    ii, jj = sample_purity_pairs(labels, pair_rng, n_pairs)
    if ii.size:
        p_i = t.gather_rows(posterior, ii)
        p_j = t.gather_rows(posterior, jj)
        pure = t.mean(t.sum(t.mul(p_i, t.log(p_j)), axis=1))
    else:
        pure = t.const(0.0)

    total = t.add(mle, t.add(t.mul(bal, lam_bal), t.mul(pure, lam_pure)))
    parts = {"mle": float(mle.value), "bal": float(bal.value),
             "pure": float(pure.value), "total": float(total.value)}
    return total, parts
