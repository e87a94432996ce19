"""Optimization: flow-filter training, threshold calibration, classifier fits.

Everything is plain SGD with heavy-ball momentum in float64. Runs are
reproducible bit for bit: all randomness (init, shuffling, pair sampling)
derives from the config seed through named SeedSequence spawns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Parameter, Tape
from .classifiers import (ClusterAidedClassifier, ResidualClassifier,
                          cross_entropy, init_cluster_classifier,
                          init_residual_classifier)
from .data import FeatureDataset
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .flow import FlowStack, build_flow
from .losses import PosteriorMomentum, class_weights, flow_filter_loss
from .mixture import GaussianMixtureLatent, flow_loglik, init_mixture


@dataclass
class TrainConfig:
    lr: float = 0.2
    momentum: float = 0.9
    batch_size: int = 1024
    epochs: int = 50
    seed: int = 0
    lam_bal: float = 1.0
    lam_pure: float = 0.02
    q: float = 2.0            # 0 disables count-based sample weighting
    eta: float = 0.7
    n_clusters: int = 500
    filter_frac: float = 0.3
    flow_blocks: int = 2
    hidden: int = 64
    center_scale: float | None = None   # None: sqrt(3 / (2 dim))
    classifier_lr: float = 0.1
    classifier_epochs: int = 30
    classifier_batch: int = 256
    classifier_decay: float = 0.0
    latent_decay: float = 0.0
    prior_smoothing: float = 0.0
    residual_on_full: bool = False
    stage_heads_on_full: bool = False
    aided_offset_gain: float = 1.0

    def validate(self):
        checks = [
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (0 <= self.momentum < 1, f"momentum must lie in [0,1), got {self.momentum}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.lam_bal >= 0 and self.lam_pure >= 0, "loss weights must be non-negative"),
            (self.q >= 0, f"weight exponent must be >= 0, got {self.q}"),
            (0 < self.eta < 1, f"decay must lie in (0,1), got {self.eta}"),
            (self.n_clusters >= 1, f"n_clusters must be >= 1, got {self.n_clusters}"),
            (0 < self.filter_frac < 1, f"filter_frac must lie in (0,1), got {self.filter_frac}"),
            (self.flow_blocks >= 1, f"flow_blocks must be >= 1, got {self.flow_blocks}"),
            (self.hidden >= 1, f"hidden must be >= 1, got {self.hidden}"),
            (self.center_scale is None or self.center_scale >= 0, "center_scale must be >= 0"),
            (self.classifier_lr > 0 and self.classifier_epochs >= 0
             and self.classifier_batch >= 1, "classifier training settings out of range"),
            (self.classifier_decay >= 0,
             f"classifier_decay must be >= 0, got {self.classifier_decay}"),
            (self.latent_decay >= 0,
             f"latent_decay must be >= 0, got {self.latent_decay}"),
            (self.prior_smoothing >= 0,
             f"prior_smoothing must be >= 0, got {self.prior_smoothing}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedFilter:
    flow: FlowStack
    mixture: GaussianMixtureLatent
    alpha: float
    trace: list = field(default_factory=list)
    filtered_mask: np.ndarray | None = None     # over the training subset
    assignments: np.ndarray | None = None       # 1-based clusters of filtered samples


class Sgd:
    """Momentum SGD with optional L2 decay, scalar or one value per parameter."""

    def __init__(self, params: list[Parameter], lr: float, momentum: float,
                 decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        if np.isscalar(decay):
            decay = [float(decay)] * len(params)
        if len(decay) != len(params):
            raise ConfigError(f"got {len(decay)} decay values for {len(params)} parameters")
        self.decay = list(decay)
        self.velocity = [np.zeros_like(p.values) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, v, d in zip(self.params, self.velocity, self.decay):
            v *= self.momentum
            if d:
                v += p.grad + d * p.values
            else:
                v += p.grad
            p.values -= self.lr * v


def _spawn_seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def weights_for(counts: np.ndarray, q: float) -> np.ndarray:
    """Per-class MLE weights over all C classes; absent classes get weight 0.

    q=0 means uniform over the classes actually present.
    """
    counts = np.asarray(counts)
    present = counts > 0
    w = np.zeros(counts.size, dtype=np.float64)
    if q == 0:
        w[present] = 1.0 / present.sum()
    else:
        w[present] = class_weights(counts[present], q)
    return w


def quantile_threshold(logliks: np.ndarray, rho: float) -> float:
    """Lower-interpolation (1-rho) quantile: index floor((1-rho) N), 0-based.

    Samples with log-likelihood >= the returned threshold form the filtered
    set of size ceil(rho N) when values are distinct.
    """
    if not 0 < rho < 1:
        raise ContractError(f"filter fraction must lie in (0,1), got {rho}")
    logliks = np.asarray(logliks)
    if logliks.size == 0:
        raise ContractError("cannot calibrate a threshold on an empty set")
    # the epsilon keeps N*(1-rho) from landing one ulp under an integer
    idx = int(np.floor(logliks.size * (1.0 - rho) + 1e-9))
    return float(np.sort(logliks)[min(idx, logliks.size - 1)])


def calibrate_threshold(flow: FlowStack, mixture: GaussianMixtureLatent,
                        x: np.ndarray, rho: float) -> float:
    return quantile_threshold(flow_loglik(flow, mixture, x), rho)


def train_flow_filter(data: FeatureDataset, cfg: TrainConfig) -> TrainedFilter:
    """SGD on the three-term objective, then threshold calibration."""
    cfg.validate()
    if data.n == 0:
        raise ContractError("training set is empty")
    if (data.counts > 0).sum() < 2:
        raise ContractError("flow filter training needs at least 2 classes present")

    flow_seed, mix_seed, shuffle_seed, pair_seed = _spawn_seeds(cfg.seed, 4)
    flow = build_flow(data.dim, cfg.flow_blocks, cfg.hidden, seed=flow_seed)
    mixture = init_mixture(cfg.n_clusters, data.dim, sigma=cfg.center_scale, seed=mix_seed)
    weights = weights_for(data.counts, cfg.q)
    momentum_est = PosteriorMomentum(cfg.n_clusters, eta=cfg.eta)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(shuffle_seed))
    pair_rng = np.random.default_rng(np.random.SeedSequence(pair_seed))
    sgd = Sgd(flow.parameters(), cfg.lr, cfg.momentum)

    x64, labels = data.x64(), data.labels
    trace = []
    last_finite_epoch = -1
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(data.n)
        sums = {"mle": 0.0, "bal": 0.0, "pure": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, data.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            t = Tape()
            try:
                total, parts = flow_filter_loss(
                    t, flow, mixture, x64[idx], labels[idx], weights,
                    momentum_est, pair_rng, cfg.lam_bal, cfg.lam_pure)
            except NumericError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch} ({exc}); "
                    f"last finite epoch: {last_finite_epoch}") from exc
            if not np.isfinite(parts["total"]):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch}; "
                    f"last finite epoch: {last_finite_epoch}")
            sgd.zero_grad()
            t.backward(total)
            sgd.step()
            for k in sums:
                sums[k] += parts[k]
            steps += 1
        last_finite_epoch = epoch
        trace.append({"epoch": epoch, **{k: v / steps for k, v in sums.items()}})

    alpha = calibrate_threshold(flow, mixture, x64, cfg.filter_frac)
    ll = flow_loglik(flow, mixture, x64)
    mask = ll >= alpha
    z, _ = flow.inverse_with_logdet(x64[mask])
    return TrainedFilter(flow=flow, mixture=mixture, alpha=alpha, trace=trace,
                         filtered_mask=mask, assignments=mixture.predict_cluster(z))


def _train_softmax_head(params, build_logits, labels, n_classes, cfg: TrainConfig,
                        seed: int, training_flag: bool = True, decay=None) -> list:
    n = len(labels)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if decay is None:
        decay = cfg.classifier_decay
    sgd = Sgd(params, cfg.classifier_lr, cfg.momentum, decay=decay)
    trace = []
    for epoch in range(cfg.classifier_epochs):
        order = rng.permutation(n)
        total, steps = 0.0, 0
        for start in range(0, n, cfg.classifier_batch):
            idx = order[start:start + cfg.classifier_batch]
            t = Tape()
            loss = cross_entropy(t, build_logits(t, idx, training_flag), labels[idx], n_classes)
            if not np.isfinite(loss.value):
                raise TrainingError(f"classifier loss non-finite at epoch {epoch}")
            sgd.zero_grad()
            t.backward(loss)
            sgd.step()
            total += float(loss.value)
            steps += 1
        trace.append(total / steps)
    return trace


def train_cluster_classifier(x: np.ndarray, z: np.ndarray, prior_rows: np.ndarray,
                             labels: np.ndarray, n_classes: int, cfg: TrainConfig,
                             seed: int,
                             train_offset: np.ndarray | None = None,
                             ) -> tuple[ClusterAidedClassifier, list]:
    if len(labels) == 0:
        raise ConfigError("filtered set is empty; decrease filter_frac or train longer")
    clf = init_cluster_classifier(x.shape[1], z.shape[1], n_classes)
    clf.train_offset = train_offset

    def build(t, idx, training):
        return clf.logits_tape(t, x[idx], z[idx], prior_rows[idx], training=training)

    # extra shrinkage on the latent block only: see the head's docstring
    d = cfg.classifier_decay
    decay = [d, d + cfg.latent_decay, d, d, d]
    trace = _train_softmax_head(clf.parameters(), build, np.asarray(labels),
                                n_classes, cfg, seed, decay=decay)
    return clf, trace


def train_residual_classifier(x: np.ndarray, labels: np.ndarray, n_classes: int,
                              kind: str, cfg: TrainConfig,
                              seed: int) -> tuple[ResidualClassifier, list]:
    if len(labels) == 0:
        raise ConfigError("residual training set is empty; decrease filter_frac or stages")
    counts = np.bincount(np.asarray(labels), minlength=n_classes + 1)[1:]
    clf = init_residual_classifier(x.shape[1], n_classes, kind, counts=counts, seed=seed)

    def build(t, idx, training):
        return clf.logits_tape(t, x[idx], training=training)

    trace = _train_softmax_head(clf.parameters(), build, np.asarray(labels),
                                n_classes, cfg, seed)
    return clf, trace
