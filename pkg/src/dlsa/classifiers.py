"""Classifier heads used by the cascade.

The cluster-aided head scores a sample from its feature/latent pair plus the
label histogram of its predicted cluster. The residual head (for samples no
filter accepted) comes in three flavours: plain linear softmax, a variant
whose training logits are offset by log class counts, and a cosine classifier
with normalised weights and features.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Parameter, Tape
from .errors import ContractError

COSINE_SCALE = 16.0
RESIDUAL_KINDS = ("linear", "balsoftmax", "cosine")


def cross_entropy(t: Tape, logits: Node, labels: np.ndarray, n_classes: int) -> Node:
    """Mean softmax cross-entropy; labels are 1-based."""
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), np.asarray(labels) - 1] = 1.0
    picked = t.sum(t.mul(logits, t.const(onehot)), axis=1)
    return t.mean(t.add(t.logsumexp(logits, axis=1), t.mul(picked, -1.0)))


@dataclass
class ClusterAidedClassifier:
    """Softmax over the sum of feature, latent, and cluster-prior heads.

    The three blocks are kept as separate parameters so the optimizer can
    regularize them independently: the latent block doubles as a nonlinear
    lift of the input and overfits first when samples are scarce.

    train_offset, when set, is added to the logits during training only
    (count-based correction, same convention as the balsoftmax residual
    head); it is never serialized and inference ignores it.
    """

    w_x: Parameter
    w_z: Parameter
    b_feat: Parameter
    w_prior: Parameter
    b_prior: Parameter
    train_offset: np.ndarray | None = None

    def parameters(self) -> list[Parameter]:
        return [self.w_x, self.w_z, self.b_feat, self.w_prior, self.b_prior]

    @property
    def n_classes(self) -> int:
        return self.w_x.values.shape[0]

    def logits(self, x: np.ndarray, z: np.ndarray, prior_rows: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.w_x.values.shape[1]:
            raise ContractError(
                f"feature width {x.shape[1]} does not match head width "
                f"{self.w_x.values.shape[1]}")
        if z.shape[1] != self.w_z.values.shape[1]:
            raise ContractError(
                f"latent width {z.shape[1]} does not match head width "
                f"{self.w_z.values.shape[1]}")
        if prior_rows.shape[1] != self.n_classes:
            raise ContractError(
                f"prior rows have {prior_rows.shape[1]} classes, head expects {self.n_classes}")
        return (x @ self.w_x.values.T + z @ self.w_z.values.T + self.b_feat.values
                + prior_rows @ self.w_prior.values.T + self.b_prior.values)

    def logits_tape(self, t: Tape, x, z, prior_rows, training: bool = False) -> Node:
        out = t.add(t.affine(t.const(x), self.w_x, self.b_feat),
                    t.affine(t.const(z), self.w_z))
        out = t.add(out, t.affine(t.const(prior_rows), self.w_prior, self.b_prior))
        if training and self.train_offset is not None:
            out = t.add(out, t.const(self.train_offset[None, :]))
        return out

    def predict_proba(self, x, z, prior_rows) -> np.ndarray:
        lg = self.logits(x, z, prior_rows)
        lg -= lg.max(axis=1, keepdims=True)
        e = np.exp(lg)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x, z, prior_rows) -> np.ndarray:
        return np.argmax(self.predict_proba(x, z, prior_rows), axis=1) + 1


def init_cluster_classifier(dim: int, latent_dim: int, n_classes: int) -> ClusterAidedClassifier:
    # zero init: the untrained head outputs the uniform distribution
    return ClusterAidedClassifier(
        w_x=Parameter(np.zeros((n_classes, dim)), name="aided.w_x"),
        w_z=Parameter(np.zeros((n_classes, latent_dim)), name="aided.w_z"),
        b_feat=Parameter(np.zeros(n_classes), name="aided.b_feat"),
        w_prior=Parameter(np.zeros((n_classes, n_classes)), name="aided.w_prior"),
        b_prior=Parameter(np.zeros(n_classes), name="aided.b_prior"),
    )


@dataclass
class ResidualClassifier:
    kind: str
    w: Parameter
    b: Parameter
    train_offset: np.ndarray | None = None  # log class counts, balsoftmax only
    scale: float = COSINE_SCALE

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b] if self.kind != "cosine" else [self.w]

    @property
    def n_classes(self) -> int:
        return self.w.values.shape[0]

    def _normalized(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = self.w.values
        w_hat = w / np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-12)
        x_hat = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        return x_hat, w_hat

    def logits(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.shape[1] != self.w.values.shape[1]:
            raise ContractError(
                f"feature width {x.shape[1]} does not match classifier width "
                f"{self.w.values.shape[1]}")
        if self.kind == "cosine":
            x_hat, w_hat = self._normalized(x)
            return self.scale * (x_hat @ w_hat.T)
        out = x @ self.w.values.T + self.b.values
        if training and self.kind == "balsoftmax":
            out = out + self.train_offset[None, :]
        return out

    def logits_tape(self, t: Tape, x: np.ndarray, training: bool = False) -> Node:
        if self.kind == "cosine":
            x_hat = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
            wn = t.param(self.w)
            inv_norm = t.exp(t.mul(t.log(t.sum(t.mul(wn, wn), axis=1, keepdims=True)), -0.5))
            w_hat = t.mul(wn, inv_norm)
            return t.mul(t.affine(t.const(x_hat), w_hat), self.scale)
        out = t.affine(t.const(x), self.w, self.b)
        if training and self.kind == "balsoftmax":
            out = t.add(out, t.const(self.train_offset[None, :]))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1) + 1


def init_residual_classifier(dim: int, n_classes: int, kind: str,
                             counts: np.ndarray | None = None,
                             seed: int = 0) -> ResidualClassifier:
    """counts: training-subset class sizes, needed for the balsoftmax offset;
    classes absent from the subset fall back to count 1."""
    if kind not in RESIDUAL_KINDS:
        raise ContractError(f"classifier kind must be one of {RESIDUAL_KINDS}, got {kind!r}")
    offset = None
    if kind == "balsoftmax":
        if counts is None:
            raise ContractError("balsoftmax needs per-class training counts")
        counts = np.asarray(counts, dtype=np.float64)
        if (counts == 0).any():
            warnings.warn(f"{int((counts == 0).sum())} classes absent from the training "
                          "subset; their logit offsets use count 1")
            counts = np.maximum(counts, 1.0)
        offset = np.log(counts)
    if kind == "cosine":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        w = Parameter(rng.normal(size=(n_classes, dim)) * 0.01, name="residual.w")
    else:
        w = Parameter(np.zeros((n_classes, dim)), name="residual.w")
    return ResidualClassifier(kind=kind, w=w, b=Parameter(np.zeros(n_classes), name="residual.b"),
                              train_offset=offset)
