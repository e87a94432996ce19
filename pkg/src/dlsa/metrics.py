"""Evaluation: grouped accuracy, MCC, NMI, purity, separation, confusion bins.

All functions take 1-based class labels and cluster ids. Quantities that are
undefined on their input (an empty group, no filtered samples) come back as
None rather than NaN so reports can say "n/a" explicitly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .data import ClassStats
from .errors import ContractError


def _check_paired(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired label arrays must be equal-length 1-D, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ContractError("empty label arrays")
    return a, b


def grouped_accuracy(preds, labels, stats: ClassStats) -> dict:
    """Mean 0/1 correctness overall and within many/medium/few class groups."""
    preds, labels = _check_paired(preds, labels)
    correct = preds == labels
    out = {"overall": float(correct.mean())}
    sample_group = stats.groups[labels - 1]
    for g in ("many", "medium", "few"):
        m = sample_group == g
        out[g] = float(correct[m].mean()) if m.any() else None
    return out


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    preds, labels = _check_paired(preds, labels)
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (labels - 1, preds - 1), 1)
    return m


def mcc(preds, labels) -> float:
    """Multiclass Matthews correlation from the confusion matrix."""
    preds, labels = _check_paired(preds, labels)
    n_classes = int(max(preds.max(), labels.max()))
    m = confusion_matrix(preds, labels, n_classes).astype(np.float64)
    s = m.sum()
    c = np.trace(m)
    t = m.sum(axis=1)  # true counts
    p = m.sum(axis=0)  # predicted counts
    num = c * s - p @ t
    denom_sq = (s**2 - p @ p) * (s**2 - t @ t)
    if denom_sq <= 0:
        return 0.0
    return float(num / np.sqrt(denom_sq))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b, normalization: str = "geometric") -> float:
    """Mutual information between two labelings, normalised to [0, 1].

    A constant labeling has zero entropy; the value is then 1 if both sides
    are constant and 0 otherwise.
    """
    if normalization not in ("geometric", "arithmetic"):
        raise ContractError(f"unknown normalization {normalization!r}")
    a, b = _check_paired(a, b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ua.size, ub.size))
    np.add.at(joint, (ia, ib), 1)
    ha, hb = _entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == hb else 0.0
    pj = joint / joint.sum()
    pa, pb = pj.sum(axis=1), pj.sum(axis=0)
    nz = pj > 0
    info = float((pj[nz] * np.log(pj[nz] / np.outer(pa, pb)[nz])).sum())
    if normalization == "geometric":
        return info / np.sqrt(ha * hb)
    return 2.0 * info / (ha + hb)


def cluster_purity(assignments, labels) -> tuple[np.ndarray, np.ndarray, float]:
    """Majority-class fraction per occupied cluster and the size-weighted mean.

    Returns (cluster ids, per-cluster purity, weighted mean).
    """
    assignments, labels = _check_paired(assignments, labels)
    ids = np.unique(assignments)
    purities = np.empty(ids.size)
    sizes = np.empty(ids.size)
    for i, k in enumerate(ids):
        member_labels = labels[assignments == k]
        sizes[i] = member_labels.size
        purities[i] = np.bincount(member_labels).max() / member_labels.size
    mean = float((purities * sizes).sum() / sizes.sum())
    return ids, purities, mean


def separation_accuracy(filtered_mask, head_flags) -> Optional[float]:
    """Fraction of filtered samples belonging to tail classes; None if nothing filtered."""
    filtered_mask = np.asarray(filtered_mask, dtype=bool)
    head_flags = np.asarray(head_flags, dtype=bool)
    if filtered_mask.shape != head_flags.shape:
        raise ContractError(
            f"mask shapes differ: {filtered_mask.shape} vs {head_flags.shape}")
    if not filtered_mask.any():
        return None
    return float((~head_flags[filtered_mask]).mean())


def binned_confusion(preds, labels, counts, bins: int = 20) -> np.ndarray:
    """Misclassification mass between frequency-ordered class bins.

    Classes are sorted by descending training count and split into `bins`
    nearly equal groups (remainder goes to the most frequent bins). Correct
    predictions are dropped before aggregation, so the total mass equals the
    number of misclassified samples; diagonal cells hold within-bin
    cross-class errors.
    """
    counts = np.asarray(counts)
    n_classes = counts.size
    if bins < 2 or bins > n_classes:
        raise ContractError(f"bins must lie in 2..{n_classes}, got {bins}")
    m = confusion_matrix(preds, labels, n_classes).astype(np.float64)
    np.fill_diagonal(m, 0.0)
    order = np.argsort(-counts, kind="stable")
    base, extra = divmod(n_classes, bins)
    bin_of = np.empty(n_classes, dtype=np.int64)
    start = 0
    for b in range(bins):
        width = base + (1 if b < extra else 0)
        bin_of[order[start:start + width]] = b
        start += width
    onehot = np.zeros((n_classes, bins))
    onehot[np.arange(n_classes), bin_of] = 1.0
    return onehot.T @ m @ onehot


def oracle_split(labels, p: float, head_flags, seed: int = 0) -> np.ndarray:
    """Assign samples to two groups, head-leaning-1 / tail-leaning-2.

    Head samples go to group 1 with probability p, tail samples to group 2
    with probability p. p=0.5 is a fair coin for everyone; p=1 is an exact
    head/tail partition.
    """
    if not 0.5 <= p <= 1.0:
        raise ContractError(f"split probability must lie in [0.5, 1], got {p}")
    labels = np.asarray(labels)
    head = np.asarray(head_flags, dtype=bool)[labels - 1]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    to_one = rng.random(labels.size) < np.where(head, p, 1.0 - p)
    return np.where(to_one, 1, 2)


# ----- report -----------------------------------------------------------------


@dataclass
class MetricReport:
    split: str
    accuracy: dict
    mcc: float
    nmi_clusters: Optional[float]
    stage_separation: list
    stage_purity: list
    stage_fractions: list
    cluster_sizes: dict
    confusion_bins: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def write_confusion_csv(matrix: np.ndarray, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true_bin\\pred_bin"] + [str(j + 1) for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([str(i + 1)] + [f"{v:g}" for v in row])
