"""Feature datasets: synthetic long-tailed generation, binary IO, class stats.

Features are stored as float32 (matching typical backbone exports) and widened
to float64 for training. Labels are 1-based. The on-disk format is a small
checksummed binary container, see save_dataset.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"DLFT"
FORMAT_VERSION = 1

MANY_MIN = 100    # strictly more than this many train samples
FEW_MAX = 20      # strictly fewer than this
HEAD_THRESHOLD = 50


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ContractError(f"features must be (N, D), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ContractError(
                f"labels shape {self.labels.shape} does not match {self.features.shape[0]} samples")
        if self.n_classes < 1:
            raise ContractError(f"need at least one class, got {self.n_classes}")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.n_classes):
            raise ContractError(f"labels must lie in 1..{self.n_classes}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes + 1)[1:]

    @property
    def imbalance(self) -> float:
        present = self.counts[self.counts > 0]
        if present.size == 0:
            raise ContractError("imbalance undefined for an empty dataset")
        return float(present.max() / present.min())

    def x64(self) -> np.ndarray:
        return self.features.astype(np.float64)

    def subset(self, mask_or_idx) -> "FeatureDataset":
        return FeatureDataset(self.features[mask_or_idx], self.labels[mask_or_idx],
                              self.n_classes)


@dataclass
class ClassStats:
    counts: np.ndarray          # per-class training counts
    imbalance: float
    head: np.ndarray            # bool per class, count > head_threshold
    groups: np.ndarray          # "many" / "medium" / "few" per class
    head_threshold: int


def class_stats(d: FeatureDataset, head_threshold: int = HEAD_THRESHOLD) -> ClassStats:
    if d.n == 0:
        raise ContractError("class statistics need a non-empty dataset")
    counts = d.counts
    groups = np.where(counts > MANY_MIN, "many",
                      np.where(counts < FEW_MAX, "few", "medium"))
    return ClassStats(counts=counts, imbalance=d.imbalance,
                      head=counts > head_threshold, groups=groups,
                      head_threshold=head_threshold)


# ----- synthetic generation ---------------------------------------------------


@dataclass
class SyntheticSpec:
    """Long-tailed Gaussian blobs: class sizes follow a power law hitting the
    requested imbalance exactly at the last class; the test split is balanced.

    tail_shift > 0 pushes tail-class centers radially outward, giving head and
    tail classes distinct regions of feature space. anisotropy > 0 gives every
    class its own randomly oriented covariance with per-axis scales drawn from
    exp(U(-anisotropy, anisotropy)); class boundaries are then curved, which a
    purely linear probe cannot represent. tail_groups > 0 packs the tail
    classes round-robin into that many tight bundles (group center drawn like
    a class center, members offset by group_scale * center_scale), mimicking
    fine-grained rare classes inside coarse categories.
    """

    n_classes: int = 50
    imbalance: float = 100.0
    dim: int = 32
    n_max: int = 500
    center_scale: float = 1.0
    spread: float = 0.25
    test_per_class: int = 20
    tail_shift: float = 0.0
    anisotropy: float = 0.0
    tail_groups: int = 0
    group_scale: float = 0.3
    seed: int = 0


def synthetic_class_sizes(spec: SyntheticSpec) -> np.ndarray:
    if spec.n_classes < 2:
        raise ContractError(f"need at least 2 classes, got {spec.n_classes}")
    if spec.imbalance < 1:
        raise ContractError(f"imbalance factor must be >= 1, got {spec.imbalance}")
    if spec.imbalance == 1.0:
        return np.full(spec.n_classes, spec.n_max, dtype=np.int64)
    gamma = np.log(spec.imbalance) / np.log(spec.n_classes)
    ranks = np.arange(1, spec.n_classes + 1, dtype=np.float64)
    sizes = np.round(spec.n_max * ranks**-gamma).astype(np.int64)
    if sizes.min() < 1:
        raise ContractError(
            f"n_max={spec.n_max} too small for imbalance {spec.imbalance}: smallest class empty")
    return sizes


def gen_synthetic(spec: SyntheticSpec) -> tuple[FeatureDataset, FeatureDataset]:
    if spec.anisotropy < 0:
        raise ContractError(f"anisotropy must be >= 0, got {spec.anisotropy}")
    sizes = synthetic_class_sizes(spec)
    ss = np.random.SeedSequence(spec.seed)
    center_rng, train_rng, test_rng, shape_rng = (np.random.default_rng(s)
                                                  for s in ss.spawn(4))

    centers = center_rng.normal(size=(spec.n_classes, spec.dim)) * spec.center_scale
    tail = sizes <= HEAD_THRESHOLD
    if spec.tail_groups > 0:
        if spec.group_scale < 0:
            raise ContractError(f"group_scale must be >= 0, got {spec.group_scale}")
        n_tail = int(tail.sum())
        g_centers = center_rng.normal(size=(spec.tail_groups, spec.dim)) * spec.center_scale
        offsets = (center_rng.normal(size=(n_tail, spec.dim))
                   * spec.center_scale * spec.group_scale)
        group_of = np.arange(n_tail) % spec.tail_groups
        centers[tail] = g_centers[group_of] + offsets
    if spec.tail_shift > 0:
        centers[tail] *= 1.0 + spec.tail_shift

    # class-shape draws only happen when requested, so anisotropy=0 datasets
    # are bit-identical to those generated before the knob existed
    rotations = scales = None
    if spec.anisotropy > 0:
        a = spec.anisotropy
        rotations = np.empty((spec.n_classes, spec.dim, spec.dim))
        scales = np.exp(shape_rng.uniform(-a, a, size=(spec.n_classes, spec.dim)))
        for c in range(spec.n_classes):
            q, r = np.linalg.qr(shape_rng.normal(size=(spec.dim, spec.dim)))
            rotations[c] = q * np.sign(np.diag(r))

    def draw(rng, per_class):
        feats, labels = [], []
        for c in range(spec.n_classes):
            n_c = int(per_class[c])
            noise = rng.normal(size=(n_c, spec.dim))
            if rotations is not None:
                noise = (noise * scales[c]) @ rotations[c].T
            feats.append(centers[c] + noise * spec.spread)
            labels.append(np.full(n_c, c + 1, dtype=np.int64))
        return FeatureDataset(np.concatenate(feats).astype(np.float32),
                              np.concatenate(labels), spec.n_classes)

    train = draw(train_rng, sizes)
    test = draw(test_rng, np.full(spec.n_classes, spec.test_per_class))
    return train, test


# ----- binary container -------------------------------------------------------


def save_dataset(d: FeatureDataset, path):
    """Header: magic, version u32, N u64, D u32, C u32 (little-endian).
    Payload: row-major float32 features then u32 labels. Footer: CRC-32 of payload."""
    header = MAGIC + struct.pack("<IQII", FORMAT_VERSION, d.n, d.dim, d.n_classes)
    payload = d.features.astype("<f4").tobytes() + d.labels.astype("<u4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_dataset(path) -> FeatureDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24:
        raise FormatError(f"file truncated: {len(blob)} bytes is shorter than the header")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0")
    version, n, dim, n_classes = struct.unpack("<IQII", blob[4:24])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at offset 4")
    payload_len = n * dim * 4 + n * 4
    if len(blob) != 24 + payload_len + 4:
        raise FormatError(
            f"file truncated: expected {24 + payload_len + 4} bytes, got {len(blob)}")
    payload = blob[24:24 + payload_len]
    (stored_crc,) = struct.unpack("<I", blob[24 + payload_len:])
    actual_crc = zlib.crc32(payload)
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch at offset {24 + payload_len}: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    feats = np.frombuffer(payload[:n * dim * 4], dtype="<f4").reshape(n, dim)
    labels = np.frombuffer(payload[n * dim * 4:], dtype="<u4").astype(np.int64)
    return FeatureDataset(feats.copy(), labels, n_classes)
