"""The end-to-end cascade: chained filters, cluster priors, classifiers.

A sample walks the stages in order and is claimed by the first stage whose
log-likelihood threshold it clears; its class is then scored by that stage's
cluster-aided head. Samples no stage accepts fall through to the residual
classifier. Stage ids are 1-based in routing output; 0 means residual.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Parameter
from .classifiers import (RESIDUAL_KINDS, ClusterAidedClassifier,
                          ResidualClassifier, init_cluster_classifier)
from .data import FeatureDataset
from .errors import ContractError, FormatError, TrainingError
from .flow import FlowStack, build_flow
from .metrics import cluster_purity
from .mixture import GaussianMixtureLatent
from .training import (TrainConfig, train_cluster_classifier,
                       train_flow_filter, train_residual_classifier)

MODEL_MAGIC = b"DLSA"
MODEL_VERSION = 1


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


@dataclass
class ClusterPriorTable:
    """Row-stochastic P(class | cluster) plus per-cluster training occupancy."""

    table: np.ndarray       # (K, C)
    occupancy: np.ndarray   # (K,) training sample counts

    def rows_for(self, clusters: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(clusters) - 1]


def build_cluster_prior(assignments, labels, n_clusters: int, n_classes: int,
                        smoothing: float = 0.0) -> ClusterPriorTable:
    """Label histogram per cluster, normalised; unoccupied rows are uniform.

    smoothing adds that many pseudo-counts per class before normalising.
    Sparse clusters produce spiky, partly self-referential histograms, so a
    small pseudo-count keeps downstream heads from leaning on them too hard.
    """
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape:
        raise ContractError("assignments and labels must align")
    if smoothing < 0:
        raise ContractError(f"smoothing must be >= 0, got {smoothing}")
    table = np.zeros((n_clusters, n_classes))
    np.add.at(table, (assignments - 1, labels - 1), 1.0)
    occupancy = table.sum(axis=1)
    occupied = occupancy > 0
    if smoothing > 0:
        table += smoothing
        table /= table.sum(axis=1, keepdims=True)
    else:
        table[occupied] /= occupancy[occupied, None]
        table[~occupied] = 1.0 / n_classes
    return ClusterPriorTable(table=table, occupancy=occupancy)


@dataclass
class CascadeStage:
    flow: FlowStack
    mixture: GaussianMixtureLatent
    alpha: float
    prior: ClusterPriorTable
    classifier: ClusterAidedClassifier


@dataclass
class DlsaCascade:
    stages: list
    residual: ResidualClassifier
    n_classes: int
    dim: int


@dataclass
class RoutingTable:
    """Per-sample routing outcome: stage 1..S, or 0 for the residual head."""

    stage: np.ndarray        # (N,)
    cluster: np.ndarray      # (N,) 1-based, 0 where residual
    logliks: np.ndarray      # (N, S) NaN where the stage was never visited


def route(cascade: DlsaCascade, x: np.ndarray) -> RoutingTable:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cascade.dim:
        raise ContractError(f"expected (N, {cascade.dim}) features, got {x.shape}")
    if not np.isfinite(x).all():
        raise ContractError("features contain non-finite values")
    n = x.shape[0]
    n_stages = len(cascade.stages)
    stage_of = np.zeros(n, dtype=np.int64)
    cluster = np.zeros(n, dtype=np.int64)
    logliks = np.full((n, n_stages), np.nan)
    remaining = np.arange(n)
    for s, stage in enumerate(cascade.stages, start=1):
        if remaining.size == 0:
            break
        z, logdet = stage.flow.inverse_with_logdet(x[remaining])
        ll = stage.mixture.logpdf(z) + logdet
        logliks[remaining, s - 1] = ll
        accept = ll >= stage.alpha
        taken = remaining[accept]
        stage_of[taken] = s
        cluster[taken] = stage.mixture.predict_cluster(z[accept])
        remaining = remaining[~accept]
    return RoutingTable(stage=stage_of, cluster=cluster, logliks=logliks)


def predict(cascade: DlsaCascade, x: np.ndarray) -> tuple[np.ndarray, RoutingTable]:
    """Class labels (ties to the lowest class id) plus the routing table."""
    x = np.asarray(x, dtype=np.float64)
    routing = route(cascade, x)
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for s, stage in enumerate(cascade.stages, start=1):
        m = routing.stage == s
        if not m.any():
            continue
        z, _ = stage.flow.inverse_with_logdet(x[m])
        prior_rows = stage.prior.rows_for(routing.cluster[m])
        labels[m] = stage.classifier.predict(x[m], z, prior_rows)
    m = routing.stage == 0
    if m.any():
        labels[m] = cascade.residual.predict(x[m])
    return labels, routing


@dataclass
class FitReport:
    """Everything the evaluation suite wants to know about a finished fit."""

    stage_fraction: list = field(default_factory=list)     # of the full train set
    stage_filtered_idx: list = field(default_factory=list)  # original indices
    stage_assignments: list = field(default_factory=list)   # 1-based clusters
    stage_purity: list = field(default_factory=list)
    stage_trace: list = field(default_factory=list)
    classifier_trace: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)
    residual_fraction: float = 0.0


def fit_cascade(data: FeatureDataset, cfg: TrainConfig, n_stages: int,
                residual_kind: str = "balsoftmax") -> tuple[DlsaCascade, FitReport]:
    """Train filters stage by stage on the shrinking residual, then the fallback.

    Sample weights are recomputed from the residual subset's class counts at
    every stage, so later filters see the class balance they actually face.
    """
    cfg.validate()
    if n_stages < 0:
        raise ContractError(f"stage count must be >= 0, got {n_stages}")
    if residual_kind not in RESIDUAL_KINDS:
        raise ContractError(f"unknown residual classifier kind {residual_kind!r}")

    report = FitReport()
    stages = []
    current_idx = np.arange(data.n)
    for s in range(1, n_stages + 1):
        if current_idx.size == 0:
            raise TrainingError(
                f"residual training set exhausted before stage {s}; "
                "use a smaller filter_frac or fewer stages")
        subset = data.subset(current_idx)
        if (subset.counts > 0).sum() < 2:
            raise TrainingError(
                f"fewer than 2 classes left for stage {s}; "
                "use a smaller filter_frac or fewer stages")
        stage_cfg = replace(cfg, seed=derive_seed(cfg.seed, s, 0))
        trained = train_flow_filter(subset, stage_cfg)
        filtered_local = np.flatnonzero(trained.filtered_mask)
        filtered_idx = current_idx[filtered_local]
        x_f = subset.x64()[filtered_local]
        y_f = subset.labels[filtered_local]
        z_f, _ = trained.flow.inverse_with_logdet(x_f)
        prior = build_cluster_prior(trained.assignments, y_f, cfg.n_clusters,
                                    data.n_classes, cfg.prior_smoothing)
        if cfg.stage_heads_on_full:
            # decoupled reading: routing stays cascaded but every head
            # retrains on the whole set; count offsets play the balsoftmax role
            x_c, y_c = data.x64(), data.labels
            z_c, _ = trained.flow.inverse_with_logdet(x_c)
            asg_c = trained.mixture.predict_cluster(z_c)
            rows_c = prior.rows_for(asg_c)
            # gain > 1 rebalances the aided heads harder than plain
            # balsoftmax; offsets are train-time only either way
            offset = (cfg.aided_offset_gain
                      * np.log(np.maximum(data.counts, 1)).astype(np.float64))
        else:
            x_c, y_c, z_c = x_f, y_f, z_f
            rows_c = prior.rows_for(trained.assignments)
            offset = None
        clf, clf_trace = train_cluster_classifier(
            x_c, z_c, rows_c, y_c, data.n_classes,
            cfg, seed=derive_seed(cfg.seed, s, 1), train_offset=offset)
        stages.append(CascadeStage(flow=trained.flow, mixture=trained.mixture,
                                   alpha=trained.alpha, prior=prior, classifier=clf))
        _, _, purity = cluster_purity(trained.assignments, y_f)
        report.stage_fraction.append(filtered_idx.size / data.n)
        report.stage_filtered_idx.append(filtered_idx)
        report.stage_assignments.append(trained.assignments)
        report.stage_purity.append(purity)
        report.stage_trace.append(trained.trace)
        report.classifier_trace.append(clf_trace)
        current_idx = current_idx[~trained.filtered_mask]

    if current_idx.size == 0 and not cfg.residual_on_full:
        raise TrainingError("no residual samples left to train the fallback classifier; "
                            "use a smaller filter_frac or fewer stages")
    residual_data = data if cfg.residual_on_full else data.subset(current_idx)
    residual, res_trace = train_residual_classifier(
        residual_data.x64(), residual_data.labels, data.n_classes, residual_kind,
        cfg, seed=derive_seed(cfg.seed, 0, 2))
    report.residual_trace = res_trace
    report.residual_fraction = current_idx.size / data.n
    cascade = DlsaCascade(stages=stages, residual=residual,
                          n_classes=data.n_classes, dim=data.dim)
    return cascade, report


# ----- binary container ---------------------------------------------------------


def _flow_arrays(flow: FlowStack):
    for blk in flow.blocks:
        yield from (blk.w1.values, blk.b1.values, blk.w_shift.values,
                    blk.b_shift.values, blk.w_scale.values, blk.b_scale.values)


def save_cascade(c: DlsaCascade, path):
    """Header: magic, version, D, C, K, stage count, residual kind.
    Payload: per stage the flow weights (f64, fixed order), centers, threshold,
    prior table and occupancy, classifier heads; then the residual head.
    Footer: CRC-32 of the payload."""
    k = c.stages[0].mixture.n_components if c.stages else 0
    chunks = []

    def put(arr):
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    for stage in c.stages:
        chunks.append(struct.pack("<III", len(stage.flow.blocks),
                                  stage.flow.blocks[0].w1.values.shape[0],
                                  stage.mixture.n_components))
        for blk in stage.flow.blocks:
            chunks.append(struct.pack("<B", int(blk.reverse)))
        for arr in _flow_arrays(stage.flow):
            put(arr)
        put(stage.mixture.centers)
        chunks.append(struct.pack("<d", stage.alpha))
        put(stage.prior.table)
        put(stage.prior.occupancy)
        for p in stage.classifier.parameters():
            put(p.values)
    put(c.residual.w.values)
    put(c.residual.b.values)
    chunks.append(struct.pack("<d", c.residual.scale))
    payload = b"".join(chunks)
    header = MODEL_MAGIC + struct.pack(
        "<IIIIIB", MODEL_VERSION, c.dim, c.n_classes, k, len(c.stages),
        RESIDUAL_KINDS.index(c.residual.kind))
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"file truncated at offset {self.offset}: "
                              f"need {n} more bytes")
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(n * 8), dtype="<f8").reshape(shape).copy()


def load_cascade(path) -> DlsaCascade:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 25:
        raise FormatError(f"file truncated: {len(blob)} bytes is shorter than the header")
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0")
    version, dim, n_classes, k, n_stages, kind_idx = struct.unpack("<IIIIIB", blob[4:25])
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version} at offset 4")
    if kind_idx >= len(RESIDUAL_KINDS):
        raise FormatError(f"unknown residual classifier code {kind_idx} at offset 24")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    payload = blob[25:-4]
    actual = zlib.crc32(payload)
    if stored_crc != actual:
        raise FormatError(f"checksum mismatch at offset {len(blob) - 4}: "
                          f"stored {stored_crc:#010x}, computed {actual:#010x}")

    r = _Reader(blob, 25)
    stages = []
    for _ in range(n_stages):
        n_blocks, hidden, k_stage = struct.unpack("<III", r.take(12))
        reverses = [bool(r.take(1)[0]) for _ in range(n_blocks)]
        flow = build_flow(dim, n_blocks, hidden, seed=0)
        for blk, rev in zip(flow.blocks, reverses):
            blk.reverse = rev
        for p in flow.parameters():
            p.values[...] = r.floats(p.values.shape)
        centers = r.floats((k_stage, dim))
        (alpha,) = struct.unpack("<d", r.take(8))
        table = r.floats((k_stage, n_classes))
        occupancy = r.floats((k_stage,))
        clf = init_cluster_classifier(dim, dim, n_classes)
        for p in clf.parameters():
            p.values[...] = r.floats(p.values.shape)
        stages.append(CascadeStage(flow=flow, mixture=GaussianMixtureLatent(centers),
                                   alpha=alpha,
                                   prior=ClusterPriorTable(table, occupancy),
                                   classifier=clf))
    kind = RESIDUAL_KINDS[kind_idx]
    residual = ResidualClassifier(kind=kind,
                                  w=Parameter(r.floats((n_classes, dim)), name="residual.w"),
                                  b=Parameter(r.floats((n_classes,)), name="residual.b"))
    (residual.scale,) = struct.unpack("<d", r.take(8))
    if len(blob) - r.offset != 4:
        raise FormatError(f"unexpected {len(blob) - r.offset - 4} trailing bytes "
                          f"at offset {r.offset}")
    return DlsaCascade(stages=stages, residual=residual, n_classes=n_classes, dim=dim)
