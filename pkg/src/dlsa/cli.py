"""Command-line front end: gen / train / eval / probe.

Exit codes: 0 success, 2 input or config problem, 3 training diverged.
Diagnostics go to stderr; stdout carries only data. Every artifact written
under the output directory is recorded in run_manifest.json with its CRC-32,
and a rerun with the same config and seed reproduces every byte.
"""

import os
import sys


def _cap_threads():
    # must run before numpy is first imported anywhere in the process
    v = os.environ.get("DLSA_THREADS")
    if v:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ[var] = v


_cap_threads()

import argparse            # noqa: E402
import csv                 # noqa: E402
import json                # noqa: E402
import zlib                # noqa: E402
from pathlib import Path   # noqa: E402

import numpy as np         # noqa: E402

from .cascade import derive_seed, fit_cascade, load_cascade, predict, save_cascade  # noqa: E402
from .classifiers import RESIDUAL_KINDS  # noqa: E402
from .config import ExperimentConfig, load_config, set_global_seed  # noqa: E402
from .data import class_stats, gen_synthetic, load_dataset, save_dataset  # noqa: E402
from .errors import (ConfigError, ContractError, FormatError, NumericError,  # noqa: E402
                     TrainingError)
from .metrics import (MetricReport, binned_confusion, cluster_purity,  # noqa: E402
                      grouped_accuracy, mcc, nmi, oracle_split,
                      separation_accuracy, write_confusion_csv)
from .training import train_residual_classifier  # noqa: E402


# ----- artifact bookkeeping ------------------------------------------------------


def _record_artifacts(out_dir: Path, names):
    """Merge the named files into run_manifest.json with their payload CRCs."""
    manifest_path = out_dir / "run_manifest.json"
    manifest = {"artifacts": {}}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    for name in names:
        crc = zlib.crc32((out_dir / name).read_bytes())
        manifest["artifacts"][name] = f"{crc:#010x}"
    manifest["artifacts"] = dict(sorted(manifest["artifacts"].items()))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_trace_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in columns])


# ----- subcommands ---------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig) -> int:
    if cfg.synthetic is None:
        raise ConfigError("gen needs a 'synthetic' block in the config")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = gen_synthetic(cfg.synthetic)
    save_dataset(train, out / "train.dlft")
    save_dataset(test, out / "test.dlft")
    spec = cfg.synthetic
    manifest = {
        "name": f"synthetic_c{spec.n_classes}_b{spec.imbalance:g}_d{spec.dim}",
        "n_classes": spec.n_classes,
        "dim": spec.dim,
        "imbalance": spec.imbalance,
        "seed": spec.seed,
        "train_size": train.n,
        "test_size": test.n,
        "class_counts": train.counts.tolist(),
    }
    (out / "dataset_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _record_artifacts(out, ["train.dlft", "test.dlft", "dataset_manifest.json"])
    counts = train.counts
    print(f"imbalance={train.imbalance:g} classes={train.n_classes} dim={train.dim}")
    print(f"train={train.n} test={test.n} counts: max={counts.max()} "
          f"median={int(np.median(counts))} min={counts.min()}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.resolved_train_file())
    cascade, report = fit_cascade(data, cfg.train, cfg.stages, cfg.classifier)
    save_cascade(cascade, out / "model.dlsa")
    written = ["model.dlsa"]
    trace_cols = ["epoch", "mle", "bal", "pure", "total"]
    for s, trace in enumerate(report.stage_trace, start=1):
        name = f"trace_stage{s}.csv"
        _write_trace_csv(out / name, trace, trace_cols)
        written.append(name)
    head_cols = ["epoch", "cross_entropy"]

    def ce_rows(trace):
        return [{"epoch": i, "cross_entropy": v} for i, v in enumerate(trace)]

    for s, trace in enumerate(report.classifier_trace, start=1):
        name = f"trace_head_stage{s}.csv"
        _write_trace_csv(out / name, ce_rows(trace), head_cols)
        written.append(name)
    _write_trace_csv(out / "trace_residual.csv", ce_rows(report.residual_trace),
                     head_cols)
    written.append("trace_residual.csv")
    _record_artifacts(out, written)
    fracs = " ".join(f"{f:.4f}" for f in report.stage_fraction)
    print(f"stages={len(cascade.stages)} stage_fractions=[{fracs}] "
          f"residual_fraction={report.residual_fraction:.4f}")
    print(f"model={out / 'model.dlsa'}")
    return 0


def _routing_csv(path, routing, preds, labels):
    n_stages = routing.logliks.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "label", "prediction", "stage", "cluster"]
                   + [f"loglik_stage{s + 1}" for s in range(n_stages)])
        for i in range(len(preds)):
            lls = ["" if np.isnan(v) else repr(float(v)) for v in routing.logliks[i]]
            w.writerow([i, labels[i], preds[i], routing.stage[i],
                        routing.cluster[i] or ""] + lls)


def cmd_eval(cfg: ExperimentConfig, model_path, data_path) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = Path(model_path or out / "model.dlsa")
    data_path = Path(data_path or cfg.resolved_test_file())
    cascade = load_cascade(model_path)
    data = load_dataset(data_path)
    train_data = load_dataset(cfg.resolved_train_file())
    if data.dim != cascade.dim:
        raise ConfigError(f"model expects dim={cascade.dim}, data has dim={data.dim}")
    if data.n_classes != cascade.n_classes:
        raise ConfigError(f"model expects {cascade.n_classes} classes, "
                          f"data has {data.n_classes}")
    stats = class_stats(train_data, cfg.head_threshold)

    x = data.x64()
    preds, routing = predict(cascade, x)
    n_stages = len(cascade.stages)
    head_per_sample = stats.head[data.labels - 1]
    stage_sep, stage_pur, stage_frac, sizes = [], [], [], {}
    for s in range(1, n_stages + 1):
        m = routing.stage == s
        stage_frac.append(float(m.mean()))
        stage_sep.append(separation_accuracy(m, head_per_sample))
        if m.any():
            _, _, pur = cluster_purity(routing.cluster[m], data.labels[m])
            occupied = np.bincount(routing.cluster[m])[1:]
            occupied = occupied[occupied > 0]
            sizes[f"stage{s}"] = {
                "occupied": int(occupied.size),
                "min": int(occupied.min()),
                "max": int(occupied.max()),
                "ratio": float(occupied.max() / occupied.min()),
            }
        else:
            pur = None
            sizes[f"stage{s}"] = {"occupied": 0, "min": None, "max": None,
                                  "ratio": None}
        stage_pur.append(pur)
    stage_frac.append(float((routing.stage == 0).mean()))

    filtered = routing.stage > 0
    nmi_val = (nmi(routing.cluster[filtered], data.labels[filtered],
                   cfg.nmi_normalization) if filtered.any() else None)
    bins = min(cfg.confusion_bins, data.n_classes)
    confusion = binned_confusion(preds, data.labels, stats.counts, bins)
    split = "train" if data_path.resolve() == Path(cfg.resolved_train_file()).resolve() \
        else "test"
    report = MetricReport(
        split=split,
        accuracy=grouped_accuracy(preds, data.labels, stats),
        mcc=mcc(preds, data.labels),
        nmi_clusters=nmi_val,
        stage_separation=stage_sep,
        stage_purity=stage_pur,
        stage_fractions=stage_frac,
        cluster_sizes=sizes,
        confusion_bins=confusion.tolist(),
    )
    (out / "report.json").write_text(report.to_json() + "\n")
    write_confusion_csv(confusion, out / "confusion_bins.csv")
    _routing_csv(out / "routing.csv", routing, preds, data.labels)
    _record_artifacts(out, ["report.json", "confusion_bins.csv", "routing.csv"])
    print(report.to_json())
    return 0


def cmd_probe(cfg: ExperimentConfig, grid) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = list(grid) if grid else list(cfg.probe_grid)
    for p in grid:
        if not 0.5 <= p <= 1.0:
            raise ConfigError(f"probe p values must lie in [0.5, 1], got {p}")
    train = load_dataset(cfg.resolved_train_file())
    test = load_dataset(cfg.resolved_test_file())
    stats = class_stats(train, cfg.head_threshold)
    x_train, x_test = train.x64(), test.x64()

    rows = []
    for i, p in enumerate(grid):
        groups_train = oracle_split(train.labels, p, stats.head,
                                    seed=derive_seed(cfg.seed, 101, i))
        groups_test = oracle_split(test.labels, p, stats.head,
                                   seed=derive_seed(cfg.seed, 202, i))
        if (groups_train == 1).sum() == 0 or (groups_train == 2).sum() == 0:
            print(f"probe p={p}: a training group is empty, skipping",
                  file=sys.stderr)
            rows.append({"p": p, "accuracy": "", "status": "failed"})
            continue
        preds = np.zeros(test.n, dtype=np.int64)
        for g in (1, 2):
            m = groups_train == g
            clf, _ = train_residual_classifier(
                x_train[m], train.labels[m], train.n_classes, cfg.classifier,
                cfg.train, seed=derive_seed(cfg.seed, 303, i, g))
            mt = groups_test == g
            if mt.any():
                preds[mt] = clf.predict(x_test[mt])
        acc = float((preds == test.labels).mean())
        rows.append({"p": p, "accuracy": acc, "status": "ok"})

    _write_trace_csv(out / "probe.csv", rows, ["p", "accuracy", "status"])
    _record_artifacts(out, ["probe.csv"])
    for row in rows:
        acc = f"{row['accuracy']:.4f}" if row["status"] == "ok" else "failed"
        print(f"p={row['p']:g} accuracy={acc}")
    return 0


# ----- argument plumbing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dlsa",
        description="long-tailed classification with cascaded flow filters")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", help="output directory")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)

    t = sub.add_parser("train", help="fit the cascade on a training file")
    common(t)
    t.add_argument("--stages", type=int, help="number of filter stages")
    t.add_argument("--clusters", type=int, help="latent mixture components per stage")
    t.add_argument("--filter-frac", type=float, help="per-stage filtered fraction")
    t.add_argument("--classifier", choices=RESIDUAL_KINDS,
                   help="fallback classifier kind")
    t.add_argument("--no-bal", action="store_true",
                   help="ablation: drop the cluster-balance loss term")
    t.add_argument("--no-pure", action="store_true",
                   help="ablation: drop the cluster-purity loss term")
    t.add_argument("--no-mle-weight", action="store_true",
                   help="ablation: uniform instead of inverse-count class weights")

    e = sub.add_parser("eval", help="evaluate a model file on a dataset file")
    common(e)
    e.add_argument("--model", help="model file (default: <out>/model.dlsa)")
    e.add_argument("--data", help="dataset file (default: the config's test file)")

    p = sub.add_parser("probe", help="oracle-separation accuracy sweep")
    common(p)
    p.add_argument("--p", type=float, nargs="+",
                   help="separation probabilities in [0.5, 1]")
    return ap


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        set_global_seed(cfg, args.seed)
    if args.out:
        cfg.out_dir = args.out
    if getattr(args, "stages", None) is not None:
        cfg.stages = args.stages
    if getattr(args, "clusters", None) is not None:
        cfg.train.n_clusters = args.clusters
    if getattr(args, "filter_frac", None) is not None:
        cfg.train.filter_frac = args.filter_frac
    if getattr(args, "classifier", None):
        cfg.classifier = args.classifier
    if getattr(args, "no_bal", False):
        cfg.train.lam_bal = 0.0
    if getattr(args, "no_pure", False):
        cfg.train.lam_pure = 0.0
    if getattr(args, "no_mle_weight", False):
        cfg.train.q = 0.0
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.model, args.data)
        if args.command == "probe":
            return cmd_probe(cfg, args.p)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ContractError, FormatError, FileNotFoundError,
            IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
