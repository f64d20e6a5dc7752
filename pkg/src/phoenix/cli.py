"""Command-line pipeline: partition, warmup, train, generate, evaluate, report.

Every command is driven by one RunConfig (a preset name or a JSON file) and
writes only under the configured output directory. Exit codes: 0 success,
2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffusion
from .autodiff import NumericError
from .classifier import (
    EvalClassifier,
    load_classifier,
    save_classifier,
    train_eval_classifier,
)
from .config import (
    ConfigError,
    RunConfig,
    apply_env_overrides,
    load_config,
    load_datasets,
    preset_names,
)
from .datasets import DataFormatError
from .federation import (
    FederationConfig,
    FederationError,
    run_federation,
    warmup_train,
)
from .formats import (
    FormatError,
    image_extension,
    read_checkpoint,
    read_tensor,
    write_checkpoint,
    write_image,
    write_tensor,
)
from .metrics import MetricsContext, compute_report, sorted_histogram
from .partition import (
    MODE_DATA_SHARING,
    SharingPlan,
    data_sharing_split,
    load_plan,
    partition_iid,
    partition_label_skew,
    save_plan,
)
from .seeding import DOMAIN_SAMPLE, derive_seed
from .unet import DenoiserModel, build_unet

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

PLAN_FILE = "plan.json"
WARMUP_CHECKPOINT = "round_0.phxc"
WARMUP_LOSS_FILE = "warmup_loss.csv"
CLASSIFIER_FILE = "eval_classifier.phxc"


class InputError(ValueError):
    """A required input file is missing or unusable."""


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    apply_env_overrides(cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _build_fed_config(cfg: RunConfig) -> FederationConfig:
    f = cfg.federation
    fed = FederationConfig(
        client_count=f.client_count,
        server_rounds=f.server_rounds,
        local_epochs=f.local_epochs,
        batch_size=f.batch_size,
        learning_rate=f.learning_rate,
        schedule=cfg.diffusion.build(),
        warmup_epochs=f.warmup_epochs,
        optimizer=f.optimizer,
        personalization=f.personalization,
        threshold_filtering=f.threshold_filtering,
        drop_policy=f.build_policy(),
        eval_sample_count=f.eval_sample_count,
        eval_start_round=f.eval_start_round,
        min_active_clients=f.min_active_clients,
    )
    fed.validate()
    return fed


def _load_required_plan(cfg: RunConfig):
    path = Path(cfg.out_dir) / PLAN_FILE
    if not path.exists():
        raise InputError(f"no partition plan at {path}; run 'phoenix partition' first")
    return load_plan(path)


def _model_from_checkpoint(cfg: RunConfig, path: Path) -> DenoiserModel:
    if not path.exists():
        raise InputError(f"no checkpoint at {path}")
    params, _ = read_checkpoint(path)
    scaffold = build_unet(cfg.model_config(), cfg.seed)
    if set(params) != set(scaffold.params):
        diff = sorted(set(params) ^ set(scaffold.params))
        raise InputError(f"checkpoint {path} does not match the model config: {diff}")
    for name, arr in params.items():
        if arr.shape != scaffold.params[name].shape:
            raise InputError(
                f"checkpoint {path}: parameter '{name}' has shape {arr.shape}, "
                f"expected {scaffold.params[name].shape}"
            )
    return scaffold.with_params(params)


def _obtain_classifier(cfg: RunConfig, train_dataset, explicit: str | None) -> EvalClassifier:
    if explicit is not None:
        return load_classifier(explicit)
    default = Path(cfg.out_dir) / CLASSIFIER_FILE
    if default.exists():
        return load_classifier(default)
    clf = train_eval_classifier(
        train_dataset, cfg.metrics.classifier_epochs, cfg.seed
    )
    default.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(default, clf)
    return clf


def cmd_partition(cfg: RunConfig, args: argparse.Namespace) -> int:
    train, _ = load_datasets(cfg)
    p = cfg.partition
    if p.mode == "iid":
        plan = partition_iid(train, cfg.federation.client_count, cfg.seed)
    elif p.mode == "label_skew":
        plan = partition_label_skew(
            train, cfg.federation.client_count, p.classes_per_client, cfg.seed
        )
    else:
        plan = data_sharing_split(
            train, cfg.federation.client_count, p.beta_pct, p.alpha_pct,
            p.classes_per_client, cfg.seed,
        )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_plan(out / PLAN_FILE, plan)
    with open(out / "class_counts.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["client"] + [f"class_{c}" for c in range(train.num_classes)])
        for cid in range(plan.client_count):
            counts = np.bincount(
                train.labels[np.asarray(plan.client_indices(cid), dtype=np.int64)],
                minlength=train.num_classes,
            )
            writer.writerow([cid] + [int(c) for c in counts])
    sizes = [len(plan.client_indices(i)) for i in range(plan.client_count)]
    print(f"wrote {out / PLAN_FILE}: mode={p.mode} clients={sizes}")
    if isinstance(plan, SharingPlan):
        print(f"shared pool |G|={len(plan.shared_pool)} "
              f"(beta={plan.beta_pct:g}%, alpha={plan.alpha_pct:g}%)")
    return EXIT_OK


def cmd_warmup(cfg: RunConfig, args: argparse.Namespace) -> int:
    plan = _load_required_plan(cfg)
    if not isinstance(plan, SharingPlan):
        raise InputError(
            f"warmup needs a data-sharing plan, found mode '{plan.mode}'"
        )
    train, _ = load_datasets(cfg)
    fed = _build_fed_config(cfg)
    shared = train.subset(plan.warmup_indices)
    model, curve = warmup_train(shared, cfg.model_config(), fed, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / WARMUP_CHECKPOINT, model.params, set(model.personal_names))
    with open(out / WARMUP_LOSS_FILE, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(curve, start=1):
            writer.writerow([epoch, f"{loss:.6f}"])
    print(f"wrote {out / WARMUP_CHECKPOINT} after {len(curve)} warmup epochs "
          f"on {len(shared)} shared samples")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    plan = _load_required_plan(cfg)
    train, test = load_datasets(cfg)
    fed = _build_fed_config(cfg)
    out = Path(cfg.out_dir)
    if isinstance(plan, SharingPlan):
        initial = _model_from_checkpoint(cfg, out / WARMUP_CHECKPOINT)
    else:
        initial = build_unet(cfg.model_config(), cfg.seed)
    classifier = _obtain_classifier(cfg, train, args.classifier)
    metrics_ctx = MetricsContext.build(
        test.images, classifier, cfg.metrics.feature_space, cfg.metrics.knn_k
    )
    run_id = cfg.resolved_run_id()
    run_dir = out / "runs" / run_id
    final_model, runlog = run_federation(
        initial, plan, fed, train, cfg.seed,
        metrics_ctx=metrics_ctx, workers=args.workers, out_dir=run_dir,
    )
    samples = diffusion.generate(
        final_model, fed.schedule, cfg.metrics.eval_sample_count,
        derive_seed(cfg.seed, DOMAIN_SAMPLE, 0),
    )
    report = compute_report(
        samples, test.images, classifier,
        cfg.metrics.feature_space, cfg.metrics.knn_k, cfg.metrics.is_splits,
    )
    summary = {
        "run_id": run_id,
        "strategy": cfg.strategy_label(),
        "mode": cfg.partition.mode,
        "beta_pct": cfg.partition.beta_pct if cfg.partition.mode == MODE_DATA_SHARING else None,
        "alpha_pct": cfg.partition.alpha_pct if cfg.partition.mode == MODE_DATA_SHARING else None,
        "drop_policy": fed.drop_policy.label() if fed.threshold_filtering else None,
        "seed": cfg.seed,
        "server_rounds": fed.server_rounds,
        "fid": report.fid,
        "is_mean": report.is_mean,
        "is_std": report.is_std,
        "precision": report.precision,
        "recall": report.recall,
        "tv_distance": report.tv_distance,
        "feature_space": report.feature_space,
        "n_generated": report.n_generated,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"run {run_id}: {fed.server_rounds} rounds complete")
    print(f"final metrics: fid={report.fid:.4f} is={report.is_mean:.4f}+-{report.is_std:.4f} "
          f"precision={report.precision:.4f} recall={report.recall:.4f} "
          f"tv={report.tv_distance:.4f}")
    print(f"wrote {run_dir / 'summary.json'}")
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args: argparse.Namespace) -> int:
    model = _model_from_checkpoint(cfg, Path(args.checkpoint))
    schedule = cfg.diffusion.build()
    batch = diffusion.generate(model, schedule, args.count, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "samples.phxt", batch)
    ext = image_extension(batch.shape[1])
    for i, sample in enumerate(batch):
        write_image(out / f"sample_{i:04d}.{ext}", sample)
    print(f"wrote {len(batch)} samples to {out} (samples.phxt + *.{ext})")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    samples_path = Path(args.samples)
    if not samples_path.exists():
        raise InputError(f"no sample tensor at {samples_path}")
    samples = read_tensor(samples_path)
    train, test = load_datasets(cfg)
    if samples.ndim != 4 or samples.shape[1:] != test.images.shape[1:]:
        raise InputError(
            f"sample shape {samples.shape} does not match reference images "
            f"{test.images.shape[1:]} per sample"
        )
    classifier = _obtain_classifier(cfg, train, args.classifier)
    report = compute_report(
        samples, test.images, classifier,
        cfg.metrics.feature_space, cfg.metrics.knn_k, cfg.metrics.is_splits,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    with open(out / "class_histogram.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "count"])
        for cls, count in sorted_histogram(report.class_histogram):
            writer.writerow([cls, count])
    print(report.to_json())
    return EXIT_OK


REPORT_COLUMNS = [
    "run_id", "strategy", "beta_pct", "alpha_pct", "drop_policy",
    "fid", "is_mean", "is_std", "precision", "recall", "tv_distance",
]


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    rows = []
    for run_dir in args.run_dirs:
        summary_path = Path(run_dir) / "summary.json"
        if not summary_path.exists():
            log.warning("skipping %s: no summary.json", run_dir)
            continue
        doc = json.loads(summary_path.read_text())
        rows.append([doc.get(col) for col in REPORT_COLUMNS])
    rows.sort(key=lambda r: str(r[0]))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    with open(report_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    print(f"wrote {report_path} ({len(rows)} runs)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default="desk",
                        help=f"preset name {preset_names()} or JSON config path")
    shared.add_argument("--seed", type=int, default=None, help="override the run seed")
    shared.add_argument("--out", default=None, help="override the output directory")
    shared.add_argument("--workers", type=int, default=1,
                        help="worker cap for client training")

    parser = argparse.ArgumentParser(
        prog="phoenix",
        description="Federated diffusion-model training simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", parents=[shared],
                       help="write the client partition plan")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("warmup", parents=[shared],
                       help="train the warmup model on the shared pool")
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("train", parents=[shared], help="run the federated rounds")
    p.add_argument("--classifier", default=None,
                   help="existing eval classifier checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[shared],
                       help="sample images from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="PHXC model checkpoint")
    p.add_argument("--count", type=int, default=16, help="number of samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[shared],
                       help="score a sample tensor against the reference set")
    p.add_argument("--samples", required=True, help="PHXT batch of samples")
    p.add_argument("--classifier", default=None,
                   help="existing eval classifier checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[shared],
                       help="tabulate run summaries into a comparison CSV")
    p.add_argument("run_dirs", nargs="+", help="run directories with summary.json")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if not hasattr(args, "classifier"):
            args.classifier = None
        return args.func(cfg, args)
    except (ConfigError, InputError, FormatError, DataFormatError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FederationError, NumericError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
