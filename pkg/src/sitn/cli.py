"""Command-line entry points for the full pipeline.

Every command reads one YAML config (plus ``--override key.path=value``
assignments), writes its artifacts into one experiment directory, and records
a manifest embedding the config hash so a whole pipeline can be checked for
consistency with ``sitn verify``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, config_hash, load_config, save_config
from .datasets import SequenceDataset, build_stage2_examples
from .errors import ConfigError
from .evaluation import evaluate_model, save_reports
from .experiment import (
    VARIANTS,
    alignment_from_checkpoint,
    dataset_from_config,
    pretrain_view,
    run_ablations,
    run_experiment,
)
from .training import (
    ctr_model_from_checkpoint,
    finetune,
    load_checkpoint,
    pretrain,
    pretrained_modules_from_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "SITN_OUT_ROOT"


class CliParser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise ConfigError(message)


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", help="YAML experiment config", required=False)
    parser.add_argument("--out", help=f"experiment directory (default: ${OUT_ROOT_ENV}/<config stem>)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--override", action="append", default=[], metavar="KEY.PATH=VALUE",
        help="config override, repeatable (e.g. train.stage1_epochs=3)",
    )
    parser.set_defaults(config_required=config_required)


def build_parser() -> CliParser:
    parser = CliParser(prog="sitn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, extra in (
        ("synth", cmd_synth, "generate a planted synthetic dataset"),
        ("ingest", cmd_ingest, "ingest raw dual-domain review logs"),
        ("pretrain", cmd_pretrain, "stage-1 self-supervised pretraining"),
        ("finetune", cmd_finetune, "stage-2 CTR fine-tuning + held-out metrics"),
        ("evaluate", cmd_evaluate, "evaluate an existing stage-2 checkpoint"),
        ("ablate", cmd_ablate, "train and evaluate ablation variants"),
        ("project", cmd_project, "export 2-D projections of the interest clusters"),
    ):
        p = sub.add_parser(name, help=extra)
        _add_common(p)
        p.set_defaults(func=func)
        if name == "ablate":
            p.add_argument("--variant", action="append", default=[], choices=sorted(VARIANTS),
                           help="variant to run, repeatable (default: config ablation.variants)")
        if name == "project":
            p.add_argument("--projector", choices=("pca", "tsne"), default="pca")

    p = sub.add_parser("verify", help="check config-hash consistency across an experiment directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify, config_required=False)
    return parser


def _resolve_out(args) -> Path:
    if args.out:
        return Path(args.out)
    if not getattr(args, "config", None):
        raise ConfigError("--out is required when no --config is given")
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / Path(args.config).stem


def _resolve_config(args, out_dir: Path) -> ExperimentConfig:
    path = getattr(args, "config", None) or (out_dir / "config.yaml")
    if not Path(path).exists():
        raise ConfigError(f"no config given and no snapshot at {path}")
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(path, overrides=overrides)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, inputs: dict, outputs: dict) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = out_dir / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _prepare(args, command: str) -> tuple[Path, ExperimentConfig]:
    out_dir = _resolve_out(args)
    cfg = _resolve_config(args, out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")
    return out_dir, cfg


def _load_dataset(out_dir: Path, cfg: ExperimentConfig) -> SequenceDataset:
    data_dir = out_dir / "dataset"
    if data_dir.exists():
        dataset = SequenceDataset.load(data_dir)
        if dataset.config_hash and dataset.config_hash != config_hash(cfg):
            log.warning("dataset at %s was built from a different config", data_dir)
        return dataset
    return dataset_from_config(cfg)


def cmd_synth(args) -> int:
    out_dir, cfg = _prepare(args, "synth")
    if cfg.data.kind != "synthetic":
        raise ConfigError("synth requires data.kind=synthetic")
    dataset = dataset_from_config(cfg)
    dataset.save(out_dir / "dataset")
    _write_manifest(out_dir, "synth", cfg, inputs={}, outputs={"dataset": dataset.content_hash()})
    print(f"dataset: {len(dataset)} users, {dataset.vocab_source.num_items}/{dataset.vocab_target.num_items} items -> {out_dir / 'dataset'}")
    return 0


def cmd_ingest(args) -> int:
    out_dir, cfg = _prepare(args, "ingest")
    if cfg.data.kind != "amazon":
        raise ConfigError("ingest requires data.kind=amazon")
    dataset = dataset_from_config(cfg)
    dataset.save(out_dir / "dataset")
    inputs = {
        "source": _file_digest(Path(cfg.data.amazon.source_path)),
        "target": _file_digest(Path(cfg.data.amazon.target_path)),
    }
    _write_manifest(out_dir, "ingest", cfg, inputs=inputs, outputs={"dataset": dataset.content_hash()})
    print(f"ingested {len(dataset)} shared users -> {out_dir / 'dataset'}")
    print(json.dumps(dataset.stats, indent=2, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    out_dir, cfg = _prepare(args, "pretrain")
    dataset = _load_dataset(out_dir, cfg)
    train_examples, _ = build_stage2_examples(
        dataset, cfg.train.negatives_per_positive, cfg.train.holdout_fraction, seed=cfg.seed
    )
    view = pretrain_view(dataset, train_examples)
    checkpoint = pretrain(view, cfg, log_path=out_dir / "logs" / "stage1.jsonl")
    path = save_checkpoint(checkpoint, out_dir / "stage1.ckpt")
    _write_manifest(
        out_dir, "pretrain", cfg,
        inputs={"dataset": dataset.content_hash()},
        outputs={"stage1_steps": checkpoint.step},
    )
    final = checkpoint.metrics["loss_history"][-1]["loss"] if checkpoint.metrics["loss_history"] else float("nan")
    print(f"stage-1 checkpoint after {checkpoint.step} steps (final loss {final:.4f}) -> {path}")
    return 0


def cmd_finetune(args) -> int:
    out_dir, cfg = _prepare(args, "finetune")
    dataset = _load_dataset(out_dir, cfg)
    stage1 = load_checkpoint(out_dir / "stage1.ckpt")
    train_examples, test_examples = build_stage2_examples(
        dataset, cfg.train.negatives_per_positive, cfg.train.holdout_fraction, seed=cfg.seed
    )
    checkpoint = finetune(train_examples, dataset, stage1, cfg, log_path=out_dir / "logs" / "stage2.jsonl")
    path = save_checkpoint(checkpoint, out_dir / "stage2.ckpt")
    outputs: dict = {"stage2_steps": checkpoint.step}
    if test_examples:
        model = ctr_model_from_checkpoint(dataset, cfg, checkpoint)
        report = evaluate_model(model, test_examples, variant="full", seed=cfg.seed,
                                dataset_hash=dataset.content_hash(), config_hash=config_hash(cfg))
        save_reports([report], out_dir / "metrics" / "finetune_eval.jsonl", out_dir / "metrics" / "finetune_eval.txt")
        outputs.update({"auc": report.auc, "logloss": report.logloss})
        print(f"held-out auc={report.auc:.4f} logloss={report.logloss:.4f}")
    _write_manifest(out_dir, "finetune", cfg, inputs={"dataset": dataset.content_hash()}, outputs=outputs)
    print(f"stage-2 checkpoint after {checkpoint.step} steps -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    out_dir, cfg = _prepare(args, "evaluate")
    dataset = _load_dataset(out_dir, cfg)
    checkpoint = load_checkpoint(out_dir / "stage2.ckpt")
    model = ctr_model_from_checkpoint(dataset, cfg, checkpoint)
    _, test_examples = build_stage2_examples(
        dataset, cfg.train.negatives_per_positive, cfg.train.holdout_fraction, seed=cfg.seed
    )
    if not test_examples:
        raise ConfigError("holdout_fraction leaves no test examples to evaluate")
    report = evaluate_model(model, test_examples, variant="full", seed=cfg.seed,
                            dataset_hash=dataset.content_hash(), config_hash=config_hash(cfg))
    save_reports([report], out_dir / "metrics" / "evaluate.jsonl", out_dir / "metrics" / "evaluate.txt")
    _write_manifest(out_dir, "evaluate", cfg, inputs={"dataset": dataset.content_hash()},
                    outputs={"auc": report.auc, "logloss": report.logloss})
    print(f"auc={report.auc:.4f} logloss={report.logloss:.4f}")
    return 0


def cmd_ablate(args) -> int:
    out_dir, cfg = _prepare(args, "ablate")
    variants = tuple(args.variant) if args.variant else cfg.ablation.variants
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s): {', '.join(unknown)}")
    dataset = _load_dataset(out_dir, cfg)
    seeds = (cfg.seed,) if args.seed is not None else cfg.ablation_seeds()
    reports = run_ablations(dataset, cfg, variants, seeds, log_dir=out_dir / "logs")
    save_reports(reports, out_dir / "reports" / "ablation.jsonl", out_dir / "reports" / "ablation.txt")
    _write_manifest(out_dir, "ablate", cfg, inputs={"dataset": dataset.content_hash()},
                    outputs={"variants": list(variants), "seeds": list(seeds)})
    print((out_dir / "reports" / "ablation.txt").read_text(), end="")
    return 0


def cmd_project(args) -> int:
    out_dir, cfg = _prepare(args, "project")
    dataset = _load_dataset(out_dir, cfg)
    stage1 = load_checkpoint(out_dir / "stage1.ckpt")
    _, _, spaces = pretrained_modules_from_checkpoint(dataset, cfg, stage1)
    from .evaluation import export_projection

    written = []
    for i, space in enumerate(spaces):
        export = export_projection(space, projector=args.projector, seed=cfg.seed)
        path = export.write_csv(out_dir / "projections" / f"space{i}_{args.projector}.csv", config_hash(cfg))
        written.append(str(path))
    if dataset.has_planted_groups:
        scores = alignment_from_checkpoint(dataset, cfg, stage1)
        print("interest alignment per space:", ", ".join(f"{s:.3f}" for s in scores))
    _write_manifest(out_dir, "project", cfg, inputs={"dataset": dataset.content_hash()},
                    outputs={"files": written})
    print("\n".join(written))
    return 0


def _hashes_in_dir(out_dir: Path) -> dict[str, str]:
    found: dict[str, str] = {}
    for manifest in sorted((out_dir / "manifests").glob("*.json")) if (out_dir / "manifests").exists() else []:
        found[str(manifest.relative_to(out_dir))] = json.loads(manifest.read_text())["config_hash"]
    dataset_manifest = out_dir / "dataset" / "manifest.json"
    if dataset_manifest.exists():
        found["dataset/manifest.json"] = json.loads(dataset_manifest.read_text())["config_hash"]
    for ckpt in sorted(out_dir.glob("*.ckpt")):
        found[ckpt.name] = load_checkpoint(ckpt).config_hash
    for report_file in sorted(out_dir.glob("metrics/*.jsonl")) + sorted(out_dir.glob("reports/*.jsonl")):
        with open(report_file) as fh:
            hashes = {json.loads(line)["config_hash"] for line in fh if line.strip()}
        for i, h in enumerate(sorted(hashes)):
            found[f"{report_file.relative_to(out_dir)}[{i}]"] = h
    for csv in sorted(out_dir.glob("projections/*.csv")):
        header = csv.read_text().splitlines()[0]
        if "config_hash=" in header:
            found[str(csv.relative_to(out_dir))] = header.split("config_hash=")[1].strip()
    return found


def cmd_verify(args) -> int:
    out_dir = Path(args.out)
    if not out_dir.exists():
        raise ConfigError(f"no experiment directory at {out_dir}")
    found = _hashes_in_dir(out_dir)
    if not found:
        raise ConfigError(f"no hashed artifacts under {out_dir}")
    values = set(found.values())
    for name, value in sorted(found.items()):
        print(f"{value[:12]}  {name}")
    if len(values) > 1:
        print(f"INCONSISTENT: {len(values)} distinct config hashes", file=sys.stderr)
        return 2
    print(f"consistent: {len(found)} artifacts share config hash {next(iter(values))[:12]}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SITN_LOG_LEVEL", "INFO"), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
