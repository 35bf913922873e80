"""End-to-end experiment orchestration: variants, full runs, and the ablation matrix."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, config_hash
from .datasets import SequenceDataset, build_stage2_examples
from .errors import ConfigError
from .evaluation import MetricsReport, evaluate_model, interest_alignment
from .ingest import ingest_amazon_files
from .records import CdrExample
from .synthetic import generate_synthetic
from .training import (
    Checkpoint,
    ctr_model_from_checkpoint,
    finetune,
    pretrain,
    pretrained_modules_from_checkpoint,
)

log = logging.getLogger(__name__)

# Each variant flips ablation flags off; names say what is removed.
VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_i2i": {"use_i2i": False},
    "no_i2c": {"use_i2c": False},
    "no_i2c_i2i": {"use_i2i": False, "use_i2c": False},
    "no_mv": {"use_mv": False},
    "no_mg": {"use_mg": False},
    "no_mg_mv": {"use_mv": False, "use_mg": False},
}
CONTRAST_TABLE = ("no_i2c_i2i", "no_i2c", "no_i2i", "full")
GRANULARITY_TABLE = ("no_mg_mv", "no_mg", "no_mv", "full")


def apply_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; known: {', '.join(sorted(VARIANTS))}")
    train = dataclasses.replace(cfg.train, **VARIANTS[variant])
    return dataclasses.replace(cfg, train=train)


def dataset_from_config(cfg: ExperimentConfig) -> SequenceDataset:
    cfg.validate()
    if cfg.data.kind == "synthetic":
        synth = dataclasses.replace(cfg.data.synthetic, max_len=cfg.model.max_len)
        dataset = generate_synthetic(synth)
    else:
        amazon = cfg.data.amazon
        dataset = ingest_amazon_files(
            amazon.source_path,
            amazon.target_path,
            min_rating=amazon.min_rating,
            min_source_len=amazon.min_source_len,
            max_len=amazon.max_len,
        )
        if dataset.max_len != cfg.model.max_len:
            raise ConfigError(
                f"data.amazon.max_len ({dataset.max_len}) must equal model.max_len ({cfg.model.max_len})"
            )
    dataset.config_hash = config_hash(cfg)
    return dataset


def pretrain_view(dataset: SequenceDataset, examples: Sequence[CdrExample]) -> SequenceDataset:
    """Restrict the dataset to the examples' users, with held-out clicks removed.

    Target histories come from the examples themselves, so no held-out positive
    ever enters pretraining.
    """
    index_of = {u: i for i, u in enumerate(dataset.user_ids)}
    seen: dict[str, CdrExample] = {}
    for example in examples:
        seen.setdefault(example.user_id, example)
    users = sorted(seen, key=index_of.__getitem__)
    indices = [index_of[u] for u in users]
    return dataset.subset(indices, target_seqs=[seen[u].target_seq for u in users])


@dataclass
class ExperimentResult:
    report: MetricsReport
    stage1: Checkpoint
    stage2: Checkpoint
    train_examples: list[CdrExample]
    test_examples: list[CdrExample]
    run_cfg: ExperimentConfig


def run_experiment(
    dataset: SequenceDataset,
    cfg: ExperimentConfig,
    variant: str = "full",
    seed: Optional[int] = None,
    log_dir: Optional[str | Path] = None,
) -> ExperimentResult:
    """Train one variant end to end and evaluate it on the held-out users.

    The train/test split and the report's config hash depend only on the base
    config and seed, so variants at the same seed are directly comparable.
    """
    seed = cfg.seed if seed is None else seed
    base_hash = config_hash(cfg)
    run_cfg = dataclasses.replace(apply_variant(cfg, variant), seed=seed)
    start = time.perf_counter()
    train_examples, test_examples = build_stage2_examples(
        dataset, cfg.train.negatives_per_positive, cfg.train.holdout_fraction, seed=seed
    )
    if not test_examples:
        raise ConfigError("holdout_fraction left no test examples; increase it or the user count")
    view = pretrain_view(dataset, train_examples)
    log_dir = Path(log_dir) if log_dir else None
    stage1_log = log_dir / f"stage1_{variant}_s{seed}.jsonl" if log_dir else None
    stage2_log = log_dir / f"stage2_{variant}_s{seed}.jsonl" if log_dir else None
    stage1 = pretrain(view, run_cfg, log_path=stage1_log)
    stage2 = finetune(train_examples, dataset, stage1, run_cfg, log_path=stage2_log)
    model = ctr_model_from_checkpoint(dataset, run_cfg, stage2)
    report = evaluate_model(
        model,
        test_examples,
        variant=variant,
        seed=seed,
        dataset_hash=dataset.content_hash(),
        config_hash=base_hash,
        runtime_seconds=time.perf_counter() - start,
    )
    return ExperimentResult(report, stage1, stage2, train_examples, test_examples, run_cfg)


def run_ablations(
    dataset: SequenceDataset,
    cfg: ExperimentConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
    log_dir: Optional[str | Path] = None,
) -> list[MetricsReport]:
    """Train and evaluate every (variant, seed) pair from fresh seeded initializations."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s): {', '.join(unknown)}")
    reports = []
    for seed in seeds:
        for variant in variants:
            result = run_experiment(dataset, cfg, variant=variant, seed=seed, log_dir=log_dir)
            log.info(
                "variant=%s seed=%d auc=%.4f logloss=%.4f",
                variant, seed, result.report.auc, result.report.logloss,
            )
            reports.append(result.report)
    return reports


def alignment_from_checkpoint(dataset: SequenceDataset, cfg: ExperimentConfig, stage1: Checkpoint) -> list[float]:
    """Interest-alignment score of every trained interest space against planted groups."""
    encoder_source, encoder_target, spaces = pretrained_modules_from_checkpoint(dataset, cfg, stage1)
    return [interest_alignment(encoder_source, encoder_target, space, dataset) for space in spaces]
