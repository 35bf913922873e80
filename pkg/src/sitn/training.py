"""Two-stage training: self-supervised pretraining, then CTR fine-tuning.

Stage 1 optimizes the encoders, cluster matrices and fusion MLPs against the
contrastive objective. Stage 2 initializes fresh sequence encoders from the
stage-1 checkpoint and trains them jointly with a target-attention CTR head;
cluster matrices do not participate in stage 2.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch
from torch import Tensor, nn

from .config import ExperimentConfig, config_hash
from .contrast import GranularitySet, ssl_loss
from .datasets import SequenceDataset, batch_iterator
from .encoder import DomainEncoder, target_attention
from .errors import CheckpointError, ConfigError, DataError, ShapeMismatchError, TrainingAborted
from .records import CdrExample, ClickSequence

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sitn-checkpoint/1"
PROB_EPSILON = 1e-7


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    """Stable sub-stream seed for (run seed, purpose, epoch)."""
    return (seed * 1_000_003 + index * 97 + zlib.crc32(tag.encode())) % 2**31


def collate_sequences(seqs: Sequence[ClickSequence]) -> tuple[Tensor, Tensor]:
    items = torch.tensor([s.item_indices for s in seqs], dtype=torch.long)
    mask = torch.tensor([s.mask for s in seqs], dtype=torch.bool)
    return items, mask


def collate_examples(examples: Sequence[CdrExample], dtype: torch.dtype) -> dict[str, Tensor]:
    src_items, src_mask = collate_sequences([e.source_seq for e in examples])
    tgt_items, tgt_mask = collate_sequences([e.target_seq for e in examples])
    return {
        "src_items": src_items,
        "src_mask": src_mask,
        "tgt_items": tgt_items,
        "tgt_mask": tgt_mask,
        "candidates": torch.tensor([e.candidate_item for e in examples], dtype=torch.long),
        "labels": torch.tensor([e.label for e in examples], dtype=dtype),
    }


def build_encoder(vocab, cfg: ExperimentConfig) -> DomainEncoder:
    return DomainEncoder(
        num_items=vocab.num_items,
        num_categories=vocab.num_categories,
        item_categories=vocab.category_table(),
        embed_dim=cfg.model.embed_dim,
        num_heads=cfg.model.num_heads,
        max_len=cfg.model.max_len,
        use_positional=cfg.model.use_positional,
        num_layers=cfg.model.num_layers,
        layer_norm=cfg.model.layer_norm,
        residual=cfg.model.residual,
        dtype=cfg.model.torch_dtype,
    )


def build_pretrain_models(dataset: SequenceDataset, cfg: ExperimentConfig):
    """Seeded construction of both encoders and the granularity set (order is fixed)."""
    torch.manual_seed(cfg.seed)
    encoder_source = build_encoder(dataset.vocab_source, cfg)
    encoder_target = build_encoder(dataset.vocab_target, cfg)
    sizes = cfg.spaces.cluster_sizes if cfg.train.use_mg else (cfg.spaces.single_space_clusters,)
    spaces = GranularitySet.from_sizes(sizes, cfg.model.embed_dim, cfg.spaces.top_k, dtype=cfg.model.torch_dtype)
    return encoder_source, encoder_target, spaces


class CtrModel(nn.Module):
    """Stage-2 scorer: encode both histories, read them with the candidate as query,
    then feed (source readout, target readout, candidate embedding) to an MLP."""

    def __init__(self, encoder_source: DomainEncoder, encoder_target: DomainEncoder, dtype: torch.dtype = torch.float64):
        super().__init__()
        dim = encoder_source.embed_dim
        self.encoder_source = encoder_source
        self.encoder_target = encoder_target
        self.head = nn.Sequential(nn.Linear(3 * dim, dim), nn.Tanh(), nn.Linear(dim, 1))
        self.head.to(dtype)

    def logits(self, src_items, src_mask, tgt_items, tgt_mask, candidates) -> Tensor:
        states_source = self.encoder_source(src_items, src_mask).states
        states_target = self.encoder_target(tgt_items, tgt_mask).states
        candidate_emb = self.encoder_target.embed_items(candidates)
        user_source = target_attention(candidate_emb, states_source, src_mask)
        user_target = target_attention(candidate_emb, states_target, tgt_mask)
        packed = torch.cat([user_source, user_target, candidate_emb], dim=1)
        return self.head(packed).squeeze(1)

    def forward(self, src_items, src_mask, tgt_items, tgt_mask, candidates) -> Tensor:
        return torch.sigmoid(self.logits(src_items, src_mask, tgt_items, tgt_mask, candidates))


def build_ctr_model(dataset: SequenceDataset, cfg: ExperimentConfig) -> CtrModel:
    encoder_source = build_encoder(dataset.vocab_source, cfg)
    encoder_target = build_encoder(dataset.vocab_target, cfg)
    return CtrModel(encoder_source, encoder_target, dtype=cfg.model.torch_dtype)


def bce_loss(label: int, prob: float) -> float:
    """Cross-entropy of one prediction, with the probability clamped away from 0 and 1."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    p = min(max(float(prob), PROB_EPSILON), 1.0 - PROB_EPSILON)
    return -(label * math.log(p) + (1 - label) * math.log(1.0 - p))


def bce_losses(labels: Tensor, probs: Tensor) -> Tensor:
    if not ((labels == 0) | (labels == 1)).all():
        raise ValueError("labels must be 0 or 1")
    p = probs.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p))


def predict_ctr(model: CtrModel, example: CdrExample) -> float:
    """Deterministic click probability for a single example."""
    batch = collate_examples([example], next(model.head.parameters()).dtype)
    with torch.no_grad():
        prob = model(batch["src_items"], batch["src_mask"], batch["tgt_items"], batch["tgt_mask"], batch["candidates"])
    return float(prob[0])


class GuardedAdam:
    """Adam with bias correction that refuses to apply non-finite gradients.

    A step with any non-finite gradient is skipped, counted, and the offending
    parameter names recorded.
    """

    def __init__(self, named_parameters: Iterable[tuple[str, nn.Parameter]], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.named = [(name, p) for name, p in named_parameters if p.requires_grad]
        if not self.named:
            raise ConfigError("no trainable parameters")
        self.opt = torch.optim.Adam([p for _, p in self.named], lr=lr, betas=betas, eps=eps)
        self.skipped_steps = 0
        self.last_nonfinite: list[str] = []

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self) -> bool:
        bad = [name for name, p in self.named if p.grad is not None and not torch.isfinite(p.grad).all()]
        if bad:
            self.skipped_steps += 1
            self.last_nonfinite = bad
            log.warning("skipping optimizer step: non-finite gradient in %s", ", ".join(bad))
            return False
        self.opt.step()
        return True


class StepLogger:
    """Collects per-step records and optionally appends them to a JSONL file."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, **payload) -> None:
        self.records.append(payload)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(payload) + "\n")


@dataclass
class Checkpoint:
    """Named tensor groups plus enough metadata to validate a restore."""

    tensors: dict[str, dict[str, Tensor]]
    config_hash: str = ""
    step: int = 0
    metrics: dict = field(default_factory=dict)

    @classmethod
    def from_modules(cls, modules: dict[str, nn.Module], config_hash: str, step: int, metrics: dict) -> "Checkpoint":
        tensors = {
            group: {name: tensor.detach().clone() for name, tensor in module.state_dict().items()}
            for group, module in modules.items()
        }
        return cls(tensors=tensors, config_hash=config_hash, step=step, metrics=metrics)

    def restore_module(self, group: str, module: nn.Module, expected_hash: Optional[str] = None) -> None:
        if group not in self.tensors:
            raise ShapeMismatchError(f"checkpoint has no tensor group {group!r}")
        if expected_hash is not None and self.config_hash and expected_hash != self.config_hash:
            log.warning("checkpoint config hash %s does not match current config %s", self.config_hash[:12], expected_hash[:12])
        state = self.tensors[group]
        current = module.state_dict()
        if set(state) != set(current):
            missing = sorted(set(current) - set(state))
            extra = sorted(set(state) - set(current))
            raise ShapeMismatchError(f"tensor group {group!r}: missing {missing}, unexpected {extra}")
        for name, tensor in state.items():
            if tuple(tensor.shape) != tuple(current[name].shape):
                raise ShapeMismatchError(
                    f"{group}.{name}: checkpoint shape {tuple(tensor.shape)} vs model shape {tuple(current[name].shape)}"
                )
        module.load_state_dict(state)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config_hash": checkpoint.config_hash,
            "step": checkpoint.step,
            "metrics": checkpoint.metrics,
            "tensors": checkpoint.tensors,
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a recognized checkpoint file")
    return Checkpoint(
        tensors=payload["tensors"],
        config_hash=payload.get("config_hash", ""),
        step=int(payload.get("step", 0)),
        metrics=payload.get("metrics", {}),
    )


def _named_parameters(modules: dict[str, nn.Module]) -> list[tuple[str, nn.Parameter]]:
    named = []
    for group, module in modules.items():
        named.extend((f"{group}.{name}", p) for name, p in module.named_parameters())
    return named


def pretrain(dataset: SequenceDataset, cfg: ExperimentConfig, log_path: Optional[str | Path] = None) -> Checkpoint:
    """Stage 1: optimize encoders, clusters and fusion MLPs against the SSL objective.

    Ablation flags select which loss components contribute; with every
    component disabled the parameters stay at their seeded initialization.
    """
    cfg.validate()
    encoder_source, encoder_target, spaces = build_pretrain_models(dataset, cfg)
    modules = {"encoder_source": encoder_source, "encoder_target": encoder_target, "spaces": spaces}
    run_hash = config_hash(cfg)
    train_cfg = cfg.train
    optimizer = GuardedAdam(
        _named_parameters(modules),
        lr=train_cfg.stage1_lr,
        betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
        eps=train_cfg.adam_eps,
    )
    logger = StepLogger(log_path)
    history: list[dict] = []
    step = 0
    start = time.perf_counter()
    for epoch in range(train_cfg.stage1_epochs):
        if train_cfg.stage1_max_steps is not None and step >= train_cfg.stage1_max_steps:
            break
        batches = batch_iterator(
            dataset, train_cfg.batch_size, seed=derive_seed(cfg.seed, "stage1-shuffle", epoch),
            drop_incomplete=train_cfg.drop_incomplete,
        )
        for batch in batches:
            if train_cfg.stage1_max_steps is not None and step >= train_cfg.stage1_max_steps:
                break
            src_items, src_mask = collate_sequences(batch.source)
            tgt_items, tgt_mask = collate_sequences(batch.target)
            inst_source = encoder_source(src_items, src_mask).pooled
            inst_target = encoder_target(tgt_items, tgt_mask).pooled
            parts = ssl_loss(
                inst_source,
                inst_target,
                spaces,
                train_cfg.temperature,
                use_i2i=train_cfg.use_i2i,
                use_i2c=train_cfg.use_i2c,
                use_mv=train_cfg.use_mv,
            )
            if not torch.isfinite(parts.total):
                raise TrainingAborted(
                    f"non-finite pretraining loss at step {step}",
                    checkpoint=Checkpoint.from_modules(modules, run_hash, step, {"loss_history": history}),
                )
            if parts.total.requires_grad:
                optimizer.zero_grad()
                parts.total.backward()
                optimizer.step()
            entry = {
                "stage": 1,
                "step": step,
                "epoch": epoch,
                "loss": float(parts.total.detach()),
                "i2i": float(parts.i2i.detach()),
                "i2c": float(parts.i2c.detach()),
                "wall_time": time.perf_counter() - start,
            }
            history.append({"step": step, "loss": entry["loss"], "i2i": entry["i2i"], "i2c": entry["i2c"]})
            logger.record(**entry)
            step += 1
    metrics = {"loss_history": history, "skipped_steps": optimizer.skipped_steps}
    return Checkpoint.from_modules(modules, run_hash, step, metrics)


def finetune(
    train_examples: Sequence[CdrExample],
    dataset: SequenceDataset,
    pretrained: Checkpoint,
    cfg: ExperimentConfig,
    log_path: Optional[str | Path] = None,
) -> Checkpoint:
    """Stage 2: CTR training with encoders initialized from the stage-1 checkpoint."""
    cfg.validate()
    if not train_examples:
        raise DataError("no training examples")
    torch.manual_seed(derive_seed(cfg.seed, "stage2-init"))
    model = build_ctr_model(dataset, cfg)
    run_hash = config_hash(cfg)
    pretrained.restore_module("encoder_source", model.encoder_source, expected_hash=run_hash)
    pretrained.restore_module("encoder_target", model.encoder_target, expected_hash=run_hash)
    if cfg.train.freeze_encoders:
        for p in model.encoder_source.parameters():
            p.requires_grad_(False)
        for p in model.encoder_target.parameters():
            p.requires_grad_(False)
    train_cfg = cfg.train
    optimizer = GuardedAdam(
        list(model.named_parameters()),
        lr=train_cfg.stage2_lr,
        betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
        eps=train_cfg.adam_eps,
    )
    logger = StepLogger(log_path)
    history: list[dict] = []
    dtype = cfg.model.torch_dtype
    modules = {"encoder_source": model.encoder_source, "encoder_target": model.encoder_target, "ctr_head": model.head}
    step = 0
    start = time.perf_counter()
    order = list(range(len(train_examples)))
    for epoch in range(train_cfg.stage2_epochs):
        random.Random(derive_seed(cfg.seed, "stage2-shuffle", epoch)).shuffle(order)
        for lo in range(0, len(order), train_cfg.batch_size):
            chunk = [train_examples[i] for i in order[lo : lo + train_cfg.batch_size]]
            batch = collate_examples(chunk, dtype)
            probs = model(batch["src_items"], batch["src_mask"], batch["tgt_items"], batch["tgt_mask"], batch["candidates"])
            loss = bce_losses(batch["labels"], probs).sum()
            if not torch.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite fine-tuning loss at step {step}",
                    checkpoint=Checkpoint.from_modules(modules, run_hash, step, {"loss_history": history}),
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            entry = {
                "stage": 2,
                "step": step,
                "epoch": epoch,
                "loss": float(loss.detach()),
                "mean_bce": float(loss.detach()) / len(chunk),
                "wall_time": time.perf_counter() - start,
            }
            history.append({"step": step, "loss": entry["loss"], "mean_bce": entry["mean_bce"]})
            logger.record(**entry)
            step += 1
    metrics = {"loss_history": history, "skipped_steps": optimizer.skipped_steps}
    return Checkpoint.from_modules(modules, run_hash, step, metrics)


def ctr_model_from_checkpoint(dataset: SequenceDataset, cfg: ExperimentConfig, checkpoint: Checkpoint) -> CtrModel:
    """Rebuild and restore a stage-2 model for scoring."""
    torch.manual_seed(derive_seed(cfg.seed, "stage2-init"))
    model = build_ctr_model(dataset, cfg)
    checkpoint.restore_module("encoder_source", model.encoder_source, expected_hash=config_hash(cfg))
    checkpoint.restore_module("encoder_target", model.encoder_target, expected_hash=config_hash(cfg))
    checkpoint.restore_module("ctr_head", model.head, expected_hash=config_hash(cfg))
    return model


def pretrained_modules_from_checkpoint(dataset: SequenceDataset, cfg: ExperimentConfig, checkpoint: Checkpoint):
    """Rebuild stage-1 encoders and interest spaces from a checkpoint."""
    encoder_source, encoder_target, spaces = build_pretrain_models(dataset, cfg)
    expected = config_hash(cfg)
    checkpoint.restore_module("encoder_source", encoder_source, expected_hash=expected)
    checkpoint.restore_module("encoder_target", encoder_target, expected_hash=expected)
    checkpoint.restore_module("spaces", spaces, expected_hash=expected)
    return encoder_source, encoder_target, spaces
