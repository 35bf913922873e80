"""Aligned dual-domain sequence datasets: container, persistence, batching, CTR examples."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataError
from .records import CdrExample, ClickSequence, Domain, Vocabulary

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "sitn-dataset/1"


@dataclass
class SequenceDataset:
    """Per-user aligned (source, target) click sequences over a shared user set.

    Planted fields are populated only by the synthetic generator and provide
    the ground truth used by interest-transfer diagnostics.
    """

    vocab_source: Vocabulary
    vocab_target: Vocabulary
    user_ids: list[str]
    source_seqs: list[ClickSequence]
    target_seqs: list[ClickSequence]
    max_len: int
    item_groups_source: Optional[dict[int, int]] = None
    item_groups_target: Optional[dict[int, int]] = None
    user_groups: Optional[dict[str, tuple[int, ...]]] = None
    num_groups: Optional[int] = None
    stats: dict = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        if not (len(self.user_ids) == len(self.source_seqs) == len(self.target_seqs)):
            raise DataError("user, source and target lists must be index-aligned")
        for seq in list(self.source_seqs) + list(self.target_seqs):
            if seq.max_len != self.max_len:
                raise DataError(f"sequence for user {seq.user_id!r} padded to {seq.max_len}, expected {self.max_len}")

    def __len__(self) -> int:
        return len(self.user_ids)

    @property
    def has_planted_groups(self) -> bool:
        return self.user_groups is not None

    def pair(self, i: int) -> tuple[ClickSequence, ClickSequence]:
        return self.source_seqs[i], self.target_seqs[i]

    def subset(self, indices: list[int], target_seqs: Optional[list[ClickSequence]] = None) -> "SequenceDataset":
        """A view over selected users, optionally with replacement target sequences."""
        return SequenceDataset(
            vocab_source=self.vocab_source,
            vocab_target=self.vocab_target,
            user_ids=[self.user_ids[i] for i in indices],
            source_seqs=[self.source_seqs[i] for i in indices],
            target_seqs=target_seqs if target_seqs is not None else [self.target_seqs[i] for i in indices],
            max_len=self.max_len,
            item_groups_source=self.item_groups_source,
            item_groups_target=self.item_groups_target,
            user_groups=self.user_groups,
            num_groups=self.num_groups,
            config_hash=self.config_hash,
        )

    def content_hash(self) -> str:
        payload = {
            "vocab_source": self.vocab_source.to_dict(),
            "vocab_target": self.vocab_target.to_dict(),
            "sequences": [
                [u, s.valid_items(), t.valid_items()]
                for u, s, t in zip(self.user_ids, self.source_seqs, self.target_seqs)
            ],
            "planted": self._planted_dict(),
            "max_len": self.max_len,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def _planted_dict(self) -> Optional[dict]:
        if not self.has_planted_groups:
            return None
        return {
            "num_groups": self.num_groups,
            "item_groups_source": {str(k): v for k, v in sorted(self.item_groups_source.items())},
            "item_groups_target": {str(k): v for k, v in sorted(self.item_groups_target.items())},
            "user_groups": {u: list(g) for u, g in sorted(self.user_groups.items())},
        }

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "vocab_source.json").write_text(json.dumps(self.vocab_source.to_dict(), sort_keys=True))
        (directory / "vocab_target.json").write_text(json.dumps(self.vocab_target.to_dict(), sort_keys=True))
        with open(directory / "sequences.jsonl", "w") as fh:
            for user, src, tgt in zip(self.user_ids, self.source_seqs, self.target_seqs):
                fh.write(json.dumps({"user": user, "source": src.valid_items(), "target": tgt.valid_items()}) + "\n")
        planted = self._planted_dict()
        if planted is not None:
            (directory / "planted.json").write_text(json.dumps(planted, sort_keys=True))
        manifest = {
            "format": DATASET_FORMAT,
            "config_hash": self.config_hash,
            "content_hash": self.content_hash(),
            "max_len": self.max_len,
            "num_users": len(self),
            "num_items_source": self.vocab_source.num_items,
            "num_items_target": self.vocab_target.num_items,
            "num_groups": self.num_groups,
            "stats": self.stats,
        }
        (directory / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "SequenceDataset":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
        if manifest.get("format") != DATASET_FORMAT:
            raise DataError(f"unknown dataset format {manifest.get('format')!r} in {directory}")
        vocab_source = Vocabulary.from_dict(json.loads((directory / "vocab_source.json").read_text()))
        vocab_target = Vocabulary.from_dict(json.loads((directory / "vocab_target.json").read_text()))
        max_len = int(manifest["max_len"])
        user_ids, source_seqs, target_seqs = [], [], []
        with open(directory / "sequences.jsonl") as fh:
            for line in fh:
                row = json.loads(line)
                user_ids.append(row["user"])
                source_seqs.append(ClickSequence.from_items(row["user"], Domain.SOURCE, row["source"], max_len))
                target_seqs.append(ClickSequence.from_items(row["user"], Domain.TARGET, row["target"], max_len))
        planted_path = directory / "planted.json"
        item_groups_source = item_groups_target = user_groups = num_groups = None
        if planted_path.exists():
            planted = json.loads(planted_path.read_text())
            num_groups = planted["num_groups"]
            item_groups_source = {int(k): v for k, v in planted["item_groups_source"].items()}
            item_groups_target = {int(k): v for k, v in planted["item_groups_target"].items()}
            user_groups = {u: tuple(g) for u, g in planted["user_groups"].items()}
        return cls(
            vocab_source=vocab_source,
            vocab_target=vocab_target,
            user_ids=user_ids,
            source_seqs=source_seqs,
            target_seqs=target_seqs,
            max_len=max_len,
            item_groups_source=item_groups_source,
            item_groups_target=item_groups_target,
            user_groups=user_groups,
            num_groups=num_groups,
            stats=manifest.get("stats", {}),
            config_hash=manifest.get("config_hash", ""),
        )


@dataclass
class SequencePairBatch:
    """One mini-batch of user-aligned dual-domain sequences: position i in both
    lists belongs to ``user_ids[i]``."""

    user_ids: list[str]
    source: list[ClickSequence]
    target: list[ClickSequence]

    def __len__(self) -> int:
        return len(self.user_ids)


def batch_iterator(
    dataset: SequenceDataset,
    batch_size: int,
    seed: int,
    drop_incomplete: bool = True,
) -> Iterator[SequencePairBatch]:
    """Seeded, user-aligned mini-batches over the dataset.

    The final short batch is dropped when ``drop_incomplete`` is set. Raises
    if that leaves no batches at all.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = list(range(len(dataset)))
    random.Random(seed).shuffle(order)
    if drop_incomplete:
        usable = len(order) - len(order) % batch_size
        order = order[:usable]
    if not order:
        raise DataError(f"batch_size {batch_size} leaves no complete batch over {len(dataset)} users")

    def generate():
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            yield SequencePairBatch(
                user_ids=[dataset.user_ids[i] for i in chunk],
                source=[dataset.source_seqs[i] for i in chunk],
                target=[dataset.target_seqs[i] for i in chunk],
            )

    return generate()


def build_stage2_examples(
    dataset: SequenceDataset,
    negatives_per_positive: int,
    holdout_fraction: float,
    seed: int,
) -> tuple[list[CdrExample], list[CdrExample]]:
    """Hold out each user's last target click as the positive candidate.

    The remaining target clicks become the history; ``negatives_per_positive``
    never-clicked target items are drawn uniformly as label-0 candidates.
    Users are split train/test by ``holdout_fraction`` before sampling.
    """
    if negatives_per_positive < 0:
        raise ConfigError("negatives_per_positive must be >= 0")
    if not 0 <= holdout_fraction < 1:
        raise ConfigError("holdout_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    num_items = dataset.vocab_target.num_items

    retained = [i for i in range(len(dataset)) if dataset.target_seqs[i].length >= 2]
    if not retained:
        raise DataError("no user has a target sequence of length >= 2")
    order = list(retained)
    random.Random(seed).shuffle(order)
    n_test = int(round(holdout_fraction * len(order)))
    test_users = set(order[:n_test])

    train: list[CdrExample] = []
    test: list[CdrExample] = []
    for i in retained:
        user = dataset.user_ids[i]
        source_seq = dataset.source_seqs[i]
        full_history = dataset.target_seqs[i].valid_items()
        positive = full_history[-1]
        history_seq = ClickSequence.from_items(user, Domain.TARGET, full_history[:-1], dataset.max_len)
        clicked = set(full_history)
        candidates_pool = np.setdiff1d(np.arange(1, num_items + 1), np.fromiter(clicked, dtype=np.int64))
        bucket = test if i in test_users else train
        bucket.append(CdrExample(user, source_seq, history_seq, positive, 1))
        if negatives_per_positive > 0:
            if len(candidates_pool) < negatives_per_positive:
                raise DataError(f"user {user!r} leaves fewer unclicked items than negatives_per_positive")
            for neg in rng.choice(candidates_pool, size=negatives_per_positive, replace=False):
                bucket.append(CdrExample(user, source_seq, history_seq, int(neg), 0))
    return train, test
