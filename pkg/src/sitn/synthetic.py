"""Synthetic dual-domain datasets with planted interest groups.

Every interest group owns a disjoint item pool in each domain, and a user's
clicks land inside their own groups with probability ``1 - noise``. The planted
item/user/group tables are returned with the dataset so downstream diagnostics
can score how much of that structure a trained model recovered.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datasets import SequenceDataset
from .errors import ConfigError
from .records import ClickSequence, Domain, SyntheticConfig, Vocabulary


def _build_vocab(domain: Domain, prefix: str, num_groups: int, items_per_group: int) -> tuple[Vocabulary, dict[int, int]]:
    vocab = Vocabulary(domain)
    item_groups: dict[int, int] = {}
    for group in range(num_groups):
        for j in range(items_per_group):
            idx = vocab.add_item(f"{prefix}{group:03d}_{j:04d}", category=f"g{group:03d}")
            item_groups[idx] = group
    return vocab, item_groups


def _sample_sequence(
    rng: np.random.Generator,
    length: int,
    own_pool: np.ndarray,
    other_pool: np.ndarray,
    noise: float,
) -> np.ndarray:
    """Draw ``length`` distinct items, off-group positions flagged iid with rate ``noise``."""
    if other_pool.size == 0:
        return rng.choice(own_pool, size=length, replace=False)
    off = rng.random(length) < noise
    n_off = int(off.sum())
    items = np.empty(length, dtype=np.int64)
    items[~off] = rng.choice(own_pool, size=length - n_off, replace=False)
    items[off] = rng.choice(other_pool, size=n_off, replace=False)
    return items


def generate_synthetic(config: SyntheticConfig) -> SequenceDataset:
    """Generate an aligned dual-domain dataset with planted interest groups.

    Deterministic in ``config.seed``: the same config reproduces the dataset
    bit for bit.
    """
    config.validate()
    own_size_src = config.items_per_group_source * config.interests_per_user
    own_size_tgt = config.items_per_group_target * config.interests_per_user
    if config.source_len_range[1] > own_size_src or config.effective_target_range()[1] > own_size_tgt:
        raise ConfigError("sequence length range exceeds the items owned by a user's groups")

    rng = np.random.default_rng(config.seed)
    vocab_source, item_groups_source = _build_vocab(
        Domain.SOURCE, "src_g", config.num_groups, config.items_per_group_source
    )
    vocab_target, item_groups_target = _build_vocab(
        Domain.TARGET, "tgt_g", config.num_groups, config.items_per_group_target
    )
    pools_src = [
        np.arange(1 + g * config.items_per_group_source, 1 + (g + 1) * config.items_per_group_source)
        for g in range(config.num_groups)
    ]
    pools_tgt = [
        np.arange(1 + g * config.items_per_group_target, 1 + (g + 1) * config.items_per_group_target)
        for g in range(config.num_groups)
    ]
    all_src = np.arange(1, vocab_source.num_items + 1)
    all_tgt = np.arange(1, vocab_target.num_items + 1)

    max_len = config.effective_max_len()
    user_ids, source_seqs, target_seqs = [], [], []
    user_groups: dict[str, tuple[int, ...]] = {}
    src_lo, src_hi = config.source_len_range
    tgt_lo, tgt_hi = config.effective_target_range()

    for i in range(config.num_users):
        user = f"u{i:06d}"
        groups = tuple(sorted(rng.choice(config.num_groups, size=config.interests_per_user, replace=False).tolist()))
        user_groups[user] = groups
        own_src = np.concatenate([pools_src[g] for g in groups])
        own_tgt = np.concatenate([pools_tgt[g] for g in groups])
        other_src = np.setdiff1d(all_src, own_src, assume_unique=True)
        other_tgt = np.setdiff1d(all_tgt, own_tgt, assume_unique=True)

        src_len = int(rng.integers(src_lo, src_hi + 1))
        tgt_len = int(rng.integers(tgt_lo, tgt_hi + 1))
        src_items = _sample_sequence(rng, src_len, own_src, other_src, config.noise)
        tgt_items = _sample_sequence(rng, tgt_len, own_tgt, other_tgt, config.noise)

        user_ids.append(user)
        source_seqs.append(ClickSequence.from_items(user, Domain.SOURCE, src_items.tolist(), max_len))
        target_seqs.append(ClickSequence.from_items(user, Domain.TARGET, tgt_items.tolist(), max_len))

    return SequenceDataset(
        vocab_source=vocab_source,
        vocab_target=vocab_target,
        user_ids=user_ids,
        source_seqs=source_seqs,
        target_seqs=target_seqs,
        max_len=max_len,
        item_groups_source=item_groups_source,
        item_groups_target=item_groups_target,
        user_groups=user_groups,
        num_groups=config.num_groups,
    )


def off_group_fraction(dataset: SequenceDataset) -> float:
    """Fraction of clicks landing outside the clicking user's planted groups."""
    if not dataset.has_planted_groups:
        raise ConfigError("dataset carries no planted group tables")
    off = total = 0
    for user, src, tgt in zip(dataset.user_ids, dataset.source_seqs, dataset.target_seqs):
        groups = set(dataset.user_groups[user])
        for seq, item_groups in ((src, dataset.item_groups_source), (tgt, dataset.item_groups_target)):
            for idx in seq.valid_items():
                total += 1
                off += item_groups[idx] not in groups
    return off / total


def export_raw_records(
    dataset: SequenceDataset,
    source_path: str | Path,
    target_path: str | Path,
    seed: int = 0,
    low_rating_fraction: float = 0.2,
    malformed_lines: int = 2,
    solo_users: int = 3,
    solo_len: int = 8,
) -> dict:
    """Write the dataset back out as raw review logs, plus deliberate dirt.

    Adds low-rated (1-3) records that the click filter must drop, users present
    in only one domain, and a few malformed lines, then shuffles the record
    order within each file. Returns the planted dirt counts so an ingestion run
    over the files can be checked rule by rule.
    """
    rng = np.random.default_rng(seed)
    counts = {
        "low_rated": {"source": 0, "target": 0},
        "malformed": {"source": malformed_lines, "target": malformed_lines},
        "solo_users": 2 * solo_users,
        "clicks": {"source": 0, "target": 0},
    }

    for domain_key, path, vocab, seqs in (
        ("source", Path(source_path), dataset.vocab_source, dataset.source_seqs),
        ("target", Path(target_path), dataset.vocab_target, dataset.target_seqs),
    ):
        lines: list[str] = []
        for user, seq in zip(dataset.user_ids, seqs):
            for t, idx in enumerate(seq.valid_items()):
                record = {
                    "user": user,
                    "item": vocab.item_at(idx),
                    "rating": int(rng.integers(4, 6)),
                    "timestamp": t,
                    "category": vocab.category_name(vocab.category_of(idx)),
                }
                lines.append(json.dumps(record))
                counts["clicks"][domain_key] += 1
        n_low = int(low_rating_fraction * counts["clicks"][domain_key])
        counts["low_rated"][domain_key] = n_low
        for _ in range(n_low):
            user = dataset.user_ids[int(rng.integers(0, len(dataset)))]
            idx = int(rng.integers(1, vocab.num_items + 1))
            record = {
                "user": user,
                "item": vocab.item_at(idx),
                "rating": int(rng.integers(1, 4)),
                "timestamp": int(rng.integers(0, 1000)),
            }
            lines.append(json.dumps(record))
        # users present in this domain only: dropped by the shared-user rule
        for s in range(solo_users):
            user = f"solo_{domain_key}_{s:03d}"
            for t in range(solo_len):
                idx = int(rng.integers(1, vocab.num_items + 1))
                lines.append(json.dumps({"user": user, "item": vocab.item_at(idx), "rating": 5, "timestamp": t}))
        for _ in range(malformed_lines):
            lines.append("{not valid json")
        order = rng.permutation(len(lines))
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for i in order:
                fh.write(lines[i] + "\n")
    return counts
