"""Raw review-log ingestion with click filtering, shared-user join, and truncation.

The raw format is newline-delimited JSON records with fields
``user``, ``item``, ``rating``, ``timestamp`` and optional ``category``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .datasets import SequenceDataset
from .errors import ConfigError, EmptyDatasetError
from .records import ClickSequence, Domain, Vocabulary

log = logging.getLogger(__name__)


@dataclass
class IngestStats:
    """Counters for every filtering rule, kept per domain where relevant."""

    records_read: dict[str, int] = field(default_factory=lambda: {"source": 0, "target": 0})
    malformed: dict[str, int] = field(default_factory=lambda: {"source": 0, "target": 0})
    below_min_rating: dict[str, int] = field(default_factory=lambda: {"source": 0, "target": 0})
    clicks_kept: dict[str, int] = field(default_factory=lambda: {"source": 0, "target": 0})
    truncated_sequences: dict[str, int] = field(default_factory=lambda: {"source": 0, "target": 0})
    users_not_shared: int = 0
    users_dropped_short_source: int = 0
    users_kept: int = 0

    def to_dict(self) -> dict:
        return {
            "records_read": dict(self.records_read),
            "malformed": dict(self.malformed),
            "below_min_rating": dict(self.below_min_rating),
            "clicks_kept": dict(self.clicks_kept),
            "truncated_sequences": dict(self.truncated_sequences),
            "users_not_shared": self.users_not_shared,
            "users_dropped_short_source": self.users_dropped_short_source,
            "users_kept": self.users_kept,
        }


def iter_raw_records(path: str | Path) -> Iterator[dict]:
    """Yield raw record dicts from a JSONL file, passing malformed lines through
    as ``{"__malformed__": line}`` so the caller can count them."""
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                yield {"__malformed__": line}
                continue
            yield record if isinstance(record, dict) else {"__malformed__": line}


def _parse_record(record: dict) -> tuple[str, str, int, int, str] | None:
    if "__malformed__" in record:
        return None
    try:
        user = str(record["user"])
        item = str(record["item"])
        rating = int(record["rating"])
        timestamp = int(record["timestamp"])
    except (KeyError, TypeError, ValueError):
        return None
    if not user or not item or not 1 <= rating <= 5 or timestamp < 0:
        return None
    category = str(record.get("category", ""))
    return user, item, rating, timestamp, category


def _collect_clicks(
    records: Iterable[dict], domain_key: str, min_rating: int, stats: IngestStats
) -> dict[str, list[tuple[int, str, str]]]:
    clicks: dict[str, list[tuple[int, str, str]]] = {}
    for record in records:
        stats.records_read[domain_key] += 1
        parsed = _parse_record(record)
        if parsed is None:
            stats.malformed[domain_key] += 1
            continue
        user, item, rating, timestamp, category = parsed
        if rating < min_rating:
            stats.below_min_rating[domain_key] += 1
            continue
        stats.clicks_kept[domain_key] += 1
        clicks.setdefault(user, []).append((timestamp, item, category))
    return clicks


def ingest_amazon(
    source_records: Iterable[dict],
    target_records: Iterable[dict],
    min_rating: int = 4,
    min_source_len: int = 5,
    max_len: int = 100,
) -> SequenceDataset:
    """Build an aligned dual-domain dataset from raw review records.

    Rules: keep ratings >= ``min_rating`` as clicks, keep only users present in
    both domains, drop users with fewer than ``min_source_len`` source clicks,
    and truncate each sequence to its ``max_len`` most recent clicks. Sorting
    is by (timestamp, item id), so record order in the input never matters.
    """
    if not 1 <= min_rating <= 5:
        raise ConfigError("min_rating must lie in [1, 5]")
    if min_source_len < 1 or max_len < 1:
        raise ConfigError("min_source_len and max_len must be positive")

    stats = IngestStats()
    source_clicks = _collect_clicks(source_records, "source", min_rating, stats)
    target_clicks = _collect_clicks(target_records, "target", min_rating, stats)

    shared = sorted(set(source_clicks) & set(target_clicks))
    stats.users_not_shared = len(set(source_clicks) | set(target_clicks)) - len(shared)

    kept_users = []
    for user in shared:
        if len(source_clicks[user]) < min_source_len:
            stats.users_dropped_short_source += 1
            continue
        kept_users.append(user)
    stats.users_kept = len(kept_users)
    if not kept_users:
        raise EmptyDatasetError("no shared user survives the ingestion filters")

    vocab_source = Vocabulary(Domain.SOURCE)
    vocab_target = Vocabulary(Domain.TARGET)
    per_user: dict[str, dict[str, list[tuple[int, str]]]] = {}
    for user in kept_users:
        per_user[user] = {}
        for domain_key, clicks, vocab in (
            ("source", source_clicks, vocab_source),
            ("target", target_clicks, vocab_target),
        ):
            ordered = sorted(clicks[user])  # (timestamp, item, category); item id breaks ties
            if len(ordered) > max_len:
                ordered = ordered[-max_len:]
                stats.truncated_sequences[domain_key] += 1
            indices = [vocab.add_item(item, category) for _, item, category in ordered]
            per_user[user][domain_key] = indices

    source_seqs = [ClickSequence.from_items(u, Domain.SOURCE, per_user[u]["source"], max_len) for u in kept_users]
    target_seqs = [ClickSequence.from_items(u, Domain.TARGET, per_user[u]["target"], max_len) for u in kept_users]

    total_malformed = sum(stats.malformed.values())
    if total_malformed:
        log.warning("skipped %d malformed raw records", total_malformed)

    return SequenceDataset(
        vocab_source=vocab_source,
        vocab_target=vocab_target,
        user_ids=kept_users,
        source_seqs=source_seqs,
        target_seqs=target_seqs,
        max_len=max_len,
        stats=stats.to_dict(),
    )


def ingest_amazon_files(
    source_path: str | Path,
    target_path: str | Path,
    min_rating: int = 4,
    min_source_len: int = 5,
    max_len: int = 100,
) -> SequenceDataset:
    return ingest_amazon(
        iter_raw_records(source_path),
        iter_raw_records(target_path),
        min_rating=min_rating,
        min_source_len=min_source_len,
        max_len=max_len,
    )
