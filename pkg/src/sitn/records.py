"""Core dataset record types: interactions, click sequences, vocabularies, CTR examples."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .errors import ConfigError, DataError

PAD_INDEX = 0


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class Interaction:
    """One raw user-item event, before any filtering."""

    user_id: str
    item_id: str
    domain: Domain
    timestamp: int
    rating: Optional[int] = None
    category: Optional[str] = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp} for user {self.user_id!r}")
        if self.rating is not None and not 1 <= self.rating <= 5:
            raise DataError(f"rating {self.rating} outside [1, 5] for user {self.user_id!r}")


@dataclass
class ClickSequence:
    """A user's chronological clicks in one domain, padded to a fixed length.

    ``item_indices`` always has length ``max_len``; ``mask`` marks the valid
    prefix. Padded positions carry index 0 (reserved, never a real item).
    """

    user_id: str
    domain: Domain
    item_indices: list[int]
    mask: list[bool]

    def __post_init__(self):
        if len(self.item_indices) != len(self.mask):
            raise DataError(f"mask length {len(self.mask)} != indices length {len(self.item_indices)}")
        n_valid = sum(self.mask)
        if self.mask[:n_valid] != [True] * n_valid:
            raise DataError("valid positions must form a contiguous prefix")
        for pos, (idx, valid) in enumerate(zip(self.item_indices, self.mask)):
            if valid and idx == PAD_INDEX:
                raise DataError(f"valid position {pos} holds the padding index")
            if not valid and idx != PAD_INDEX:
                raise DataError(f"padded position {pos} holds item index {idx}")

    @classmethod
    def from_items(cls, user_id: str, domain: Domain, items: Sequence[int], max_len: int) -> "ClickSequence":
        items = list(items)
        if len(items) > max_len:
            raise DataError(f"{len(items)} items exceed max_len={max_len}; truncate before padding")
        pad = max_len - len(items)
        return cls(
            user_id=user_id,
            domain=domain,
            item_indices=items + [PAD_INDEX] * pad,
            mask=[True] * len(items) + [False] * pad,
        )

    @property
    def max_len(self) -> int:
        return len(self.item_indices)

    @property
    def length(self) -> int:
        return sum(self.mask)

    def valid_items(self) -> list[int]:
        return self.item_indices[: self.length]


class Vocabulary:
    """Per-domain item universe: item id -> dense index, plus a category per item.

    Index 0 is reserved for padding and never assigned to a real item; the
    same holds for category index 0.
    """

    def __init__(self, domain: Domain):
        self.domain = Domain(domain)
        self._item_index: dict[str, int] = {}
        self._items: list[str] = [""]  # position 0 = padding
        self._category_index: dict[str, int] = {}
        self._categories: list[str] = [""]
        self._item_category: list[int] = [0]

    def add_item(self, item_id: str, category: str = "") -> int:
        if item_id in self._item_index:
            return self._item_index[item_id]
        idx = len(self._items)
        self._item_index[item_id] = idx
        self._items.append(item_id)
        self._item_category.append(self._category_id(category))
        return idx

    def _category_id(self, category: str) -> int:
        if category == "":
            return 0
        if category not in self._category_index:
            self._category_index[category] = len(self._categories)
            self._categories.append(category)
        return self._category_index[category]

    def index_of(self, item_id: str) -> int:
        return self._item_index[item_id]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._item_index

    def item_at(self, index: int) -> str:
        if index == PAD_INDEX:
            raise KeyError("index 0 is the padding slot")
        return self._items[index]

    def category_of(self, index: int) -> int:
        return self._item_category[index]

    def category_name(self, category_index: int) -> str:
        return self._categories[category_index]

    @property
    def num_items(self) -> int:
        return len(self._items) - 1

    @property
    def num_categories(self) -> int:
        return len(self._categories) - 1

    def category_table(self) -> list[int]:
        """Item index -> category index, including the padding slot at 0."""
        return list(self._item_category)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.value,
            "items": self._items[1:],
            "categories": self._categories[1:],
            "item_category": self._item_category[1:],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        vocab = cls(Domain(data["domain"]))
        vocab._items += list(data["items"])
        vocab._categories += list(data["categories"])
        vocab._item_category += [int(c) for c in data["item_category"]]
        for idx, item_id in enumerate(data["items"], start=1):
            vocab._item_index[item_id] = idx
        for idx, cat in enumerate(data["categories"], start=1):
            vocab._category_index[cat] = idx
        return vocab

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.domain == other.domain
            and self._items == other._items
            and self._categories == other._categories
            and self._item_category == other._item_category
        )


@dataclass
class CdrExample:
    """A stage-2 training record: dual-domain history, candidate target item, click label."""

    user_id: str
    source_seq: ClickSequence
    target_seq: ClickSequence
    candidate_item: int
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label {self.label} not in {{0, 1}}")
        if self.candidate_item == PAD_INDEX:
            raise DataError("candidate item is the padding index")
        if self.candidate_item in self.target_seq.valid_items():
            raise DataError(f"candidate {self.candidate_item} leaks into the target history of user {self.user_id!r}")


@dataclass
class SyntheticConfig:
    """Settings for the planted-interest synthetic generator.

    Each of ``num_groups`` latent interest groups owns a disjoint item pool in
    both domains. A user draws ``interests_per_user`` groups and clicks inside
    them with probability ``1 - noise``.
    """

    num_users: int = 200
    num_groups: int = 4
    items_per_group_source: int = 30
    items_per_group_target: int = 30
    interests_per_user: int = 1
    source_len_range: tuple[int, int] = (10, 25)
    target_len_range: tuple[int, int] | None = None
    noise: float = 0.1
    seed: int = 0
    max_len: int | None = None

    def validate(self) -> None:
        if self.num_groups < 1:
            raise ConfigError("num_groups must be >= 1")
        if not 0 <= self.noise < 0.5:
            raise ConfigError("noise rate must lie in [0, 0.5)")
        for name in ("num_users", "items_per_group_source", "items_per_group_target", "interests_per_user"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.interests_per_user > self.num_groups:
            raise ConfigError("interests_per_user cannot exceed num_groups")
        for name, rng in (("source_len_range", self.source_len_range), ("target_len_range", self.effective_target_range())):
            lo, hi = rng
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must satisfy 1 <= min <= max, got {rng}")
        for per_group in (self.items_per_group_source, self.items_per_group_target):
            if per_group * self.num_groups >= 2**31 - 1:
                raise ConfigError("items_per_group x num_groups exceeds the index range")
        if self.effective_max_len() < max(self.source_len_range[1], self.effective_target_range()[1]):
            raise ConfigError("max_len is smaller than the longest possible sequence")

    def effective_target_range(self) -> tuple[int, int]:
        return self.target_len_range if self.target_len_range is not None else self.source_len_range

    def effective_max_len(self) -> int:
        if self.max_len is not None:
            return self.max_len
        return max(self.source_len_range[1], self.effective_target_range()[1])
