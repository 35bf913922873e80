"""Per-domain sequence encoder: embeddings, multi-head self-attention, mean pooling.

Also provides the stage-2 target-attention readout, where the candidate item
acts as the lone query over the encoded history.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError, DataError


class EncodedBatch(NamedTuple):
    """Per-position encoded states plus the mask-weighted mean over valid positions."""

    states: Tensor  # (n, max_len, dim)
    pooled: Tensor  # (n, dim)
    mask: Tensor  # (n, max_len) bool


def scaled_dot_product_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    key_mask: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d)) V with invalid keys excluded.

    ``key_mask`` marks valid key positions; masked keys get weight exactly 0.
    A query with no valid key at all yields the zero vector.
    """
    dim = queries.shape[-1]
    if keys.shape[-1] != dim:
        raise ConfigError(f"query dim {dim} != key dim {keys.shape[-1]}")
    scores = queries @ keys.transpose(-2, -1) / math.sqrt(dim)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
        dead = ~key_mask.any(dim=-1)  # queries with zero valid keys
        if dead.any():
            dead_rows = dead.unsqueeze(-1).unsqueeze(-1)
            scores = torch.where(dead_rows, torch.zeros_like(scores), scores)
            weights = torch.softmax(scores, dim=-1)
            weights = torch.where(dead_rows, torch.zeros_like(weights), weights)
        else:
            weights = torch.softmax(scores, dim=-1)
    else:
        weights = torch.softmax(scores, dim=-1)
    out = weights @ values
    if return_weights:
        return out, weights
    return out


class MultiHeadSelfAttention(nn.Module):
    """Self-attention where query, key and value all come from the same states.

    Each projection is a bias-free linear map split into ``num_heads`` heads;
    head outputs are concatenated and projected once more.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"model width {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.out_proj = nn.Linear(dim, dim, bias=False)

    def forward(self, states: Tensor, mask: Tensor) -> Tensor:
        n, length, _ = states.shape

        def split(x: Tensor) -> Tensor:
            return x.view(n, length, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(states)), split(self.k_proj(states)), split(self.v_proj(states))
        heads = scaled_dot_product_attention(q, k, v, key_mask=mask.unsqueeze(1))
        merged = heads.transpose(1, 2).reshape(n, length, self.dim)
        out = self.out_proj(merged)
        return out * mask.unsqueeze(-1)


class DomainEncoder(nn.Module):
    """Embeds a click sequence (item id + category, optional position) and encodes it.

    The encoder owns the item -> category lookup so callers only pass item
    indices. Row 0 of every embedding table is the padding slot and stays
    exactly zero throughout training.
    """

    def __init__(
        self,
        num_items: int,
        num_categories: int,
        item_categories: Sequence[int],
        embed_dim: int = 64,
        num_heads: int = 2,
        max_len: int = 100,
        use_positional: bool = True,
        num_layers: int = 1,
        layer_norm: bool = False,
        residual: bool = False,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if len(item_categories) != num_items + 1:
            raise ConfigError("item_categories must cover the padding slot plus every item")
        if num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        self.embed_dim = embed_dim
        self.max_len = max_len
        self.use_positional = use_positional
        self.residual = residual
        self.item_emb = nn.Embedding(num_items + 1, embed_dim, padding_idx=0)
        self.category_emb = nn.Embedding(num_categories + 1, embed_dim, padding_idx=0)
        self.register_buffer("item_categories", torch.as_tensor(list(item_categories), dtype=torch.long))
        if use_positional:
            self.positions = nn.Parameter(torch.randn(max_len, embed_dim) * 0.02)
        else:
            self.positions = None
        self.layers = nn.ModuleList(MultiHeadSelfAttention(embed_dim, num_heads) for _ in range(num_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(embed_dim) for _ in range(num_layers)) if layer_norm else None
        self.to(dtype)

    def embed_items(self, items: Tensor) -> Tensor:
        """Item representation: id embedding + category embedding (no position)."""
        return self.item_emb(items) + self.category_emb(self.item_categories[items])

    def forward(self, items: Tensor, mask: Tensor) -> EncodedBatch:
        if items.dim() != 2 or items.shape != mask.shape:
            raise DataError(f"expected aligned (n, len) items and mask, got {tuple(items.shape)} / {tuple(mask.shape)}")
        valid_counts = mask.sum(dim=1)
        if (valid_counts == 0).any():
            raise DataError("a sequence in the batch has no valid positions")
        x = self.embed_items(items)
        if self.positions is not None:
            x = x + self.positions[: items.shape[1]]
        x = x * mask.unsqueeze(-1)
        for i, layer in enumerate(self.layers):
            h = layer(x, mask)
            x = x + h if self.residual else h
            if self.norms is not None:
                x = self.norms[i](x) * mask.unsqueeze(-1)
        pooled = x.sum(dim=1) / valid_counts.unsqueeze(-1).to(x.dtype)
        return EncodedBatch(states=x, pooled=pooled, mask=mask)


def target_attention(candidate: Tensor, states: Tensor, mask: Tensor) -> Tensor:
    """Read the encoded history with the candidate embedding as the lone query.

    candidate (n, dim), states (n, len, dim), mask (n, len) -> (n, dim).
    """
    if not mask.any(dim=1).all():
        raise DataError("target attention over an empty history")
    out = scaled_dot_product_attention(candidate.unsqueeze(1), states, states, key_mask=mask)
    return out.squeeze(1)
