"""Cross-domain contrastive objectives.

Two levels: instance-to-instance InfoNCE between the same user's pooled
representations in both domains, and instance-to-cluster contrast against
trainable interest prototypes, with multi-view fusion of a user's top-k
interests and multi-granularity aggregation over several interest spaces.

Similarity defaults to the raw dot product and batch losses are sums, not
means. The ``normalize`` flag switches every similarity to cosine (vectors
L2-normalized before the product); it is off by default and exists for
experiments where unbounded magnitudes let training sidestep the cluster
structure. All softmax terms run through log-sum-exp, so arbitrary
magnitudes stay finite either way.
"""

from __future__ import annotations

import math
from typing import Iterable, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")


def _check_instances(inst_source: Tensor, inst_target: Tensor) -> None:
    if inst_source.dim() != 2 or inst_source.shape != inst_target.shape:
        raise ConfigError(
            f"instance matrices must share an (n, dim) shape, got {tuple(inst_source.shape)} / {tuple(inst_target.shape)}"
        )
    if inst_source.shape[0] < 1:
        raise ConfigError("need at least one instance")
    if not (torch.isfinite(inst_source).all() and torch.isfinite(inst_target).all()):
        raise ValueError("non-finite instance representation")


def _unit(x: Tensor, normalize: bool) -> Tensor:
    return F.normalize(x, dim=-1) if normalize else x


def sim_matrix(a: Tensor, b: Tensor, normalize: bool = False) -> Tensor:
    """Pairwise similarities: raw dot products, or cosines when ``normalize`` is set."""
    return _unit(a, normalize) @ _unit(b, normalize).T


class InterestSpace(nn.Module):
    """One granularity subspace: trainable cluster matrices for both domains plus
    a per-domain fusion MLP that merges a user's top-k interests into one view."""

    def __init__(self, num_clusters: int, dim: int, top_k: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        if num_clusters < 1:
            raise ConfigError("num_clusters must be >= 1")
        if not 1 <= top_k <= num_clusters:
            raise ConfigError(f"top_k must lie in [1, {num_clusters}], got {top_k}")
        self.num_clusters = num_clusters
        self.dim = dim
        self.top_k = top_k
        scale = 1.0 / math.sqrt(dim)
        self.clusters_source = nn.Parameter(torch.randn(num_clusters, dim) * scale)
        self.clusters_target = nn.Parameter(torch.randn(num_clusters, dim) * scale)
        self.fuse_source = _fusion_mlp(top_k * dim, dim)
        self.fuse_target = _fusion_mlp(top_k * dim, dim)
        self.to(dtype)


def _fusion_mlp(in_dim: int, out_dim: int) -> nn.Sequential:
    # tanh keeps the map smooth, which finite-difference gradient checks need
    return nn.Sequential(nn.Linear(in_dim, out_dim), nn.Tanh(), nn.Linear(out_dim, out_dim))


class GranularitySet(nn.ModuleList):
    """Ordered collection of interest spaces, typically with distinct cluster counts."""

    def __init__(self, spaces: Iterable[InterestSpace]):
        spaces = list(spaces)
        if not spaces:
            raise ConfigError("a granularity set needs at least one interest space")
        super().__init__(spaces)

    @classmethod
    def from_sizes(
        cls, cluster_sizes: Iterable[int], dim: int, top_k: int, dtype: torch.dtype = torch.float64
    ) -> "GranularitySet":
        return cls(InterestSpace(k, dim, min(top_k, k), dtype=dtype) for k in cluster_sizes)


def i2i_loss(inst_source: Tensor, inst_target: Tensor, temperature: float, normalize: bool = False) -> Tensor:
    """Symmetric InfoNCE over user-aligned instances from the two domains.

    Row k of each matrix is the same user; the user's own cross-domain
    counterpart is the positive, every other row the negatives.
    """
    _check_temperature(temperature)
    _check_instances(inst_source, inst_target)
    sims = sim_matrix(inst_source, inst_target, normalize) / temperature
    diag = sims.diagonal()
    source_to_target = (torch.logsumexp(sims, dim=1) - diag).sum()
    target_to_source = (torch.logsumexp(sims, dim=0) - diag).sum()
    return source_to_target + target_to_source


def soft_assignments(clusters: Tensor, instances: Tensor, normalize: bool = False) -> Tensor:
    """Per-instance softmax over clusters of the instance-cluster similarities. (n, K)"""
    return torch.softmax(sim_matrix(instances, clusters, normalize), dim=1)


def compute_new_clusters(clusters: Tensor, instances: Tensor, normalize: bool = False) -> Tensor:
    """Batch-conditioned clusters: each is the soft-assignment-weighted sum of instances.

    Gradients flow into both the cluster matrix (through the assignments) and
    the instances.
    """
    if clusters.shape[1] != instances.shape[1]:
        raise ConfigError(f"cluster dim {clusters.shape[1]} != instance dim {instances.shape[1]}")
    return soft_assignments(clusters, instances, normalize).T @ instances


def top_k_interests(instances: Tensor, new_clusters: Tensor, top_k: int, normalize: bool = False) -> Tensor:
    """Indices of the top-k clusters by similarity, descending; ties go to the lower index."""
    if not 1 <= top_k <= new_clusters.shape[0]:
        raise ConfigError(f"top_k must lie in [1, {new_clusters.shape[0]}], got {top_k}")
    single = instances.dim() == 1
    inst = instances.unsqueeze(0) if single else instances
    sims = sim_matrix(inst, new_clusters, normalize)
    order = torch.argsort(sims, dim=1, descending=True, stable=True)[:, :top_k]
    return order.squeeze(0) if single else order


def mv_cluster(
    instances: Tensor, new_clusters: Tensor, top_k: int, fusion: nn.Module, normalize: bool = False
) -> Tensor:
    """Multi-view cluster: fuse the top-k most similar new clusters into one vector.

    The selection indices are non-differentiable; gradients pass through the
    selected cluster values and the fusion MLP.
    """
    single = instances.dim() == 1
    inst = instances.unsqueeze(0) if single else instances
    idx = top_k_interests(inst, new_clusters, top_k, normalize)
    selected = new_clusters[idx]  # (n, top_k, dim) in similarity order
    fused = fusion(selected.reshape(inst.shape[0], -1))
    return fused.squeeze(0) if single else fused


class I2cParts(NamedTuple):
    total: Tensor
    source_to_target: Tensor
    target_to_source: Tensor


def _i2c_direction(
    instances: Tensor, positives: Tensor, new_clusters: Tensor, temperature: float, normalize: bool
) -> Tensor:
    # denominator = positive pair + all K new clusters of the other domain
    inst = _unit(instances, normalize)
    pos = (inst * _unit(positives, normalize)).sum(dim=1) / temperature
    neg = inst @ _unit(new_clusters, normalize).T / temperature
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos).sum()


def i2c_space_loss(
    inst_source: Tensor,
    inst_target: Tensor,
    space: InterestSpace,
    temperature: float,
    use_mv: bool = True,
    normalize: bool = False,
    return_parts: bool = False,
):
    """Instance-to-cluster contrast within one interest space.

    Each instance pairs positively with its own multi-view cluster from the
    other domain and negatively with all of that domain's new clusters. With
    ``use_mv`` off the positive is the single most similar new cluster instead
    of the fused view.
    """
    _check_temperature(temperature)
    _check_instances(inst_source, inst_target)
    new_source = compute_new_clusters(space.clusters_source, inst_source, normalize)
    new_target = compute_new_clusters(space.clusters_target, inst_target, normalize)
    if use_mv:
        view_source = mv_cluster(inst_source, new_source, space.top_k, space.fuse_source, normalize)
        view_target = mv_cluster(inst_target, new_target, space.top_k, space.fuse_target, normalize)
    else:
        view_source = new_source[top_k_interests(inst_source, new_source, 1, normalize).squeeze(1)]
        view_target = new_target[top_k_interests(inst_target, new_target, 1, normalize).squeeze(1)]
    source_to_target = _i2c_direction(inst_source, view_target, new_target, temperature, normalize)
    target_to_source = _i2c_direction(inst_target, view_source, new_source, temperature, normalize)
    total = source_to_target + target_to_source
    if return_parts:
        return I2cParts(total, source_to_target, target_to_source)
    return total


def i2c_loss(
    inst_source: Tensor,
    inst_target: Tensor,
    spaces: GranularitySet,
    temperature: float,
    use_mv: bool = True,
    normalize: bool = False,
) -> Tensor:
    """Multi-granularity instance-to-cluster loss: sum over all interest spaces."""
    if len(spaces) == 0:
        raise ConfigError("empty granularity set")
    total = None
    for space in spaces:
        term = i2c_space_loss(inst_source, inst_target, space, temperature, use_mv=use_mv, normalize=normalize)
        total = term if total is None else total + term
    return total


class SslLossParts(NamedTuple):
    total: Tensor
    i2i: Tensor
    i2c: Tensor


def ssl_loss(
    inst_source: Tensor,
    inst_target: Tensor,
    spaces: Optional[GranularitySet],
    temperature: float,
    use_i2i: bool = True,
    use_i2c: bool = True,
    use_mv: bool = True,
    normalize: bool = False,
) -> SslLossParts:
    """Total self-supervised objective; the flags reproduce the ablation variants exactly."""
    zero = inst_source.new_zeros(())
    part_i2i = i2i_loss(inst_source, inst_target, temperature, normalize) if use_i2i else zero
    if use_i2c:
        if spaces is None:
            raise ConfigError("instance-to-cluster loss enabled but no granularity set given")
        part_i2c = i2c_loss(inst_source, inst_target, spaces, temperature, use_mv=use_mv, normalize=normalize)
    else:
        part_i2c = zero
    if use_i2i and use_i2c:
        total = part_i2i + part_i2c
    elif use_i2i:
        total = part_i2i
    elif use_i2c:
        total = part_i2c
    else:
        total = zero
    return SslLossParts(total=total, i2i=part_i2i, i2c=part_i2c)
