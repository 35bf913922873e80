"""Metrics, interest-transfer diagnostics, and 2-D cluster projections."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .contrast import InterestSpace, soft_assignments
from .datasets import SequenceDataset
from .encoder import DomainEncoder
from .errors import ConfigError, UndefinedMetricError
from .records import CdrExample
from .training import PROB_EPSILON, CtrModel, collate_examples, collate_sequences

log = logging.getLogger(__name__)


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be 1-D and aligned, got {s.shape} / {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count half.

    Computed as the Mann-Whitney rank statistic, so it is exact and invariant
    under any strictly increasing transform of the scores.
    """
    s, y = _check_scores(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mean_logloss(scores, labels) -> float:
    """Mean clamped cross-entropy over the example set."""
    s, y = _check_scores(scores, labels)
    p = np.clip(s, PROB_EPSILON, 1.0 - PROB_EPSILON)
    return float(-(y * np.log(p) + (1 - y) * np.log(1.0 - p)).mean())


@dataclass
class MetricsReport:
    variant: str
    auc: float
    logloss: float
    seed: int
    dataset_hash: str
    config_hash: str = ""
    runtime_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "auc": self.auc,
            "logloss": self.logloss,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
            "config_hash": self.config_hash,
            "runtime_seconds": self.runtime_seconds,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)


def save_reports(reports: Sequence[MetricsReport], jsonl_path: str | Path, table_path: Optional[str | Path] = None) -> None:
    jsonl_path = Path(jsonl_path)
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    with open(jsonl_path, "w") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    if table_path is not None:
        Path(table_path).write_text(format_report_table(reports))


def load_reports(jsonl_path: str | Path) -> list[MetricsReport]:
    reports = []
    with open(jsonl_path) as fh:
        for line in fh:
            reports.append(MetricsReport.from_dict(json.loads(line)))
    return reports


def format_report_table(reports: Sequence[MetricsReport]) -> str:
    """Per-variant means and standard deviations over seeds, as a fixed-width table."""
    by_variant: dict[str, list[MetricsReport]] = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r)
    lines = [f"{'variant':<14} {'seeds':>5} {'auc':>16} {'logloss':>16}"]
    for variant, rows in by_variant.items():
        aucs = np.array([r.auc for r in rows])
        lls = np.array([r.logloss for r in rows])
        lines.append(
            f"{variant:<14} {len(rows):>5} "
            f"{aucs.mean():>8.4f}±{aucs.std():<7.4f} {lls.mean():>8.4f}±{lls.std():<7.4f}"
        )
    return "\n".join(lines) + "\n"


def score_examples(model: CtrModel, examples: Sequence[CdrExample], batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Model probabilities and labels over an example set, in a fixed order."""
    dtype = next(model.head.parameters()).dtype
    scores, labels = [], []
    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = list(examples[lo : lo + batch_size])
            batch = collate_examples(chunk, dtype)
            probs = model(batch["src_items"], batch["src_mask"], batch["tgt_items"], batch["tgt_mask"], batch["candidates"])
            scores.extend(float(p) for p in probs)
            labels.extend(e.label for e in chunk)
    return np.array(scores), np.array(labels)


def evaluate_model(
    model: CtrModel,
    examples: Sequence[CdrExample],
    variant: str,
    seed: int,
    dataset_hash: str,
    config_hash: str = "",
    runtime_seconds: float = 0.0,
) -> MetricsReport:
    scores, labels = score_examples(model, examples)
    return MetricsReport(
        variant=variant,
        auc=auc(scores, labels),
        logloss=mean_logloss(scores, labels),
        seed=seed,
        dataset_hash=dataset_hash,
        config_hash=config_hash,
        runtime_seconds=runtime_seconds,
    )


# ---------------------------------------------------------------------------
# Interest-transfer diagnostics (planted synthetic data only)
# ---------------------------------------------------------------------------


def clusters_to_groups(
    clusters: torch.Tensor,
    instances: torch.Tensor,
    instance_groups: Sequence[Iterable[int]],
    num_groups: int,
) -> np.ndarray:
    """Assign each cluster to the planted group holding most of its soft-assignment mass."""
    with torch.no_grad():
        assign = soft_assignments(clusters, instances).numpy()  # (n, K)
    mass = np.zeros((clusters.shape[0], num_groups))
    for i, groups in enumerate(instance_groups):
        for g in groups:
            mass[:, g] += assign[i, :]
    return mass.argmax(axis=1)


def cluster_correspondence(
    clusters_source: torch.Tensor,
    clusters_target: torch.Tensor,
    groups_source: Sequence[int],
    groups_target: Sequence[int],
) -> float:
    """Fraction of source clusters whose nearest target cluster (by dot product)
    carries the same planted group label."""
    cs = np.asarray(clusters_source.detach().numpy() if torch.is_tensor(clusters_source) else clusters_source, dtype=np.float64)
    ct = np.asarray(clusters_target.detach().numpy() if torch.is_tensor(clusters_target) else clusters_target, dtype=np.float64)
    gs = np.asarray(groups_source)
    gt = np.asarray(groups_target)
    if cs.shape != ct.shape:
        raise ConfigError(f"cluster matrices must match in shape, got {cs.shape} / {ct.shape}")
    if len(gs) != cs.shape[0] or len(gt) != ct.shape[0]:
        raise ConfigError("one group label is needed per cluster")
    nearest = (cs @ ct.T).argmax(axis=1)
    return float((gt[nearest] == gs).mean())


def encode_all_users(
    encoder_source: DomainEncoder,
    encoder_target: DomainEncoder,
    dataset: SequenceDataset,
    batch_size: int = 256,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pooled instances for every user, in dataset order."""
    src_parts, tgt_parts = [], []
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            src_items, src_mask = collate_sequences(dataset.source_seqs[lo : lo + batch_size])
            tgt_items, tgt_mask = collate_sequences(dataset.target_seqs[lo : lo + batch_size])
            src_parts.append(encoder_source(src_items, src_mask).pooled)
            tgt_parts.append(encoder_target(tgt_items, tgt_mask).pooled)
    return torch.cat(src_parts), torch.cat(tgt_parts)


def interest_alignment(
    encoder_source: DomainEncoder,
    encoder_target: DomainEncoder,
    space: InterestSpace,
    dataset: SequenceDataset,
) -> float:
    """Cluster correspondence of one interest space against the planted groups."""
    if not dataset.has_planted_groups:
        raise ConfigError("interest alignment needs a dataset with planted group tables")
    inst_source, inst_target = encode_all_users(encoder_source, encoder_target, dataset)
    user_groups = [dataset.user_groups[u] for u in dataset.user_ids]
    groups_source = clusters_to_groups(space.clusters_source, inst_source, user_groups, dataset.num_groups)
    groups_target = clusters_to_groups(space.clusters_target, inst_target, user_groups, dataset.num_groups)
    return cluster_correspondence(space.clusters_source, space.clusters_target, groups_source, groups_target)


# ---------------------------------------------------------------------------
# 2-D projections of interest clusters
# ---------------------------------------------------------------------------


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal components, with a fixed sign convention."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ConfigError("PCA needs at least two row vectors")
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    if components.shape[0] < 2:  # rank-1 input: pad a zero second coordinate
        components = np.vstack([components, np.zeros_like(components[0])])
    for i in range(2):
        pivot = np.abs(components[i]).argmax()
        if components[i, pivot] < 0:
            components[i] = -components[i]
    return centered @ components.T


@dataclass
class ProjectionExport:
    """Joint 2-D embedding of one space's source and target clusters."""

    projector: str
    rows: list[tuple[str, int, float, float]] = field(default_factory=list)

    def write_csv(self, path: str | Path, config_hash: str = "") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# projector={self.projector} config_hash={config_hash}", "domain,cluster,x,y"]
        lines += [f"{d},{k},{x:.10g},{y:.10g}" for d, k, x, y in self.rows]
        path.write_text("\n".join(lines) + "\n")
        return path


def export_projection(space: InterestSpace, projector: str = "pca", seed: int = 0) -> ProjectionExport:
    """Project all of a space's clusters (both domains) into 2-D.

    PCA is the deterministic default; t-SNE is available behind the same
    interface and falls back to PCA (with a warning) when there are too few
    clusters to embed.
    """
    if projector not in ("pca", "tsne"):
        raise ConfigError(f"projector must be 'pca' or 'tsne', got {projector!r}")
    with torch.no_grad():
        cs = space.clusters_source.numpy()
        ct = space.clusters_target.numpy()
    points = np.concatenate([cs, ct], axis=0)
    used = projector
    if projector == "tsne" and points.shape[0] < 3:
        log.warning("t-SNE needs at least 3 clusters, falling back to PCA")
        used = "pca"
    if used == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (points.shape[0] - 1) / 3.0))
        coords = TSNE(n_components=2, random_state=seed, perplexity=perplexity, init="pca", method="exact").fit_transform(points)
    else:
        coords = pca_2d(points)
    rows = [("source", k, float(coords[k, 0]), float(coords[k, 1])) for k in range(cs.shape[0])]
    rows += [("target", k, float(coords[cs.shape[0] + k, 0]), float(coords[cs.shape[0] + k, 1])) for k in range(ct.shape[0])]
    return ProjectionExport(projector=used, rows=rows)
