"""Ranking metrics and reports for dual-domain next-item prediction."""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import TrainConfig
from src.dataio import Domain, HybridSequence, NextItemExample, make_batches
from src.model import ModelParams, score_batch

logger = logging.getLogger(__name__)

Scorer = Callable[[Sequence[NextItemExample]], Dict[Domain, np.ndarray]]
METRIC_NAMES = ("RC", "MRR", "NDCG")


@dataclass
class RankingMetrics:
    """RC@K, MRR@K and NDCG@K of one domain; None when nothing was evaluated."""

    rc: Optional[float]
    mrr: Optional[float]
    ndcg: Optional[float]
    count: int

    def as_tuple(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        return self.rc, self.mrr, self.ndcg


@dataclass
class MetricsReport:
    """Per-domain ranking metrics of one model (variant, seed) on one test set."""

    k: int
    domains: Dict[str, RankingMetrics]
    variant: str = "EA-GCL"
    seed: Optional[int] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def metric(self, domain: str, name: str) -> Optional[float]:
        return getattr(self.domains[domain], name.lower())

    def to_rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = []
        for domain, metrics in self.domains.items():
            row: Dict[str, object] = {"variant": self.variant, "seed": self.seed, "domain": domain}
            for name, value in zip(METRIC_NAMES, metrics.as_tuple()):
                row[f"{name}@{self.k}"] = "n/a" if value is None else f"{value:.6f}"
            row["count"] = metrics.count
            rows.append(row)
        return rows


def rank_of_target(probs: np.ndarray, target: int) -> int:
    """1-based rank by descending probability; ties go to the lower item id."""
    probs = np.asarray(probs)
    if not 0 <= target < probs.shape[0]:
        raise IndexError(f"Target {target} outside vocabulary of {probs.shape[0]} items")
    p_t = probs[target]
    ties_before = int(np.sum(probs[:target] == p_t))
    return 1 + int(np.sum(probs > p_t)) + ties_before


def metrics_at_k(ranks: Sequence[int], k: int = 10) -> RankingMetrics:
    """
    Mean RC@K, MRR@K and NDCG@K over single-target ranks.

    An empty rank list yields None for every metric.

    Raises:
        ValueError: If a rank is below 1 or k < 1
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not ranks:
        return RankingMetrics(None, None, None, 0)
    r = np.asarray(ranks, dtype=np.float64)
    if np.any(r < 1):
        raise ValueError("Ranks must be at least 1")
    hit = r <= k
    return RankingMetrics(
        rc=float(np.mean(hit)),
        mrr=float(np.mean(np.where(hit, 1.0 / r, 0.0))),
        ndcg=float(np.mean(np.where(hit, 1.0 / np.log2(r + 1.0), 0.0))),
        count=len(ranks),
    )


@dataclass
class PopularityScorer:
    """Scores every item of a domain by its training frequency."""

    counts_a: np.ndarray
    counts_b: np.ndarray

    def __call__(self, examples: Sequence[NextItemExample]) -> Dict[Domain, np.ndarray]:
        scores = {}
        for domain, counts in ((Domain.A, self.counts_a), (Domain.B, self.counts_b)):
            total = counts.sum()
            probs = counts / total if total > 0 else np.full(len(counts), 1.0 / len(counts))
            scores[domain] = np.tile(probs, (len(examples), 1))
        return scores


def popularity_baseline(
    train: Sequence[HybridSequence], num_items_a: int, num_items_b: int
) -> PopularityScorer:
    """
    Count every training interaction per domain.

    Raises:
        ValueError: If the training set is empty
    """
    if not train:
        raise ValueError("Popularity baseline needs a non-empty training set")
    counts_a = np.zeros(num_items_a)
    counts_b = np.zeros(num_items_b)
    for seq in train:
        np.add.at(counts_a, list(seq.seq_a), 1.0)
        np.add.at(counts_b, list(seq.seq_b), 1.0)
    return PopularityScorer(counts_a, counts_b)


def _batch_ranks(scorer: Scorer, batch: Sequence[NextItemExample]) -> Dict[Domain, List[int]]:
    scores = scorer(batch)
    ranks: Dict[Domain, List[int]] = {Domain.A: [], Domain.B: []}
    for row, ex in enumerate(batch):
        for domain, target in ((Domain.A, ex.target_a), (Domain.B, ex.target_b)):
            if target is not None:
                ranks[domain].append(rank_of_target(scores[domain][row], target))
    return ranks


def evaluate_scores(
    scorer: Scorer,
    examples: Sequence[NextItemExample],
    k: int = 10,
    batch_size: int = 256,
    workers: int = 1,
    variant: str = "EA-GCL",
    seed: Optional[int] = None,
) -> MetricsReport:
    """
    Rank every target over its domain's full vocabulary and average the metrics.

    Batches are formed in order; with workers > 1 they are scored in a thread
    pool and their ranks collected in batch order.
    """
    batches = make_batches(list(examples), batch_size, seed=None)
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_batch = list(pool.map(lambda b: _batch_ranks(scorer, b), batches))
    else:
        per_batch = [_batch_ranks(scorer, b) for b in batches]

    report = MetricsReport(k=k, domains={}, variant=variant, seed=seed)
    for domain in Domain:
        ranks = [r for batch in per_batch for r in batch[domain]]
        report.domains[domain.value] = metrics_at_k(ranks, k)
    logger.info(
        "Evaluated %s on %d examples: %s",
        variant,
        len(examples),
        ", ".join(f"{d} RC@{k}={_fmt(m.rc)}" for d, m in report.domains.items()),
    )
    return report


def evaluate_model(
    params: ModelParams,
    examples: Sequence[NextItemExample],
    cfg: TrainConfig,
    k: int = 10,
    workers: int = 1,
    variant: str = "EA-GCL",
    seed: Optional[int] = None,
) -> MetricsReport:
    return evaluate_scores(
        lambda batch: score_batch(params, batch, cfg),
        examples,
        k=k,
        batch_size=cfg.batch_size,
        workers=workers,
        variant=variant,
        seed=seed,
    )


def evaluate_popularity(
    scorer: PopularityScorer, examples: Sequence[NextItemExample], k: int = 10
) -> MetricsReport:
    return evaluate_scores(scorer, examples, k=k, variant="Popularity")


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def write_report_csv(reports: Sequence[MetricsReport], path: Union[str, Path]) -> Path:
    """Write one CSV row per (variant, seed, domain)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [row for report in reports for row in report.to_rows()]
    k = reports[0].k if reports else 10
    fieldnames = ["variant", "seed", "domain"] + [f"{m}@{k}" for m in METRIC_NAMES] + ["count"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def format_report_table(reports: Sequence[MetricsReport]) -> str:
    """
    Aligned text table: one row per variant (and seed), one column per
    domain-metric pair.
    """
    if not reports:
        return ""
    k = reports[0].k
    domains = [d.value for d in Domain]
    header = ["Variant"] + [f"{d} {m}@{k}" for d in domains for m in METRIC_NAMES]
    body = []
    for report in reports:
        label = report.variant if report.seed is None else f"{report.variant} [{report.seed}]"
        cells = [label]
        for domain in domains:
            metrics = report.domains.get(domain)
            values = metrics.as_tuple() if metrics else (None, None, None)
            cells.extend(_fmt(v) for v in values)
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in [header] + body
    ]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def median_metric(reports: Sequence[MetricsReport], domain: str, name: str) -> float:
    """Median of one metric across reports, ignoring n/a values."""
    values = [v for v in (r.metric(domain, name) for r in reports) if v is not None]
    return float(np.median(values)) if values else math.nan
