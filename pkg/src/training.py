"""Joint training loop, checkpoints and multi-run experiments."""

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy import stats

from src.cdsgraph import write_triplets
from src.config import Config, DataConfig, TrainConfig
from src.dataio import (
    DatasetSplit,
    NextItemExample,
    make_batches,
    make_examples,
    parse_dataset,
    split_dataset,
    synthesize,
    write_dataset,
)
from src.diffcore import NumericError
from src.evaluation import MetricsReport, RankingMetrics, evaluate_model, median_metric
from src.model import BatchLosses, ModelParams, forward_batch
from src.monitoring import TrainingMetricsCollector
from src.optim import Adam
from src.utils import derive_seed, write_yaml

logger = logging.getLogger(__name__)

TRACE_HEADER = ("epoch", "batch", "L_A", "L_B", "L_sA", "L_sB", "joint")


@dataclass
class LossRecord:
    """Loss components of one optimizer step."""

    epoch: int
    batch: int
    loss_a: float
    loss_b: float
    ssl_a: float
    ssl_b: float
    joint: float

    @classmethod
    def from_values(cls, epoch: int, batch: int, values: Dict[str, float]) -> "LossRecord":
        components = (values[name] for name in TRACE_HEADER[2:])
        return cls(epoch, batch, *components)

    def as_row(self) -> List[str]:
        losses = (self.loss_a, self.loss_b, self.ssl_a, self.ssl_b, self.joint)
        return [str(self.epoch), str(self.batch)] + [repr(v) for v in losses]


@dataclass
class EpochResult:
    epoch: int
    mean_joint: float
    seconds: float
    records: List[LossRecord] = field(default_factory=list)


@dataclass
class FitResult:
    """Outcome of a full training run."""

    epochs_run: int
    history: List[EpochResult]
    best_epoch: Optional[int] = None
    best_score: Optional[float] = None
    stopped_early: bool = False

    @property
    def trace(self) -> List[LossRecord]:
        return [r for epoch in self.history for r in epoch.records]


class Trainer:
    """Owns model parameters and optimizer state for one training run."""

    def __init__(
        self,
        cfg: TrainConfig,
        num_items_a: int,
        num_users: int,
        num_items_b: int,
        variant: str = "EA-GCL",
        collector: Optional[TrainingMetricsCollector] = None,
        output_dir: Optional[Union[str, Path]] = None,
        eval_k: int = 10,
    ) -> None:
        """
        Initialize trainer.

        Args:
            cfg: Training configuration
            num_items_a: Size of the A vocabulary (m)
            num_users: Number of users (p)
            num_items_b: Size of the B vocabulary (n)
            variant: Name used in logs and metrics
            collector: Optional metrics collector
            output_dir: Where graph dumps and failure diagnostics go
            eval_k: Cutoff of the early-stopping metric
        """
        self.cfg = cfg
        self.variant = variant
        self.collector = collector
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.eval_k = eval_k
        self.params = ModelParams.initialize(
            num_items_a,
            num_users,
            num_items_b,
            cfg.embedding_size,
            cfg.layers,
            derive_seed(cfg.seed, "init"),
        )
        self.optimizer = Adam(self.params.named_tensors(), lr=cfg.lr)
        self.epoch = 0

    @property
    def steps(self) -> int:
        return self.optimizer.state.step

    def _diagnostics_dir(self) -> Path:
        directory = self.output_dir if self.output_dir is not None else Path.cwd()
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    def _dump_failed_batch(
        self, batch: Sequence[NextItemExample], index: int, seed: int, error: Exception
    ) -> Path:
        stem = self._diagnostics_dir() / f"failed_batch_e{self.epoch}_b{index}"
        write_dataset(stem.with_suffix(".tsv"), [ex.prefix for ex in batch])
        write_yaml(
            stem.with_suffix(".yaml"),
            {
                "epoch": self.epoch,
                "batch": index,
                "seed": seed,
                "error": str(error),
                "targets": [[ex.target_a, ex.target_b] for ex in batch],
            },
        )
        return stem

    def _dump_graphs(self, losses: BatchLosses) -> None:
        directory = self._diagnostics_dir() / "graphs"
        directory.mkdir(parents=True, exist_ok=True)
        write_triplets(losses.graph.matrix, directory / "M.txt")
        if losses.views is not None:
            write_triplets(losses.views[0].matrix, directory / "V1.txt")
            write_triplets(losses.views[1].matrix, directory / "V2.txt")
        logger.info("Dumped first-batch graphs to %s", directory)

    def _check_gradients(self) -> None:
        for name, tensor in self.params.named_tensors().items():
            if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
                raise NumericError(f"Non-finite gradient for parameter '{name}'")

    def train_epoch(self, examples: Sequence[NextItemExample]) -> EpochResult:
        """
        Run one epoch: one optimizer step per shuffled batch.

        Returns:
            EpochResult with per-batch loss records

        Raises:
            NumericError: If a loss or gradient is not finite; the offending
                batch is written next to the run's artifacts first
        """
        if not examples:
            raise ValueError("Cannot train on an empty example set")
        self.epoch += 1
        started = time.perf_counter()
        batches = make_batches(
            list(examples), self.cfg.batch_size, derive_seed(self.cfg.seed, self.epoch, "shuffle")
        )
        records: List[LossRecord] = []
        for index, batch in enumerate(batches):
            batch_started = time.perf_counter()
            seed = derive_seed(self.cfg.seed, self.epoch, index)
            self.optimizer.zero_grad()
            try:
                losses = forward_batch(self.params, batch, self.cfg, seed, train=True)
                losses.objective.backward()
                self._check_gradients()
            except NumericError as e:
                stem = self._dump_failed_batch(batch, index, seed, e)
                logger.error(
                    "Non-finite values in epoch %d batch %d; batch written to %s",
                    self.epoch,
                    index,
                    stem,
                )
                raise
            if self.cfg.dump_graphs and self.epoch == 1 and index == 0:
                self._dump_graphs(losses)
            self.optimizer.step()

            values = losses.values()
            records.append(LossRecord.from_values(self.epoch, index, values))
            if self.collector:
                self.collector.record_batch(
                    self.variant, self.epoch, index, values, time.perf_counter() - batch_started
                )
            logger.debug("Epoch %d batch %d: %s", self.epoch, index, values)

        mean_joint = float(np.mean([r.joint for r in records]))
        result = EpochResult(self.epoch, mean_joint, time.perf_counter() - started, records)
        if self.collector:
            self.collector.record_epoch(self.variant, self.epoch, mean_joint)
        logger.info(
            "%s epoch %d: mean joint loss %.4f (%d batches, %.2fs)",
            self.variant,
            self.epoch,
            mean_joint,
            len(batches),
            result.seconds,
        )
        return result

    def fit(
        self,
        train_examples: Sequence[NextItemExample],
        valid_examples: Optional[Sequence[NextItemExample]] = None,
    ) -> FitResult:
        """
        Train for the configured number of epochs.

        With validation examples, stops once the mean RC@K over both domains
        has not improved for ``patience`` epochs and restores the best
        parameters.
        """
        history: List[EpochResult] = []
        best_score: Optional[float] = None
        best_epoch: Optional[int] = None
        best_arrays: Optional[Dict[str, np.ndarray]] = None
        stale = 0
        stopped_early = False

        for _ in range(self.cfg.epochs):
            history.append(self.train_epoch(train_examples))
            if not valid_examples:
                continue
            report = evaluate_model(
                self.params, valid_examples, self.cfg, k=self.eval_k, variant=self.variant
            )
            score = _mean_recall(report)
            if best_score is None or score > best_score:
                best_score, best_epoch, stale = score, self.epoch, 0
                best_arrays = self.params.arrays()
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    stopped_early = True
                    logger.info(
                        "Early stopping at epoch %d; best epoch %s (RC@%d %.4f)",
                        self.epoch,
                        best_epoch,
                        self.eval_k,
                        best_score,
                    )
                    break

        if best_arrays is not None and best_epoch != self.epoch:
            self.params.load_arrays(best_arrays)
        return FitResult(
            epochs_run=len(history),
            history=history,
            best_epoch=best_epoch,
            best_score=best_score,
            stopped_early=stopped_early,
        )


def _mean_recall(report: MetricsReport) -> float:
    values = [m.rc for m in report.domains.values() if m.rc is not None]
    return float(np.mean(values)) if values else 0.0


def write_loss_trace(records: Sequence[LossRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        writer.writerows(r.as_row() for r in records)
    return path


def _encode_key(key: str) -> str:
    return key.replace("/", "|")


def save_checkpoint(trainer: Trainer, directory: Union[str, Path]) -> Path:
    """
    Write params.npz, optimizer.npz and manifest.yaml into ``directory``.

    Returns:
        The checkpoint directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = trainer.params.arrays()
    np.savez(directory / "params.npz", **arrays)
    np.savez(
        directory / "optimizer.npz",
        **{_encode_key(k): v for k, v in trainer.optimizer.state_arrays().items()},
    )
    params = trainer.params
    write_yaml(
        directory / "manifest.yaml",
        {
            "variant": trainer.variant,
            "epoch": trainer.epoch,
            "step": trainer.steps,
            "seed": trainer.cfg.seed,
            "counts": {
                "num_items_a": params.num_items_a,
                "num_users": params.num_users,
                "num_items_b": params.num_items_b,
            },
            "parameters": {name: list(value.shape) for name, value in arrays.items()},
            "checksum": params.checksum(),
            "train": dataclasses.asdict(trainer.cfg),
        },
    )
    logger.info("Saved checkpoint at epoch %d to %s", trainer.epoch, directory)
    return directory


def load_checkpoint(
    directory: Union[str, Path],
    collector: Optional[TrainingMetricsCollector] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> Trainer:
    """
    Rebuild a trainer from a checkpoint directory.

    Raises:
        FileNotFoundError: If a checkpoint file is missing
        ContractError: If stored arrays do not match the model
    """
    directory = Path(directory)
    with open(directory / "manifest.yaml", "r", encoding="utf-8") as f:
        manifest = yaml.safe_load(f)
    counts = manifest["counts"]
    trainer = Trainer(
        TrainConfig(**manifest["train"]),
        counts["num_items_a"],
        counts["num_users"],
        counts["num_items_b"],
        variant=manifest.get("variant", "EA-GCL"),
        collector=collector,
        output_dir=output_dir,
    )
    with np.load(directory / "params.npz") as stored:
        trainer.params.load_arrays({k: stored[k] for k in stored.files})
    with np.load(directory / "optimizer.npz") as stored:
        trainer.optimizer.load_state_arrays(
            {k.replace("|", "/"): stored[k] for k in stored.files}
        )
    trainer.epoch = int(manifest["epoch"])
    logger.info("Loaded checkpoint from %s (epoch %d)", directory, trainer.epoch)
    return trainer


def prepare_data(
    cfg: DataConfig, sidecar_dir: Optional[Union[str, Path]] = None
) -> DatasetSplit:
    """
    Load the configured TSV (or synthesize one) and split it.

    When a file is loaded and ``sidecar_dir`` is given, the original-id map is
    written there as index_map.yaml.
    """
    if cfg.path:
        dataset = parse_dataset(cfg.path)
        sequences, counts = dataset.sequences, dataset.counts
        if sidecar_dir is not None and dataset.index_map is not None:
            Path(sidecar_dir).mkdir(parents=True, exist_ok=True)
            dataset.index_map.save(Path(sidecar_dir) / "index_map.yaml")
    else:
        synth = cfg.synth
        sequences = synthesize(synth)
        counts = (synth.num_items_a, synth.num_items_b, synth.num_users)
    return split_dataset(sequences, cfg.train_fraction, cfg.split_seed, counts=counts)


@dataclass(frozen=True)
class Variant:
    """One ablation configuration; beta None keeps the configured value."""

    name: str
    use_ea: bool
    augmentation: str
    beta: Optional[float] = None

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        beta = cfg.beta if self.beta is None else self.beta
        return dataclasses.replace(
            cfg, use_ea=self.use_ea, augmentation=self.augmentation, beta=beta
        )


DEFAULT_VARIANTS: Tuple[Variant, ...] = (
    Variant("EA-GCL (ID)", True, "ID"),
    Variant("EA-GCL (SR)", True, "SR"),
    Variant("GCL (ID)-EA", False, "ID"),
    Variant("GCL (SR)-EA", False, "SR"),
    Variant("GCL-CL", True, "none", 0.0),
    Variant("GCL-ALL", False, "none", 0.0),
)


@dataclass
class RunResult:
    variant: str
    seed: int
    report: MetricsReport
    fit: FitResult
    trainer: Trainer


def run_experiment(
    config: Config,
    split: DatasetSplit,
    variant: Optional[Variant] = None,
    seed: Optional[int] = None,
    collector: Optional[TrainingMetricsCollector] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> RunResult:
    """
    Train one model on ``split.train`` and evaluate it on ``split.test``.

    Args:
        config: Full configuration
        split: Train/test split
        variant: Ablation variant applied on top of ``config.train``
        seed: Overrides the training seed
        collector: Optional metrics collector
        output_dir: Directory for diagnostics

    Returns:
        RunResult with the test report and the trained model
    """
    cfg = variant.apply(config.train) if variant else config.train
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    name = variant.name if variant else "EA-GCL"

    train_sequences = split.train
    valid_examples: Optional[List[NextItemExample]] = None
    if cfg.valid_fraction > 0 and len(train_sequences) >= 2:
        inner = split_dataset(
            train_sequences,
            1.0 - cfg.valid_fraction,
            derive_seed(cfg.seed, "valid"),
            counts=(split.num_items_a, split.num_items_b, split.num_users),
        )
        train_sequences = inner.train
        valid_examples = make_examples(inner.test)

    trainer = Trainer(
        cfg,
        split.num_items_a,
        split.num_users,
        split.num_items_b,
        variant=name,
        collector=collector,
        output_dir=output_dir,
        eval_k=config.evaluation.k,
    )
    fit = trainer.fit(make_examples(train_sequences), valid_examples)
    report = evaluate_model(
        trainer.params,
        make_examples(split.test),
        cfg,
        k=config.evaluation.k,
        workers=config.evaluation.workers,
        variant=name,
        seed=cfg.seed,
    )
    if collector:
        collector.record_evaluation(
            name,
            {
                domain: {"RC": m.rc, "MRR": m.mrr, "NDCG": m.ndcg}
                for domain, m in report.domains.items()
            },
        )
    return RunResult(variant=name, seed=cfg.seed, report=report, fit=fit, trainer=trainer)


@dataclass
class AblationReport:
    """Test reports of every (variant, seed) run."""

    k: int
    reports: List[MetricsReport] = field(default_factory=list)

    def variants(self) -> List[str]:
        names: List[str] = []
        for report in self.reports:
            if report.variant not in names:
                names.append(report.variant)
        return names

    def median(self, variant: str, domain: str, metric: str) -> float:
        return median_metric(
            [r for r in self.reports if r.variant == variant], domain, metric
        )

    def summary(self) -> List[MetricsReport]:
        """One report per variant holding the per-seed medians."""
        summary = []
        for variant in self.variants():
            runs = [r for r in self.reports if r.variant == variant]
            domains = {}
            for domain in runs[0].domains:
                values = [
                    self.median(variant, domain, metric) for metric in ("rc", "mrr", "ndcg")
                ]
                domains[domain] = RankingMetrics(
                    *[None if np.isnan(v) else v for v in values],
                    count=sum(r.domains[domain].count for r in runs),
                )
            summary.append(MetricsReport(k=self.k, domains=domains, variant=variant))
        return summary


def ablate(
    config: Config,
    split: DatasetSplit,
    variants: Sequence[Variant] = DEFAULT_VARIANTS,
    seeds: Optional[Sequence[int]] = None,
    collector: Optional[TrainingMetricsCollector] = None,
) -> AblationReport:
    """Train every variant under every seed on the same split."""
    seeds = list(seeds) if seeds is not None else list(config.experiment.seeds)
    report = AblationReport(k=config.evaluation.k)
    for variant in variants:
        for seed in seeds:
            logger.info("Ablation run: %s, seed %d", variant.name, seed)
            result = run_experiment(config, split, variant, seed, collector)
            report.reports.append(result.report)
    logger.info("Ablation finished: %d runs", len(report.reports))
    return report


@dataclass
class TimingPoint:
    fraction: float
    num_sequences: int
    seconds: float
    variance: float


@dataclass
class TimingReport:
    """Per-epoch wall time against training-set fraction, with a linear fit."""

    points: List[TimingPoint]
    slope: Optional[float] = None
    intercept: Optional[float] = None
    r_squared: Optional[float] = None

    def rows(self) -> List[Dict[str, str]]:
        r2 = "n/a" if self.r_squared is None else f"{self.r_squared:.4f}"
        return [
            {
                "fraction": f"{p.fraction:.1f}",
                "sequences": str(p.num_sequences),
                "seconds": f"{p.seconds:.6f}",
                "variance": f"{p.variance:.3e}",
                "r_squared": r2,
            }
            for p in self.points
        ]


def linear_fit(
    x: Sequence[float], y: Sequence[float]
) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """Least-squares line through (x, y); (None, None, None) with fewer than two distinct x."""
    if len(set(x)) < 2:
        return None, None, None
    fit = stats.linregress(x, y)
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


def timing_study(
    config: Config,
    split: DatasetSplit,
    fractions: Optional[Sequence[float]] = None,
    repeats: Optional[int] = None,
) -> TimingReport:
    """
    Time one training epoch on growing prefixes of a fixed shuffle of the
    training sequences.
    """
    fractions = list(fractions) if fractions is not None else config.experiment.timing_fractions
    repeats = repeats if repeats is not None else config.experiment.timing_repeats
    order = np.random.default_rng(derive_seed(config.train.seed, "timing")).permutation(
        len(split.train)
    )
    points: List[TimingPoint] = []
    for fraction in fractions:
        count = max(1, int(round(fraction * len(split.train))))
        examples = make_examples([split.train[i] for i in order[:count]])
        durations = []
        for _ in range(repeats):
            trainer = Trainer(
                config.train, split.num_items_a, split.num_users, split.num_items_b
            )
            durations.append(trainer.train_epoch(examples).seconds)
        points.append(
            TimingPoint(fraction, count, float(np.mean(durations)), float(np.var(durations)))
        )
        logger.info(
            "Timing: fraction %.1f, %d sequences, %.3fs", fraction, count, points[-1].seconds
        )

    slope, intercept, r_squared = linear_fit(
        [p.fraction for p in points], [p.seconds for p in points]
    )
    return TimingReport(points=points, slope=slope, intercept=intercept, r_squared=r_squared)


SWEEP_PARAMETERS = ("alpha", "beta")


def sweep(
    config: Config,
    split: DatasetSplit,
    parameter: str,
    values: Optional[Sequence[float]] = None,
    seeds: Optional[Sequence[int]] = None,
) -> List[MetricsReport]:
    """
    Train EA-GCL (ID) across values of alpha or beta.

    Each report's variant is labeled ``<parameter>=<value>``.

    Raises:
        ValueError: On an unknown parameter
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"Sweep parameter must be one of {SWEEP_PARAMETERS}, got {parameter}")
    values = list(values) if values is not None else config.experiment.sweep_values
    seeds = list(seeds) if seeds is not None else config.experiment.seeds
    reports = []
    for value in values:
        base = dataclasses.replace(config.train, **{parameter: value})
        swept = dataclasses.replace(config, train=base)
        variant = Variant(f"{parameter}={value:g}", True, "ID")
        for seed in seeds:
            reports.append(run_experiment(swept, split, variant, seed).report)
    return reports
