"""Prometheus metrics for training and evaluation runs."""

import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("L_A", "L_B", "L_sA", "L_sB", "joint")


class TrainingMetricsCollector:
    """Collector for training and evaluation metrics of one run."""

    def __init__(self, registry: Optional[CollectorRegistry] = None) -> None:
        """
        Initialize metrics collector.

        Args:
            registry: Registry to publish into (a private one by default, so
                several collectors can coexist in one process)
        """
        self.registry = registry or CollectorRegistry()
        self.run_status: Dict[str, Any] = {"status": "idle"}
        self.lock = threading.Lock()

        self.optimizer_steps_total = Counter(
            "eagcl_optimizer_steps_total",
            "Total number of optimizer steps",
            ["variant"],
            registry=self.registry,
        )
        self.batch_loss = Gauge(
            "eagcl_batch_loss",
            "Loss components of the most recent batch",
            ["variant", "component"],
            registry=self.registry,
        )
        self.batch_duration_seconds = Histogram(
            "eagcl_batch_duration_seconds",
            "Wall time of one training batch in seconds",
            ["variant"],
            buckets=(0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0),
            registry=self.registry,
        )
        self.epoch = Gauge(
            "eagcl_last_epoch",
            "Last finished training epoch",
            ["variant"],
            registry=self.registry,
        )
        self.epoch_loss = Gauge(
            "eagcl_epoch_joint_loss",
            "Mean joint loss of the last finished epoch",
            ["variant"],
            registry=self.registry,
        )
        self.ranking_metric = Gauge(
            "eagcl_ranking_metric",
            "Ranking metric of the latest evaluation",
            ["variant", "domain", "metric"],
            registry=self.registry,
        )

    def record_batch(
        self, variant: str, epoch: int, batch: int, losses: Mapping[str, float], duration: float
    ) -> None:
        """
        Record one optimizer step.

        Args:
            variant: Model variant name
            epoch: Epoch number (1-based)
            batch: Batch index within the epoch
            losses: Loss components keyed by LOSS_COMPONENTS
            duration: Batch wall time in seconds
        """
        self.optimizer_steps_total.labels(variant=variant).inc()
        self.batch_duration_seconds.labels(variant=variant).observe(duration)
        for component in LOSS_COMPONENTS:
            if component in losses:
                self.batch_loss.labels(variant=variant, component=component).set(
                    losses[component]
                )

        with self.lock:
            self.run_status = {
                "status": "training",
                "variant": variant,
                "epoch": epoch,
                "batch": batch,
                "updated_at": datetime.now(timezone.utc).isoformat(),
            }

    def record_epoch(self, variant: str, epoch: int, mean_joint: float) -> None:
        self.epoch.labels(variant=variant).set(epoch)
        self.epoch_loss.labels(variant=variant).set(mean_joint)
        with self.lock:
            self.run_status.update({"epoch": epoch, "epoch_joint_loss": mean_joint})

    def record_evaluation(
        self, variant: str, metrics: Mapping[str, Mapping[str, Optional[float]]]
    ) -> None:
        """
        Record ranking metrics, skipping values that could not be computed.

        Args:
            variant: Model variant name
            metrics: domain -> metric name -> value
        """
        for domain, values in metrics.items():
            for name, value in values.items():
                if value is not None:
                    self.ranking_metric.labels(variant=variant, domain=domain, metric=name).set(
                        value
                    )

        with self.lock:
            self.run_status = {
                "status": "evaluated",
                "variant": variant,
                "updated_at": datetime.now(timezone.utc).isoformat(),
            }

    def get_run_status(self) -> Dict[str, Any]:
        """
        Get current run status.

        Returns:
            Copy of the status dictionary
        """
        with self.lock:
            return self.run_status.copy()

    def write_textfile(self, path: Union[str, Path]) -> Path:
        """Dump the registry in the Prometheus text exposition format."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self.registry)
        logger.info("Wrote metrics to %s", path)
        return path
