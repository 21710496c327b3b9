#!/usr/bin/env python3
"""
Run Metrics

Prometheus counters and gauges for a batch of selection runs, written as a
textfile (metrics.prom) next to the CSV reports. Each RunMetrics owns its
own registry so several harness invocations in one process do not collide.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
import logging
import threading

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, generate_latest, write_to_textfile

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.prom"

# Seconds; desk-scale runs take seconds to tens of minutes
WALL_BUCKETS = (1, 5, 15, 30, 60, 120, 300, 600, 1800, 3600, float("inf"))


@dataclass
class RunMetrics:
    """Thread-safe run metrics shared by concurrent harness workers."""
    registry: CollectorRegistry = field(default_factory=CollectorRegistry)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        self.runs = Counter(
            'msnas_runs_total',
            'Selection runs finished, by method and status',
            ['method', 'status'],
            registry=self.registry
        )
        self.wall_seconds = Histogram(
            'msnas_run_wall_seconds',
            'Wall time of one selection run',
            ['method'],
            buckets=WALL_BUCKETS,
            registry=self.registry
        )
        self.epochs = Counter(
            'msnas_epochs_total',
            'Training epochs, by phase (pretrain, search, posttrain)',
            ['phase'],
            registry=self.registry
        )
        self.selected = Counter(
            'msnas_selected_total',
            'Models chosen by a selection run',
            ['task', 'model'],
            registry=self.registry
        )
        self.last_auc = Gauge(
            'msnas_last_auc',
            'Test AUC of the most recently finished run',
            ['method'],
            registry=self.registry
        )

    def record_run(self, method: str, status: str, wall_seconds: float = 0.0,
                   epochs: Optional[dict] = None, task1: str = "", task2: str = "",
                   auc: Optional[float] = None):
        with self.lock:
            self.runs.labels(method=method, status=status).inc()
            if wall_seconds > 0:
                self.wall_seconds.labels(method=method).observe(wall_seconds)
            for phase, count in (epochs or {}).items():
                if count:
                    self.epochs.labels(phase=phase).inc(count)
            if task1:
                self.selected.labels(task="1", model=task1).inc()
            if task2:
                self.selected.labels(task="2", model=task2).inc()
            if auc is not None:
                self.last_auc.labels(method=method).set(auc)

    def render(self) -> bytes:
        with self.lock:
            return generate_latest(self.registry)

    def export(self, out_dir: str) -> Path:
        path = Path(out_dir) / METRICS_FILE
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with self.lock:
                write_to_textfile(str(path), self.registry)
        except OSError as e:
            raise OSError(f"Could not write run metrics to {path}: {e}") from e
        logger.info(f"Run metrics written to {path}")
        return path
