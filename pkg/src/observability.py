"""
Observability - Logging setup and OpenTelemetry metrics for pipeline runs

Metrics are recorded through OpenTelemetry instruments. They are exported to
stderr at process exit when SMOKESEG_METRICS_CONSOLE is set, and otherwise
stay in-process (tests attach an InMemoryMetricReader).

Key metrics tracked:
- Training steps (count, duration, data loss)
- Dataset records written/skipped
- Gradient-check outcomes and errors
- Frame classifications

Usage:
    from src.observability import configure_logging, record_train_step

    configure_logging()
    with record_train_step(step=12) as observe:
        loss = run_step()
        observe(loss)
"""

import json
import logging
import os
import sys
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager

from opentelemetry import metrics
from opentelemetry.sdk.metrics import MeterProvider
from opentelemetry.sdk.metrics.export import (
    ConsoleMetricExporter,
    MetricReader,
    PeriodicExportingMetricReader,
)
from opentelemetry.sdk.resources import Resource

from src import __version__
from src.config import settings

logger = logging.getLogger("smokeseg")

# =============================================================================
# Logging Setup
# =============================================================================

_RESERVED_RECORD_KEYS = set(logging.makeLogRecord({}).__dict__) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    """One JSON object per record, including any `extra=` fields."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S%z"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        payload.update({k: v for k, v in record.__dict__.items() if k not in _RESERVED_RECORD_KEYS})
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def configure_logging(level: str | None = None, fmt: str | None = None) -> None:
    """
    Install a single stderr handler on the "smokeseg" logger.

    Args:
        level: Log level name (defaults to SMOKESEG_LOG_LEVEL)
        fmt: "text" or "json" (defaults to SMOKESEG_LOG_FORMAT)
    """
    root = logging.getLogger("smokeseg")
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    if (fmt or settings.log_format) == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))

    root.addHandler(handler)
    root.setLevel(level or settings.log_level)
    root.propagate = False


# =============================================================================
# OpenTelemetry Setup
# =============================================================================

resource = Resource.create(
    {
        "service.name": "smokeseg",
        "service.version": __version__,
        "deployment.environment": os.getenv("ENVIRONMENT", "desk"),
    }
)


def build_meter_provider(extra_readers: list[MetricReader] | None = None) -> MeterProvider:
    """Create the provider; console export only when SMOKESEG_METRICS_CONSOLE is set."""
    readers: list[MetricReader] = list(extra_readers or [])
    if settings.metrics_console:
        readers.append(
            PeriodicExportingMetricReader(ConsoleMetricExporter(out=sys.stderr), export_interval_millis=60_000)
        )
    return MeterProvider(resource=resource, metric_readers=readers)


meter_provider = build_meter_provider()
metrics.set_meter_provider(meter_provider)

meter = metrics.get_meter("smokeseg", __version__)

# =============================================================================
# Training Metrics
# =============================================================================

train_steps_total = meter.create_counter(
    name="train_steps_total",
    description="Optimizer steps completed",
    unit="steps",
)

train_step_duration_seconds = meter.create_histogram(
    name="train_step_duration_seconds",
    description="Wall time of forward + backward + update",
    unit="s",
)

train_data_loss = meter.create_histogram(
    name="train_data_loss",
    description="Cross-entropy data term per step",
    unit="nats",
)

# =============================================================================
# Data / Gradcheck / Detection Metrics
# =============================================================================

dataset_records_total = meter.create_counter(
    name="dataset_records_total",
    description="Composite records processed",
    unit="records",
)

gradcheck_runs_total = meter.create_counter(
    name="gradcheck_runs_total",
    description="Gradient checks run",
    unit="checks",
)

gradcheck_max_relative_error = meter.create_histogram(
    name="gradcheck_max_relative_error",
    description="Maximum relative error per gradient check",
    unit="1",
)

frames_classified_total = meter.create_counter(
    name="frames_classified_total",
    description="Frames classified by the pixel-count detector",
    unit="frames",
)

# =============================================================================
# Helper Functions
# =============================================================================


@contextmanager
def record_train_step(step: int) -> Iterator[Callable[[float], None]]:
    """
    Context manager recording one optimizer step.

    Yields a callback that records the step's data loss.

    Example:
        with record_train_step(step) as observe:
            observe(data_loss)
    """
    start_time = time.perf_counter()
    status = "unknown"

    def observe(data_loss: float) -> None:
        train_data_loss.record(data_loss)

    try:
        yield observe
        status = "success"
    except Exception:
        status = "failure"
        raise
    finally:
        duration = time.perf_counter() - start_time
        train_step_duration_seconds.record(duration, attributes={"status": status})
        train_steps_total.add(1, attributes={"status": status})
        logger.debug(f"Train step recorded: {step} - {status} ({duration:.3f}s)")


def record_dataset_record(written: bool) -> None:
    """Count one composite record as written or skipped."""
    dataset_records_total.add(1, attributes={"status": "written" if written else "skipped"})


def record_gradcheck(target: str, max_relative_error: float, passed: bool) -> None:
    """
    Record a gradient-check outcome.

    Args:
        target: Kernel or network name
        max_relative_error: Reported error
        passed: Whether it met the tolerance
    """
    gradcheck_runs_total.add(1, attributes={"target": target, "status": "pass" if passed else "fail"})
    gradcheck_max_relative_error.record(max_relative_error, attributes={"target": target})


def record_frame(is_smoke: bool) -> None:
    """Count one classified frame."""
    frames_classified_total.add(1, attributes={"label": "smoke" if is_smoke else "non_smoke"})


def shutdown_metrics() -> None:
    """Flush exporters; called once at CLI exit."""
    meter_provider.shutdown()
