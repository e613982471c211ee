#!/usr/bin/env python3
"""
Logging and Run Monitoring

What: Logger setup for the `varlat` logger tree and a run monitor that times
      every command and records its resource use
How: stdlib logging with a detailed daily file handler, a console handler and
     an errors-only file; psutil for resident memory; metrics buffered and
     flushed as JSON next to the logs
"""

import json
import logging
import sys
import time
import traceback
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import psutil

ROOT_LOGGER = "varlat"
PACKAGE_LOGGER = "src"
METRICS_FLUSH_THRESHOLD = 1000

DETAILED_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"
SIMPLE_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

_HANDLER_MARK = "_varlat_handler"


def setup_logging(log_dir: Optional[Union[str, Path]] = "logs", level: str = "INFO",
                  console: bool = True) -> logging.Logger:
    """
    Configure the varlat logger tree

    Module loggers are named after their module (`src.<module>`), so the same
    handlers go on both the `varlat` and `src` loggers. Calling this again
    replaces the handlers instead of stacking them.

    Args:
        log_dir: Directory for varlat_<YYYYMMDD>.log and errors_<YYYYMMDD>.log;
                 None disables file logging
        level: Console level name
        console: Attach a stderr handler

    Returns:
        logging.Logger: the `varlat` logger
    """
    detailed = logging.Formatter(DETAILED_FORMAT)
    simple = logging.Formatter(SIMPLE_FORMAT)
    handlers: List[logging.Handler] = []

    if log_dir is not None:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d")

        file_handler = logging.FileHandler(log_path / f"varlat_{stamp}.log")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed)
        handlers.append(file_handler)

        error_handler = logging.FileHandler(log_path / f"errors_{stamp}.log")
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(detailed)
        handlers.append(error_handler)

    if console:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(getattr(logging, level.upper(), logging.INFO))
        console_handler.setFormatter(simple)
        handlers.append(console_handler)

    for handler in handlers:
        setattr(handler, _HANDLER_MARK, True)

    for name in (ROOT_LOGGER, PACKAGE_LOGGER):
        target = logging.getLogger(name)
        for old in [h for h in target.handlers if getattr(h, _HANDLER_MARK, False)]:
            target.removeHandler(old)
            old.close()
        target.setLevel(logging.DEBUG)
        for handler in handlers:
            target.addHandler(handler)

    return logging.getLogger(ROOT_LOGGER)


@dataclass
class MetricData:
    timestamp: datetime
    component: str
    metric_type: str
    value: float
    unit: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["timestamp"] = self.timestamp.isoformat()
        return data


class RunMonitor:
    """
    Times commands and keeps their metrics

    Usage:
        monitor = RunMonitor(log_dir)
        with monitor.monitor_operation("sim", "cli"):
            run_sim(config)
        monitor.shutdown()
    """

    def __init__(self, metrics_dir: Optional[Union[str, Path]] = None):
        self.metrics_dir = Path(metrics_dir) if metrics_dir is not None else None
        self.start_time = datetime.now()
        self.metrics_buffer: List[MetricData] = []
        self.flushed = 0
        self.logger = logging.getLogger(f"{ROOT_LOGGER}.monitor")

    def record_metric(self, component: str, metric_type: str, value: float,
                      unit: str = "", metadata: Optional[Dict[str, Any]] = None) -> None:
        metric = MetricData(datetime.now(), component, metric_type, value, unit, metadata or {})
        self.metrics_buffer.append(metric)
        self.logger.debug(f"Metric recorded: {component}.{metric_type} = {value} {unit}")
        if len(self.metrics_buffer) > METRICS_FLUSH_THRESHOLD:
            self.flush_metrics()

    def flush_metrics(self) -> Optional[Path]:
        """
        Append buffered metrics to metrics_<YYYYMMDD>.json

        Returns:
            Path or None: the metrics file, None when nothing was written
        """
        if not self.metrics_buffer or self.metrics_dir is None:
            return None
        metrics_file = self.metrics_dir / f"metrics_{datetime.now().strftime('%Y%m%d')}.json"
        try:
            self.metrics_dir.mkdir(parents=True, exist_ok=True)
            existing: List[Dict[str, Any]] = []
            if metrics_file.exists():
                with open(metrics_file, "r", encoding="utf-8") as f:
                    existing = json.load(f)
            existing.extend(m.to_dict() for m in self.metrics_buffer)
            with open(metrics_file, "w", encoding="utf-8") as f:
                json.dump(existing, f, indent=2)
        except (OSError, ValueError) as e:
            self.logger.error(f"Failed to flush metrics: {e}")
            return None
        self.logger.info(f"Flushed {len(self.metrics_buffer)} metrics to {metrics_file}")
        self.flushed += len(self.metrics_buffer)
        self.metrics_buffer.clear()
        return metrics_file

    @contextmanager
    def monitor_operation(self, operation_name: str, component: str = "cli") -> Iterator[None]:
        """
        Time an operation and record its RSS delta

        Failures are recorded with status "failed" and re-raised.
        """
        process = psutil.Process()
        start = time.perf_counter()
        start_rss = process.memory_info().rss
        self.logger.info(f"Starting operation: {operation_name}")
        try:
            yield
        except Exception as e:
            duration = time.perf_counter() - start
            self.record_metric(component, "operation_duration", duration, "seconds",
                               {"operation": operation_name, "status": "failed", "error": str(e)})
            self.logger.error(f"Operation failed: {operation_name} ({duration:.2f}s) - {e}")
            self.logger.debug(traceback.format_exc())
            raise
        duration = time.perf_counter() - start
        rss_delta = process.memory_info().rss - start_rss
        self.record_metric(component, "operation_duration", duration, "seconds",
                           {"operation": operation_name, "status": "success"})
        self.record_metric(component, "memory_usage", rss_delta, "bytes",
                           {"operation": operation_name, "type": "delta"})
        self.logger.info(f"Operation completed: {operation_name} ({duration:.2f}s)")

    def shutdown(self) -> None:
        self.flush_metrics()
        self.logger.info(f"Monitoring session completed. Duration: {datetime.now() - self.start_time}")
