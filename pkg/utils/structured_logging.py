"""
Structured Logging and Error Tracking System
Provides JSON-line logging with pipeline fields and error tracking for run directories
"""
import logging
import json
import traceback
import uuid
from datetime import datetime
from typing import Dict, Any, Optional, List
from core.config import UTC, LOG_LEVEL
import sys
import os

# Extra fields copied onto the JSON record when present on the LogRecord
STRUCTURED_FIELDS = (
    "run_id", "stage", "modality", "regime", "epoch", "step", "loss", "val_loss",
    "metric", "value", "duration", "error_code", "category", "severity", "details",
    "label", "accepted", "rejected", "path",
)


class StructuredFormatter(logging.Formatter):
    """Custom formatter for structured JSON logging"""

    def format(self, record):
        log_entry = {
            "timestamp": datetime.now(UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        for field in STRUCTURED_FIELDS:
            if hasattr(record, field):
                log_entry[field] = getattr(record, field)

        if record.exc_info:
            log_entry["exception"] = {
                "type": record.exc_info[0].__name__,
                "message": str(record.exc_info[1]),
                "traceback": traceback.format_exception(*record.exc_info)
            }

        return json.dumps(log_entry, ensure_ascii=False, default=str)


class ErrorTracker:
    """Centralized error tracking, summarized into stage manifests"""

    def __init__(self):
        self.error_counts = {}
        self.recent_errors = []
        self.max_recent_errors = 100

    def track_error(self, error_type: str, error_message: str, context: Dict[str, Any] = None):
        """Track error occurrence"""
        error_id = str(uuid.uuid4())
        error_data = {
            "error_id": error_id,
            "error_type": error_type,
            "error_message": error_message,
            "timestamp": datetime.now(UTC).isoformat(),
            "context": context or {},
        }

        self.recent_errors.append(error_data)
        if len(self.recent_errors) > self.max_recent_errors:
            self.recent_errors.pop(0)

        self.error_counts[error_type] = self.error_counts.get(error_type, 0) + 1
        return error_id

    def get_error_stats(self) -> Dict[str, Any]:
        """Get error statistics"""
        return {
            "error_counts": dict(self.error_counts),
            "recent_errors_count": len(self.recent_errors),
            "total_errors": sum(self.error_counts.values()),
        }

    def get_recent_errors(self, limit: int = 10) -> List[Dict[str, Any]]:
        """Get recent errors"""
        return self.recent_errors[-limit:]

    def reset(self):
        self.error_counts.clear()
        self.recent_errors.clear()


class TrainingLogger:
    """Training and pipeline event logging"""

    def __init__(self):
        self.logger = logging.getLogger("training_logger")
        self.run_id: Optional[str] = None

    def _extra(self, **fields) -> Dict[str, Any]:
        fields["run_id"] = self.run_id
        return {k: v for k, v in fields.items() if v is not None}

    def log_stage_start(self, stage: str):
        self.logger.info(f"Stage started: {stage}", extra=self._extra(stage=stage))

    def log_stage_finish(self, stage: str, duration: float, status: str = "ok"):
        self.logger.info(f"Stage finished: {stage} ({status})", extra=self._extra(stage=stage, duration=round(duration, 3)))

    def log_epoch(self, stage: str, epoch: int, loss: float, val_loss: Optional[float] = None,
                  modality: Optional[str] = None, regime: Optional[str] = None):
        self.logger.info(
            f"{stage} epoch {epoch}: loss={loss:.6f}" + (f" val_loss={val_loss:.6f}" if val_loss is not None else ""),
            extra=self._extra(stage=stage, epoch=epoch, loss=loss, val_loss=val_loss, modality=modality, regime=regime),
        )

    def log_checkpoint(self, stage: str, epoch: int, path: str, reason: str,
                       modality: Optional[str] = None, regime: Optional[str] = None):
        self.logger.info(
            f"{stage} checkpoint from epoch {epoch} ({reason})",
            extra=self._extra(stage=stage, epoch=epoch, path=path, modality=modality, regime=regime),
        )

    def log_metric(self, stage: str, metric: str, value: float,
                   modality: Optional[str] = None, regime: Optional[str] = None):
        self.logger.info(
            f"{stage} {metric}={value:.4f}",
            extra=self._extra(stage=stage, metric=metric, value=value, modality=modality, regime=regime),
        )

    def log_gate_summary(self, modality: str, label: str, accepted: int, rejected: int):
        self.logger.info(
            f"Gate {modality}/{label}: accepted={accepted} rejected={rejected}",
            extra=self._extra(stage="gate", modality=modality, label=label, accepted=accepted, rejected=rejected),
        )


def setup_logging(run_dir: Optional[str] = None, level: str = LOG_LEVEL):
    """Setup structured logging configuration, optionally writing into a run directory"""

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level, logging.INFO))
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(StructuredFormatter())
    root_logger.addHandler(console_handler)

    training_logger = logging.getLogger("training_logger")
    training_logger.handlers.clear()

    if run_dir:
        log_dir = os.path.join(run_dir, "logs")
        os.makedirs(log_dir, exist_ok=True)

        file_handler = logging.FileHandler(os.path.join(log_dir, "pipeline.log"))
        file_handler.setFormatter(StructuredFormatter())
        root_logger.addHandler(file_handler)

        error_handler = logging.FileHandler(os.path.join(log_dir, "errors.log"))
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(StructuredFormatter())
        root_logger.addHandler(error_handler)

        training_handler = logging.FileHandler(os.path.join(log_dir, "training.log"))
        training_handler.setFormatter(StructuredFormatter())
        training_logger.addHandler(training_handler)

    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("diffusers").setLevel(logging.WARNING)


# Global instances
error_tracker = ErrorTracker()
training_logger = TrainingLogger()


def track_error(error_type: str, error_message: str, context: Dict[str, Any] = None) -> str:
    """Track error occurrence"""
    return error_tracker.track_error(error_type, error_message, context)


def get_performance_metrics() -> Dict[str, Any]:
    """Get process and system resource usage for stage manifests"""
    import psutil
    import time

    memory = psutil.virtual_memory()
    process = psutil.Process()
    process_memory = process.memory_info()

    return {
        "system": {
            "cpu_count": psutil.cpu_count(),
            "memory_total": memory.total,
            "memory_percent": memory.percent,
        },
        "process": {
            "cpu_percent": process.cpu_percent(),
            "memory_rss": process_memory.rss,
            "uptime_seconds": round(time.time() - process.create_time(), 3),
            "threads": process.num_threads(),
        },
        "timestamp": datetime.now(UTC).isoformat()
    }
