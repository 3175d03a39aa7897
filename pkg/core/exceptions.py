"""
Pipeline Error Handling System
Provides centralized exception handling with categorization, exit codes and logging
"""
from enum import Enum
from typing import Optional, Dict, Any
import logging
from datetime import datetime
from core.config import (
    UTC,
    EXIT_CONFIG_ERROR,
    EXIT_MISSING_DEPENDENCY,
    EXIT_NUMERICAL_FAILURE,
    EXIT_UNEXPECTED,
)

logger = logging.getLogger(__name__)


class ErrorCategory(Enum):
    """Categorize errors for reporting and exit-code mapping"""
    VALIDATION = "validation"
    CONFIGURATION = "configuration"
    DATA = "data"
    DEPENDENCY = "dependency"
    NUMERICAL = "numerical"
    SYSTEM = "system"


class ErrorSeverity(Enum):
    """Define error severity levels"""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class BaseCustomException(Exception):
    """Base class for all pipeline exceptions"""

    def __init__(
        self,
        message: str,
        category: ErrorCategory,
        severity: ErrorSeverity = ErrorSeverity.MEDIUM,
        exit_code: int = EXIT_UNEXPECTED,
        error_code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
        stage: Optional[str] = None,
    ):
        super().__init__(message)
        self.message = message
        self.category = category
        self.severity = severity
        self.exit_code = exit_code
        self.error_code = error_code or f"{category.value.upper()}_001"
        self.details = details or {}
        self.stage = stage
        self.timestamp = datetime.now(UTC).isoformat()

    def to_dict(self) -> Dict[str, Any]:
        """Convert exception to a dictionary for stage manifests and logs"""
        return {
            "error": True,
            "message": self.message,
            "category": self.category.value,
            "severity": self.severity.value,
            "error_code": self.error_code,
            "exit_code": self.exit_code,
            "details": self.details,
            "stage": self.stage,
            "timestamp": self.timestamp,
        }


# Validation Errors
class ValidationError(BaseCustomException, ValueError):
    """Raised when an operation receives inputs outside its contract"""
    def __init__(self, message: str, details: Optional[Dict] = None, **kwargs):
        super().__init__(
            message=message,
            category=ErrorCategory.VALIDATION,
            severity=ErrorSeverity.LOW,
            exit_code=kwargs.pop("exit_code", EXIT_CONFIG_ERROR),
            details=details,
            **kwargs
        )


class PreprocessingError(ValidationError):
    """Raised when an image cannot be preprocessed (blank B-scan, non-finite pixels)"""
    def __init__(self, message: str, modality: Optional[str] = None, **kwargs):
        details = {"modality": modality} if modality else {}
        super().__init__(message, details=details, **kwargs)
        self.error_code = "VALIDATION_PREPROCESS_001"


class ConstantImageError(ValidationError):
    """Raised when a correlation input has zero variance"""
    def __init__(self, message: str = "Image has zero variance", image_id: Optional[str] = None, **kwargs):
        details = {"image_id": image_id} if image_id is not None else {}
        super().__init__(message, details=details, **kwargs)
        self.image_id = image_id
        self.error_code = "VALIDATION_CONSTANT_IMAGE_001"


# Configuration Errors
class ConfigurationError(BaseCustomException, ValueError):
    """Raised when the experiment configuration is invalid"""
    def __init__(self, message: str = "Configuration error", field: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", None) or ({"field": field} if field else {})
        super().__init__(
            message=message,
            category=ErrorCategory.CONFIGURATION,
            severity=ErrorSeverity.HIGH,
            exit_code=EXIT_CONFIG_ERROR,
            error_code="CONFIG_001",
            details=details,
            **kwargs
        )


class ConfigMismatchError(ConfigurationError):
    """Raised when an upstream artifact was produced under a different configuration"""
    def __init__(self, upstream: str, expected: str, found: str, **kwargs):
        super().__init__(
            f"Stage '{upstream}' was produced under config {found[:12]}, current config is {expected[:12]}",
            details={"upstream": upstream, "expected_hash": expected, "found_hash": found},
            **kwargs
        )
        self.error_code = "CONFIG_MISMATCH_001"


# Data Errors
class DataIntegrityError(BaseCustomException, ValueError):
    """Raised when dataset invariants are violated"""
    def __init__(self, message: str, record: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", None) or ({"record": record} if record else {})
        super().__init__(
            message=message,
            category=ErrorCategory.DATA,
            severity=ErrorSeverity.HIGH,
            exit_code=EXIT_CONFIG_ERROR,
            error_code="DATA_001",
            details=details,
            **kwargs
        )


class StratificationError(DataIntegrityError):
    """Raised when no family-level split satisfies the stratification tolerance"""
    def __init__(self, message: str, blocking_family: Optional[str] = None, **kwargs):
        super().__init__(message, details={"blocking_family": blocking_family}, **kwargs)
        self.blocking_family = blocking_family
        self.error_code = "DATA_STRATIFICATION_001"


# Dependency Errors
class MissingArtifactError(BaseCustomException):
    """Raised when an upstream artifact needed by an operation does not exist"""
    def __init__(self, message: str, artifact: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", None) or ({"artifact": artifact} if artifact else {})
        super().__init__(
            message=message,
            category=ErrorCategory.DEPENDENCY,
            severity=ErrorSeverity.HIGH,
            exit_code=EXIT_MISSING_DEPENDENCY,
            error_code="DEPENDENCY_001",
            details=details,
            **kwargs
        )


class StageOrderError(MissingArtifactError):
    """Raised when a stage runs before the stage it depends on"""
    def __init__(self, stage: str, missing: str, **kwargs):
        super().__init__(
            f"Stage '{stage}' requires stage '{missing}' to run first",
            details={"stage": stage, "missing_stage": missing},
            stage=stage,
            **kwargs
        )
        self.missing_stage = missing
        self.error_code = "DEPENDENCY_STAGE_ORDER_001"


# Numerical Errors
class NumericalError(BaseCustomException, ArithmeticError):
    """Raised when training produces non-finite values"""
    def __init__(self, message: str, diagnostic: Optional[Dict[str, Any]] = None, **kwargs):
        super().__init__(
            message=message,
            category=ErrorCategory.NUMERICAL,
            severity=ErrorSeverity.CRITICAL,
            exit_code=EXIT_NUMERICAL_FAILURE,
            error_code="NUMERICAL_001",
            details=diagnostic or {},
            **kwargs
        )


def log_error(error: BaseCustomException, stage: Optional[str] = None):
    """Log error with appropriate level based on severity"""
    log_data = {
        "error_code": error.error_code,
        "category": error.category.value,
        "severity": error.severity.value,
        "stage": stage or error.stage,
        "details": error.details,
    }

    if error.severity == ErrorSeverity.CRITICAL:
        logger.critical(error.message, extra=log_data)
    elif error.severity == ErrorSeverity.HIGH:
        logger.error(error.message, extra=log_data)
    elif error.severity == ErrorSeverity.MEDIUM:
        logger.warning(error.message, extra=log_data)
    else:
        logger.info(error.message, extra=log_data)

    try:
        from utils.structured_logging import track_error
        track_error(error.error_code, error.message, context=error.details)
    except ImportError:
        pass
