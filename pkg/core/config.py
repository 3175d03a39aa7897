import os
from datetime import timezone
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.abspath(os.path.join(BASE_DIR, ".."))
RUNS_DIR = os.path.join(PROJECT_ROOT, "runs")

# Only the run directory and the worker cap may be overridden from the environment;
# everything else comes from the experiment YAML document.
OUTPUT_DIR_OVERRIDE = os.getenv("RETINA_OUTPUT_DIR")
WORKERS_OVERRIDE = os.getenv("RETINA_WORKERS")

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
DEVICE_OVERRIDE = os.getenv("RETINA_DEVICE")

# TIMEZONE
UTC = timezone.utc

# DATASET CONVENTIONS
SYNTHETIC_FAMILY_ID = "__synthetic__"
MANIFEST_FIELDS = ("path", "family_id", "patient_id", "eye_id", "modality", "label", "provenance")
METADATA_FIELDS = ("patient_id", "age_years", "sex")
SPLIT_FIELDS = ("family_id", "split")
AGE_SCALE = 0.01

# RUN DIRECTORY LAYOUT
CONFIG_FILENAME = "config.yaml"
STAGE_MANIFEST_DIR = "stages"
LOG_DIR = "logs"
DATA_DIR = "data"

# EXIT CODES
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG_ERROR = 2
EXIT_MISSING_DEPENDENCY = 3
EXIT_NUMERICAL_FAILURE = 4


def resolve_workers(configured: int) -> int:
    """Worker cap, honouring RETINA_WORKERS when set."""
    if WORKERS_OVERRIDE:
        try:
            return max(1, int(WORKERS_OVERRIDE))
        except ValueError:
            return max(1, configured)
    return max(1, configured)


def resolve_output_dir(configured: str) -> str:
    """Run directory, honouring RETINA_OUTPUT_DIR when set."""
    return OUTPUT_DIR_OVERRIDE or configured


def resolve_device(configured: str = "auto") -> str:
    """Torch device string; RETINA_DEVICE wins over the configured value."""
    choice = DEVICE_OVERRIDE or configured
    if choice != "auto":
        return choice
    import torch

    return "cuda" if torch.cuda.is_available() else "cpu"
