import os
import logging
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _env_float(name, default):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        logging.warning(f"Ignoring malformed {name}={raw!r}, using {default}")
        return default


def _env_int(name, default):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logging.warning(f"Ignoring malformed {name}={raw!r}, using {default}")
        return default


# Numerical settings
TOL = _env_float("CREDENCE_TOL", 1e-9)
OFF_PATH_BELIEF = _env_float("CREDENCE_OFF_PATH_BELIEF", 1.0)
BISECT_MAX_ITER = 200
BISECT_XTOL = 1e-12

# Consumers per random stream in the simulator
SIM_BLOCK = 65536

# Execution settings
DEFAULT_JOBS = max(1, _env_int("CREDENCE_JOBS", 1))

# Logging Configuration
LOG_LEVEL = os.getenv("CREDENCE_LOG_LEVEL", "INFO").upper()
LOG_FILE = os.getenv("CREDENCE_LOG_FILE")
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(level=None):
    """Configure root logging for command-line runs."""
    handlers = [logging.StreamHandler()]
    if LOG_FILE:
        handlers.append(logging.FileHandler(LOG_FILE, mode="a", encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
