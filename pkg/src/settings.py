"""
Settings Module
- Loads environment variables and configures logging for every entry point.
"""

import os
import logging
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

DATA_ROOT = os.getenv("SPARSE_DST_DATA_ROOT", "data")
OUTPUT_ROOT = os.getenv("SPARSE_DST_OUTPUT_ROOT", "runs")
LOG_LEVEL = os.getenv("SPARSE_DST_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("SPARSE_DST_LOG_FILE", "sparse_dst.log")

# Overrides every dataset mirror when set
DATASET_MIRROR = os.getenv("SPARSE_DST_MIRROR")
DOWNLOAD_TIMEOUT = int(os.getenv("SPARSE_DST_DOWNLOAD_TIMEOUT", "60"))
DOWNLOAD_RETRIES = int(os.getenv("SPARSE_DST_DOWNLOAD_RETRIES", "3"))
RETRY_DELAY = float(os.getenv("SPARSE_DST_RETRY_DELAY", "5"))

WORKERS = int(os.getenv("SPARSE_DST_WORKERS", "1"))

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config")
CHECKSUM_MANIFEST = os.path.join(CONFIG_DIR, "dataset_checksums.json")


def configure_logging(level=None, log_file=None):
    """
    Configure root logging with a file and a stream handler.
    :param level: Log level name, defaults to SPARSE_DST_LOG_LEVEL.
    :param log_file: Log file path, defaults to SPARSE_DST_LOG_FILE. Empty string disables the file.
    """
    level = level or LOG_LEVEL
    log_file = LOG_FILE if log_file is None else log_file

    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )
