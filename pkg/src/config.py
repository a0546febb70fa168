"""
Environment configuration and logging setup.

Settings come from the process environment, optionally populated from a
.env file (see env_template.txt).
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def get_thread_count() -> int:
    """Worker cap for thread pools, from IDMF_THREADS (default: 4)."""
    raw = os.getenv('IDMF_THREADS', '4')
    try:
        threads = int(raw)
    except ValueError:
        threads = 4
    return max(1, threads)


def get_output_dir() -> str:
    """Default output directory for CLI runs."""
    return os.getenv('IDMF_OUTPUT_DIR', 'outputs')


def debug_enabled() -> bool:
    """Whether tensor forward passes check their values for finiteness."""
    return os.getenv('IDMF_DEBUG', '0').lower() in ('1', 'true', 'yes')


def setup_logger(name: str) -> logging.Logger:
    """
    Create (or fetch) a named logger with a single stream handler.

    Args:
        name: Logger name, prefixed with 'IdmFollower.'

    Returns:
        Configured logger
    """
    logger = logging.getLogger(f'IdmFollower.{name}')
    level_name = os.getenv('IDMF_LOG_LEVEL', 'INFO').upper()
    logger.setLevel(getattr(logging, level_name, logging.INFO))

    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)

    return logger
