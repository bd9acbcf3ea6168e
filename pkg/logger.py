"""
Logging setup for the JAKET desk trainer
"""
import logging
import sys

import numpy as np

from config import LOG_FILE, LOG_FORMAT, LOG_LEVEL


def summarize_array(value: np.ndarray) -> str:
    """Short description of an array for log lines."""
    if value.size == 0:
        return f"array(shape={value.shape}, empty)"
    if not np.issubdtype(value.dtype, np.number):
        return f"array(shape={value.shape}, dtype={value.dtype})"
    return (
        f"array(shape={value.shape}, min={float(np.min(value)):.4g}, "
        f"max={float(np.max(value)):.4g})"
    )


class ArraySummaryFilter(logging.Filter):
    """Replace numpy array arguments with a one-line summary"""

    def filter(self, record):
        """Rewrite array args so a log line never dumps a whole matrix"""
        if isinstance(record.args, tuple) and record.args:
            record.args = tuple(
                summarize_array(arg) if isinstance(arg, np.ndarray) else arg
                for arg in record.args
            )
        elif isinstance(record.msg, np.ndarray):
            record.msg = summarize_array(record.msg)
        return True


def setup_logger(name: str) -> logging.Logger:
    """
    Set up and return a logger with consistent formatting.

    Args:
        name: Name of the logger (typically __name__)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Only configure if not already configured
    if not logger.handlers:
        logger.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))

        formatter = logging.Formatter(LOG_FORMAT)
        array_filter = ArraySummaryFilter()

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.DEBUG)
        console_handler.setFormatter(formatter)
        console_handler.addFilter(array_filter)
        logger.addHandler(console_handler)

        if LOG_FILE:
            file_handler = logging.FileHandler(LOG_FILE)
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(formatter)
            file_handler.addFilter(array_filter)
            logger.addHandler(file_handler)

    return logger
