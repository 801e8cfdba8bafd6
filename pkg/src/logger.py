import logging
import os

"""
Logger setup for the toolkit:
- One module logger shared by every stage.
- Each run directory receives its own run.log with level-prefixed lines.
"""

# Configure the logger
logger = logging.getLogger("aignn")
logger.setLevel(logging.INFO)
logger.propagate = False

# Define the log format
formatter = logging.Formatter('%(asctime)s [%(levelname)s] %(message)s', datefmt='%Y-%m-%d %H:%M:%S')

_file_handler = None


def setup_run_logging(run_dir):
    """
    Attaches a file handler writing run.log inside the given run directory.
    A previous run's handler is closed and replaced.

    Args:
        run_dir (str): Directory of the current stage run.

    Returns:
        str: Path of the log file.
    """
    global _file_handler
    if not os.path.exists(run_dir):
        os.makedirs(run_dir)
    log_path = os.path.join(run_dir, "run.log")
    if _file_handler is not None:
        logger.removeHandler(_file_handler)
        _file_handler.close()
    _file_handler = logging.FileHandler(log_path, encoding='utf-8')
    _file_handler.setFormatter(formatter)
    logger.addHandler(_file_handler)
    return log_path


def close_run_logging():
    """Closes the current run's log file, if any."""
    global _file_handler
    if _file_handler is not None:
        logger.removeHandler(_file_handler)
        _file_handler.close()
        _file_handler = None
