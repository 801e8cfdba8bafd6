"""
Main entry point for the leak detection toolkit.
- Resolves the default configuration file.
- Runs one command and manages the log file lifecycle.
"""

import os
import sys
from src.interface import CommandLine
from src.logger import close_run_logging, logger


def default_config_path():
    # When running from src/ or from the repository root
    if os.path.exists('config.json'):
        return 'config.json'
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config.json')


def main(argv=None):
    try:
        status = CommandLine(default_config_path()).run(argv)
        logger.info(f"Program terminated with status {status}.")
        return status
    finally:
        close_run_logging()


if __name__ == '__main__':
    sys.exit(main())
