import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

_LOGGER = None
_FORMAT = "%(asctime)s %(levelname)s %(message)s"


def get_logger() -> logging.Logger:
    global _LOGGER
    if _LOGGER is not None:
        return _LOGGER

    logger = logging.getLogger("vdw-coherence")
    logger.setLevel(logging.INFO)
    logger.propagate = False

    if not logger.handlers:
        # Library use and tests stay silent until a run attaches a log file.
        logger.addHandler(logging.NullHandler())

    _LOGGER = logger
    return logger


def attach_run_log(out_dir: Path, verbose: bool = False) -> Optional[Path]:
    logger = get_logger()
    _detach_run_handlers(logger)

    log_path = None
    # Frozen builds never write log files next to their output.
    if not getattr(sys, "frozen", False):
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "run.log"
        handler = RotatingFileHandler(
            log_path,
            maxBytes=1_000_000,
            backupCount=3,
            encoding="utf-8",
        )
        handler.setFormatter(logging.Formatter(_FORMAT))
        handler.set_name("run-file")
        logger.addHandler(handler)

    if verbose:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter(_FORMAT))
        stream.set_name("run-stderr")
        logger.addHandler(stream)
    return log_path


def _detach_run_handlers(logger: logging.Logger) -> None:
    for handler in list(logger.handlers):
        if handler.get_name() in ("run-file", "run-stderr"):
            logger.removeHandler(handler)
            handler.close()
