import json
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

from app.config import settings

_RESERVED = (
    "name", "msg", "args", "levelname", "levelno",
    "pathname", "filename", "module", "exc_info",
    "exc_text", "stack_info", "lineno",
    "funcName", "created", "msecs",
    "relativeCreated", "thread", "threadName",
    "processName", "process", "message", "taskName",
)


def _extras(record):
    return {
        k: v for k, v in record.__dict__.items()
        if not k.startswith("_") and k not in _RESERVED
    }


class ContextFormatter(logging.Formatter):
    def format(self, record):
        base = super().format(record)
        extras = [f"{k}={v}" for k, v in _extras(record).items()]
        if extras:
            return base + " | " + " ".join(extras)
        return base


class JsonLinesFormatter(logging.Formatter):
    """One JSON object per record: the message is the event, extras are the fields."""

    def format(self, record):
        payload = {"event": record.getMessage()}
        payload.update(_extras(record))
        return json.dumps(payload, sort_keys=True)


def _create_logger(name: str, file: Path, level: str, console: bool, formatter):
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    file.parent.mkdir(parents=True, exist_ok=True)
    fh = RotatingFileHandler(
        file,
        maxBytes=50 * 1024 * 1024,
        backupCount=5,
        encoding="utf-8"
    )
    fh.setFormatter(formatter)
    logger.addHandler(fh)

    if console:
        ch = logging.StreamHandler()
        ch.setFormatter(formatter)
        logger.addHandler(ch)

    logger.propagate = False
    return logger


def init_logger(name: str, level: str):
    """Application logger. Library modules under `app` log through it as children."""
    formatter = ContextFormatter(
        "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
    )
    log_file = Path(settings.LOG_DIR) / f"{name}.log"
    logger = _create_logger(name, log_file, level, True, formatter)
    # route module loggers (app.trainer, app.data, ...) to the same handlers
    package = logging.getLogger("app")
    if not package.handlers:
        package.setLevel(logger.level)
        for handler in logger.handlers:
            package.addHandler(handler)
        package.propagate = False
    logger.info("logger initialized", extra={"log_file": str(log_file)})
    return logger


def init_train_logger(path) -> logging.Logger:
    """Training log: `{step, loss, lr, val_bleu, ...}` as JSON lines in `path`."""
    path = Path(path)
    logger = logging.getLogger(f"train_log.{path.resolve()}")
    if logger.handlers:
        return logger
    logger.setLevel(logging.INFO)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(path, mode="w", encoding="utf-8")
    fh.setFormatter(JsonLinesFormatter())
    logger.addHandler(fh)
    logger.propagate = False
    return logger


def close_logger(logger: logging.Logger):
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
