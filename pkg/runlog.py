import datetime
import logging

LOG_FORMAT = "%(asctime)s - %(message)s"


def setup_logging(path=None, level="INFO"):
    """
    Configure the root logger once per process: to ``path`` when given,
    otherwise to stderr.
    """
    kwargs = {"level": getattr(logging, str(level).upper()), "format": LOG_FORMAT, "force": True}
    if path:
        kwargs["filename"] = str(path)
        kwargs["encoding"] = "utf-8"
    logging.basicConfig(**kwargs)
    return logging.getLogger()


def log(message):
    """Log a message to console and file."""
    timestamp = datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    print(f"[{timestamp}] {message}")
    logging.info(message)
