import logging
from typing import Optional

from config import settings

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure root logging once for the process"""
    handlers = [logging.StreamHandler()]
    log_file = log_file if log_file is not None else settings.LOG_FILE
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def log_messages_middleware(line) -> None:
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug(
            f"t={line.time_us}us {line.src} -> {line.dst} {line.msg_type} "
            f"status={line.status} digest={line.digest}"
        )


class TraceFileMiddleware:
    """Writes every network trace line to a tab-separated file"""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, line) -> None:
        self._fh.write(line.render())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


def setup_middleware(network, trace_path: Optional[str] = None) -> Optional[TraceFileMiddleware]:
    # Message logging
    network.add_middleware(log_messages_middleware)

    # Trace file
    trace_writer = None
    if trace_path:
        trace_writer = TraceFileMiddleware(trace_path)
        network.add_middleware(trace_writer)
        logger.info(f"Writing network trace to {trace_path}")
    return trace_writer
