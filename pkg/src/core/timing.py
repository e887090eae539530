import logging
import time
from contextlib import contextmanager

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


@contextmanager
def timed(label: str, log: logging.Logger = logger):
    start_time = time.time()
    yield
    process_time = time.time() - start_time
    log.info(f"{label} Duration: {process_time:.3f}s")
