"""Environment-driven runtime settings (read after ``load_dotenv()`` in main)."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

DEFAULT_DOF_CAP = 20000

T = TypeVar("T")
R = TypeVar("R")


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {name}={raw!r}, using {default}")
        return default


def thread_count() -> int:
    """Worker threads for assembly and evaluation (``BEM_THREADS``, default cpu count)."""
    return max(1, _int_env("BEM_THREADS", os.cpu_count() or 1))


def dof_cap() -> int:
    """Largest dense dof count accepted by assembly (``BEM_DOF_CAP``)."""
    return max(1, _int_env("BEM_DOF_CAP", DEFAULT_DOF_CAP))


def log_level() -> str:
    return os.getenv("BEM_LOG_LEVEL", "INFO").upper()


def ordered_map(func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Map ``func`` over ``items`` on a thread pool; results come back in input order."""
    items = list(items)
    workers = thread_count() if threads is None else max(1, int(threads))
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
