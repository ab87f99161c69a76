"""lrlm: desk-scale laboratory for low-rank LLM training and inference efficiency."""

import os

__version__ = "0.1.0"


def thread_cap() -> int:
    """Worker-thread limit for internally parallel operations (LRLM_THREADS)."""
    try:
        return max(1, int(os.environ.get("LRLM_THREADS", "1")))
    except ValueError:
        return 1
