"""Process-wide execution switches, read from the environment."""

import os


def deterministic_mode() -> bool:
    """SOGS_DETERMINISTIC=1 forces sequential reductions and zeroed timings."""
    return os.environ.get("SOGS_DETERMINISTIC", "") == "1"


def worker_threads() -> int:
    """Worker-thread cap from SOGS_THREADS (0 or unset picks a default)."""
    raw = os.environ.get("SOGS_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if deterministic_mode():
        return 1
    if n <= 0:
        return min(os.cpu_count() or 1, 8)
    return n
