import os


def n_workers(default=None):
    """Worker count for thread pools, capped by ``CANONREG_THREADS``."""
    cap = os.environ.get("CANONREG_THREADS")
    n = default or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n
