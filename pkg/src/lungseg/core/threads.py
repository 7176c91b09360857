"""BLAS thread control.

With one thread every matrix product has a fixed reduction order, which is
what the bitwise reproducibility guarantee rests on.  OpenBLAS also splits
work over output blocks rather than the reduction axis, so larger thread
counts keep a fixed order per thread count.
"""

from __future__ import annotations

from threadpoolctl import threadpool_limits

_limiter = None


def set_threads(n: int = 1) -> None:
    global _limiter
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _limiter = threadpool_limits(limits=n)
