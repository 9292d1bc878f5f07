"""Process-level tuning for the many short-lived medium-sized numpy temporaries."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator(top_pad_mb: int = 64, mmap_threshold_mb: int = 32) -> bool:
    """Stop glibc from returning heap pages to the OS after every training step.

    A training step allocates and frees arrays of roughly a megabyte; with the
    default settings each one is an ``mmap``/``munmap`` pair and pays page
    faults on first touch. Keeping them in the heap roughly halves step time.
    Returns False (and does nothing) on non-glibc platforms.
    """
    global _tuned
    if _tuned:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_TOP_PAD, top_pad_mb << 20) == 1
    ok = mallopt(_M_MMAP_THRESHOLD, mmap_threshold_mb << 20) == 1 and ok
    _tuned = ok
    return ok
