"""Allocator tuning for the training loops.

Training allocates and frees many arrays of a few hundred kilobytes per step.
glibc serves those with fresh ``mmap`` calls by default, and the resulting
page faults cost about a quarter of the step time. Raising the mmap and trim
thresholds keeps the memory in the heap for reuse. This is a no-op on
non-glibc platforms.
"""
import ctypes
import ctypes.util
import functools

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


@functools.lru_cache(maxsize=None)
def tune_allocator(mmap_threshold: int = 64 << 20, trim_threshold: int = 128 << 20) -> bool:
    """Raise glibc's mmap/trim thresholds once per process. Returns whether it applied."""
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = mallopt(_M_MMAP_THRESHOLD, mmap_threshold) == 1
    ok = mallopt(_M_TRIM_THRESHOLD, trim_threshold) == 1 and ok
    return ok
