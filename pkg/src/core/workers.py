"""
Worker Pool

Splits index ranges into fixed-size chunks and maps a function over them,
serially when one thread is requested and on a thread pool otherwise. Results
always come back in chunk order.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Tuple, TypeVar

T = TypeVar("T")


def chunk_ranges(total: int, chunk_size: int) -> List[Tuple[int, int]]:
    """Split [0, total) into consecutive (start, stop) ranges."""
    chunk_size = max(1, int(chunk_size))
    return [(start, min(start + chunk_size, total)) for start in range(0, total, chunk_size)]


def map_ranges(fn: Callable[[int, int], T], ranges: List[Tuple[int, int]], threads: int = 1) -> List[T]:
    """
    Apply fn(start, stop) to every range.

    Args:
        fn: Pure function of a half-open index range
        ranges: Ranges as produced by chunk_ranges
        threads: Worker count; 1 runs in the calling thread

    Returns:
        List of results in range order
    """
    if threads <= 1 or len(ranges) <= 1:
        return [fn(start, stop) for start, stop in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in ranges]
        return [future.result() for future in futures]
