"""64-bit FNV-1a hashing used for schema, dataset and partition fingerprints."""

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def _fnv1a_py(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


try:  # numba turns a multi-second hash of a large CSV into milliseconds
    from numba import njit

    @njit(cache=True)
    def _fnv1a_kernel(buf):
        h = np.uint64(FNV_OFFSET)
        prime = np.uint64(FNV_PRIME)
        for b in buf:
            h = (h ^ np.uint64(b)) * prime
        return h

except ImportError:  # pragma: no cover
    _fnv1a_kernel = None


def fnv1a_64(data: bytes) -> int:
    if _fnv1a_kernel is None or len(data) < 4096:
        return _fnv1a_py(data)
    return int(_fnv1a_kernel(np.frombuffer(data, dtype=np.uint8)))


def hexdigest(data: bytes) -> str:
    return f"{fnv1a_64(data):016x}"
