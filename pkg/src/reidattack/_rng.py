"""Seed derivation helpers.

All randomness goes through numpy's counter-based Philox bit generator, keyed
by seeds derived with a stable hash. Nothing touches global RNG state.
"""
import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def derive_seed(seed, *keys):
    """Stable 64-bit sub-seed for ``(seed, *keys)``; independent of PYTHONHASHSEED."""
    payload = ":".join([str(int(seed) & _MASK64)] + [str(k) for k in keys])
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def philox(seed, *keys):
    """A ``numpy.random.Generator`` on a Philox stream keyed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *keys)))


def torch_generator(seed, *keys):
    gen = torch.Generator()
    # torch seeds must fit in a signed 64-bit integer
    gen.manual_seed(derive_seed(seed, *keys) >> 1)
    return gen


def array_digest(array):
    """sha256 hex digest of an array's dtype, shape and bytes."""
    arr = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
