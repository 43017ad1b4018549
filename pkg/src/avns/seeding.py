"""Named random streams derived from a single master seed.

Every source of randomness in the package draws from a stream keyed by
(seed, purpose-string), so parallel and serial execution orders agree and
any single stage can be reproduced in isolation.
"""

import hashlib
import struct

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def stream_seed(seed: int, purpose: str) -> int:
    """Derive a 64-bit stream seed from a master seed and a purpose label."""
    payload = struct.pack("<Q", seed & _MASK64) + purpose.encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, purpose))


def torch_generator(seed: int, purpose: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(seed, purpose))
    return gen
