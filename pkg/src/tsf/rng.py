"""Splittable counter-based random streams.

Every stream is a Philox generator keyed by a hash of ``(seed, *labels)``, so
a stream's values depend only on its key and never on how many other streams
were drawn before it or on which thread draws it.
"""
import hashlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    digest = hashlib.sha256(repr((int(seed),) + tuple(labels)).encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
