"""Deterministic counter-based randomness.

All randomness in the package flows through :class:`Rng`, a thin wrapper
over NumPy's Philox bit generator. Streams are derived by hashing
(seed, name, index), so a draw is a pure function of the stream path and
its position within the stream; evaluation order across streams cannot
change any result.
"""

import hashlib

import numpy as np


class Rng:
    """A named, seeded random stream with derivable child streams."""

    def __init__(self, seed, _path=b"root"):
        self.seed = int(seed)
        self._path = _path
        digest = hashlib.sha256(
            self.seed.to_bytes(8, "little", signed=False) + b"/" + _path
        ).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def stream(self, name, index=0):
        """Derive an independent child stream; (name, index) is its address."""
        path = self._path + b"/" + str(name).encode() + b":" + str(int(index)).encode()
        return Rng(self.seed, path)

    def normal(self, shape=(), dtype=np.float32):
        return self._gen.standard_normal(size=shape, dtype=np.dtype(dtype))

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=()):
        return self._gen.integers(low, high, size=shape)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path.decode()})"
