"""Deterministic random streams.

A :class:`StreamRng` is a counter-based Philox generator keyed by a 64-bit
seed plus a 64-bit stream id, so independent streams can be derived from one
seed without coordination.  Gaussian draws use the trigonometric Box-Muller
transform with a fixed consumption order (two uniforms per pair of normals,
no cached spare), which keeps every draw reproducible and the full generator
state serializable.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class StreamRng:
    """Seeded, stream-separated PRNG with Box-Muller normal draws."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bits)

    def derive(self, label: int) -> "StreamRng":
        """Independent child stream; distinct labels give distinct streams."""
        child = _splitmix64(self.stream ^ _splitmix64(label))
        return StreamRng(self.seed, child)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return self._gen.random(int(n))

    def normals(self, n: int) -> np.ndarray:
        """n standard normals; consumes exactly 2*ceil(n/2) uniforms."""
        n = int(n)
        m = (n + 1) // 2
        if m == 0:
            return np.zeros(0)
        u1 = 1.0 - self._gen.random(m)  # in (0, 1], keeps log finite
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def normal_matrix(self, n: int, d: int) -> np.ndarray:
        return self.normals(n * d).reshape(n, d)

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform on [0, high) derived from uniform doubles."""
        u = self._gen.random(int(n))
        return np.minimum((u * high).astype(np.int64), high - 1)

    # -- state round trip (for checkpoints) --------------------------------

    def state(self) -> dict:
        raw = self._bits.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(v) for v in raw["state"]["counter"]],
            "key": [int(v) for v in raw["state"]["key"]],
            "buffer": [int(v) for v in raw["buffer"]],
            "buffer_pos": int(raw["buffer_pos"]),
            "has_uint32": int(raw["has_uint32"]),
            "uinteger": int(raw["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "StreamRng":
        rng = cls(state["seed"], state["stream"])
        rng._bits.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng
