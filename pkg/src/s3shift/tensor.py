"""Dense float32 tensors on top of numpy plus a portable counter-based RNG.

Tensors are plain ``numpy.ndarray`` objects (row-major, C-contiguous).  The
helpers here add the validation the rest of the package relies on.

The random generator is SplitMix64 used in counter mode: the ``i``-th 64-bit
word of stream ``seed`` is ``mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)``
where ``mix64`` is the SplitMix64 finalizer.  Uniforms take the top 53 bits,
normals use the Box-Muller transform on consecutive uniform pairs.  The
stream is fully specified by these two lines, so other implementations can
reproduce it bit for bit.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

FLOAT = np.float32

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    The full state is ``(seed, counter)``; both are plain ints so the state
    can be persisted and restored exactly.
    """

    algorithm = "splitmix64-counter"

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0 or seed > _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def get_state(self) -> dict:
        return {"algorithm": self.algorithm, "seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        if state.get("algorithm", cls.algorithm) != cls.algorithm:
            raise ValueError(f"unknown rng algorithm {state['algorithm']!r}")
        return cls(state["seed"], state["counter"])

    def split(self, key: int) -> "Rng":
        """Independent child stream derived from this stream's seed and ``key``."""
        word = _mix64(np.array([(self.seed ^ ((key + 1) * 0xD1B54A32D192ED03)) & _MASK64],
                               dtype=np.uint64))
        return Rng(int(word[0]))

    def next_uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            return _mix64(z)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in [0, 1)."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def standard_normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ValueError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], dtype=FLOAT) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def rand_normal(shape: Sequence[int], mean: float, std: float, rng: Rng, dtype=FLOAT) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = _check_shape(shape)
    n = math.prod(shape)
    z = rng.standard_normal(n)
    return (mean + std * z).reshape(shape).astype(dtype)


_ELEMENTWISE: dict[str, Callable] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major flat offset, e.g. ((n*C + c)*H + h)*W + w for NCHW."""
    flat = 0
    for i, d in zip(index, shape, strict=True):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
        flat = flat * d + i
    return flat


def unflat_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    if not 0 <= flat < math.prod(shape):
        raise IndexError(f"flat index {flat} out of bounds for shape {tuple(shape)}")
    out = []
    for d in reversed(shape):
        out.append(flat % d)
        flat //= d
    return tuple(reversed(out))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (numpy's rint rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    r = np.floor(ax)
    with np.errstate(invalid="ignore"):  # inf - inf; the inf passes through copysign unchanged
        r += (ax - r) >= 0.5  # exact: ax - floor(ax) never rounds
    return np.copysign(r, x)
