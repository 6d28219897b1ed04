"""Counter-based 64-bit pseudo-random generator.

Every random draw in the engine (weight init, noise ops, data generation,
shuffles, edge orders) comes from this generator so that results are
bit-reproducible from explicit seeds.

Construction (all arithmetic modulo 2**64):

    key        = seed
    x_i        = key + (counter + i + 1) * GOLDEN_GAMMA
    z          = (x_i ^ (x_i >> 30)) * MIX_1
    z          = (z ^ (z >> 27)) * MIX_2
    output_i   = z ^ (z >> 31)

which is the SplitMix64 finaliser applied to a Weyl sequence. ``counter``
advances by the number of 64-bit words consumed.

Derived quantities:

- uniform in [0, 1): ``(output >> 11) * 2**-53``
- normal N(0, 1): Box-Muller on two words, ``u1 = ((w1 >> 11) + 1) * 2**-53``
  (in (0, 1]), ``u2 = (w2 >> 11) * 2**-53``, ``z = sqrt(-2 ln u1) cos(2 pi u2)``
- permutation: stable argsort of ``n`` uniforms

Child streams are keyed with ``derive_seed`` (first 8 bytes of SHA-256 over
the parent seed and the keys, big-endian).
"""

import hashlib
from dataclasses import dataclass

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_2 = np.uint64(0x94D049BB133111EB)

_MASK_64 = (1 << 64) - 1
_TWO_POW_MINUS_53 = 2.0**-53


def derive_seed(seed: int, *keys: object) -> int:
    """
    Derive a child seed from a parent seed and any number of keys.

    Args:
        seed: Parent seed (any integer, reduced modulo 2**64)
        *keys: Values whose ``str`` form names the child stream

    Returns:
        Unsigned 64-bit seed
    """
    material = ":".join([str(seed & _MASK_64), *(str(k) for k in keys)])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _mix(words: np.ndarray) -> np.ndarray:
    z = (words ^ (words >> np.uint64(30))) * MIX_1
    z = (z ^ (z >> np.uint64(27))) * MIX_2
    return z ^ (z >> np.uint64(31))


@dataclass
class CounterRNG:
    """Seeded counter-based generator; ``(seed, counter)`` is its full state."""

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & _MASK_64
        if self.counter < 0:
            raise ValueError(f"counter must be non-negative, got {self.counter}")

    def words(self, n: int) -> np.ndarray:
        """Draw ``n`` raw 64-bit words and advance the counter."""
        if n < 0:
            raise ValueError(f"cannot draw {n} words")
        steps = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix(np.uint64(self.seed) + steps * GOLDEN_GAMMA)
        self.counter += n
        return out

    def uniform(self, shape: tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        u = (self.words(size) >> np.uint64(11)).astype(np.float64) * _TWO_POW_MINUS_53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        w = self.words(2 * size)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_POW_MINUS_53
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * _TWO_POW_MINUS_53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def integers(self, high: int, size: int) -> np.ndarray:
        """Uniform integers in ``[0, high)``."""
        if high <= 0:
            raise ValueError(f"high must be positive, got {high}")
        u = self.uniform((size,))
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def fork(self, *keys: object) -> "CounterRNG":
        """Independent child stream; does not advance this generator."""
        return CounterRNG(derive_seed(self.seed, *keys))

    def state(self) -> dict[str, int]:
        return {"seed": self.seed, "counter": self.counter}
