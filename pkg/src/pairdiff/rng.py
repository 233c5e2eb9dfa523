"""Counter-based, splittable random number generator.

Every draw is a pure function of ``(key, counter)``::

    word(key, c) = mix64(key + (c + 1) * 0x9E3779B97F4A7C15  mod 2**64)
    mix64(z):  z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
               z ^= z >> 27; z *= 0x94D049BB133111EB
               z ^= z >> 31

(the SplitMix64 finalizer).  A seed becomes a key via ``mix64(seed)``; a
child stream is ``key' = mix64(key ^ mix64(tag))`` with string tags
hashed by BLAKE2b-64.  Uniforms use the top 53 bits of a word,
``u = (w >> 11) * 2**-53``.  Normals use Box-Muller on consecutive word
pairs ``(w0, w1)``: ``r = sqrt(-2 ln(1 - u0))``, ``z = (r cos 2pi u1,
r sin 2pi u1)``; a request for ``n`` normals consumes ``2 * ceil(n / 2)``
words and discards the surplus.  Integer draws are
``low + floor(u * (high - low))``.

All integer arithmetic is exact uint64, so word streams are identical on
every platform.  Normals additionally depend on the platform's ``log``,
``cos`` and ``sin``.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _M1
        z ^= z >> np.uint64(27)
        z *= _M2
        z ^= z >> np.uint64(31)
    return z


def _mix_int(value: int) -> int:
    return int(mix64(np.array([value & _MASK], dtype=np.uint64))[0])


def _tag_int(tag: int | str) -> int:
    if isinstance(tag, str):
        return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")
    return int(tag) & _MASK


class Rng:
    """Seedable stream; ``counter`` is the number of 64-bit words consumed."""

    def __init__(self, seed: int = 0, *, key: int | None = None, counter: int = 0):
        self.seed = int(seed)
        self.key = _mix_int(self.seed) if key is None else int(key) & _MASK
        self.counter = int(counter)
        self.calls = {"normal": 0, "uniform": 0, "integers": 0}

    def split(self, tag: int | str) -> "Rng":
        """Independent child stream; does not advance this one."""
        child_key = _mix_int(self.key ^ _mix_int(_tag_int(tag)))
        return Rng(self.seed, key=child_key)

    def state(self) -> tuple[int, int]:
        return self.key, self.counter

    def words(self, n: int) -> np.ndarray:
        ctr = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + ctr * _GOLDEN
        return mix64(z)

    def _unit(self, n: int) -> np.ndarray:
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        self.calls["uniform"] += 1
        n = int(np.prod(shape, dtype=np.int64))
        return self._unit(n).reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        self.calls["integers"] += 1
        n = int(np.prod(shape, dtype=np.int64))
        u = self._unit(n)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return out.reshape(shape)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        self.calls["normal"] += 1
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self._unit(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape).astype(dtype, copy=False)
