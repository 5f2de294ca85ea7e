"""Counter-based random substreams.

Every random number used by the simulator is a pure function of
``(seed, tag, extra..., path id, event, sub)``.  The key is derived from
``(seed, tag, extra...)`` with :class:`numpy.random.SeedSequence`; the
remaining coordinates form the 128-bit counter of a Philox4x32-10 block
cipher.  Because nothing is consumed sequentially, draws for any subset of
paths can be produced in any order, in any batch size, and remain bit
identical.
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats

__all__ = ["Stream", "philox4x32", "TAGS"]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

# component tags; decoupled draws use tags disjoint from the simulation tags
TAGS = {
    "continuous": 1,
    "qlc": 2,
    "accessible": 3,
    "decoupled-continuous": 11,
    "decoupled-qlc": 12,
    "decoupled-accessible": 13,
    "cox": 14,
    "regenerate-continuous": 21,
    "regenerate-qlc": 22,
    "regenerate-accessible": 23,
}


def philox4x32(counter, key):
    """Philox4x32-10 on broadcastable arrays.

    Parameters
    ----------
    counter : sequence of 4 array-like of uint32 words
    key : sequence of 2 uint32 words

    Returns
    -------
    tuple of 4 uint64 arrays holding 32-bit output words
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*[np.asarray(c, dtype=np.uint64) for c in counter])
    c0, c1, c2, c3 = (c & _MASK32 for c in (c0, c1, c2, c3))
    k0 = np.uint64(key[0]) & _MASK32
    k1 = np.uint64(key[1]) & _MASK32
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _S32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _S32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


class Stream:
    """A keyed family of uniforms indexed by (path id, event, sub).

    Examples
    --------
    >>> s = Stream(7, "qlc")
    >>> u = s.uniform(np.arange(3), event=0)
    >>> bool(np.all((u > 0) & (u < 1)))
    True
    """

    def __init__(self, seed: int, tag: str | int, *extra: int):
        tag_id = TAGS[tag] if isinstance(tag, str) else int(tag)
        entropy = [int(seed) % (1 << 64), tag_id, *[int(e) for e in extra]]
        self.seed = int(seed)
        self.tag = tag
        self.extra = tuple(int(e) for e in extra)
        self.key = tuple(int(w) for w in np.random.SeedSequence(entropy).generate_state(2, np.uint32))

    @property
    def label(self) -> str:
        parts = [str(self.tag)] + [str(e) for e in self.extra]
        return ":".join(parts)

    def uniform(self, path_ids, event, sub=0) -> np.ndarray:
        """Uniforms on the open interval (0, 1), broadcast over the indices."""
        pid = np.asarray(path_ids, dtype=np.uint64)
        x0, x1, _, _ = philox4x32(
            (np.asarray(event, dtype=np.uint64), np.asarray(sub, dtype=np.uint64), pid & _MASK32, pid >> _S32),
            self.key,
        )
        bits = (x0 << np.uint64(21)) | (x1 >> np.uint64(11))
        return (bits.astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, path_ids, event, sub=0) -> np.ndarray:
        return special.ndtri(self.uniform(path_ids, event, sub))

    def poisson(self, mean, path_ids, event, sub=0) -> np.ndarray:
        """Poisson counts by inversion of one uniform per draw."""
        u = self.uniform(path_ids, event, sub)
        mean, u = np.broadcast_arrays(np.asarray(mean, dtype=float), u)
        out = np.zeros(u.shape, dtype=np.int64)
        # P(N = 0) = exp(-mean); only the complement needs the quantile function
        hit = u > np.exp(-mean)
        if np.any(hit):
            out[hit] = stats.poisson.ppf(u[hit], mean[hit]).astype(np.int64)
        return out
