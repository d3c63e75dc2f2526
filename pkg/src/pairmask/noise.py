"""Deterministic, seed-addressed Gaussian noise streams.

Every random value in a run is a pure function of a 32-byte master seed plus
structural indices (pair / client id, round, coordinate).  Derivation is a
keyed hash with distinct domain tags, so pair streams and per-client streams
can never alias.  Sampling runs Philox in counter mode and maps each
64-bit-pair to one normal deviate through a Box-Muller transform; coordinate
``k`` of round ``t`` always consumes the counter positions
``t*2*dim + 2k`` and ``t*2*dim + 2k + 1``, which makes any (round,
coordinate) addressable without generating its predecessors and makes block
generation bit-identical to round-at-a-time generation.

Both members of a pair derive the same stream because the pair key is
normalized to (lo, hi) before hashing.  The generator is not a
cryptographically hardened PRF; the privacy analysis in this package is
distribution-level.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASTER_SEED_BYTES = 32

_TAG_PAIR = b"pairwise-mask"
_TAG_INDIV = b"individual-mask"

_INV_2_53 = 2.0 ** -53


def as_master_seed(seed: bytes) -> bytes:
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != MASTER_SEED_BYTES:
        raise ValueError(f"master seed must be {MASTER_SEED_BYTES} bytes")
    return bytes(seed)


def master_seed_from_int(value: int) -> bytes:
    """Expand a small integer (e.g. a CLI --seed) into a 32-byte master seed."""
    if value < 0:
        raise ValueError("seed integer must be nonnegative")
    return hashlib.blake2b(
        value.to_bytes(16, "little"), digest_size=MASTER_SEED_BYTES, person=b"pm-master"
    ).digest()


def derive_seed(master: bytes, tag: bytes, *indices: int) -> bytes:
    """16-byte stream seed from (master, domain tag, structural indices)."""
    h = hashlib.blake2b(digest_size=16, person=b"pm-derive")
    h.update(as_master_seed(master))
    h.update(len(tag).to_bytes(1, "little"))
    h.update(tag)
    for ix in indices:
        h.update(int(ix).to_bytes(8, "little", signed=False))
    return h.digest()


def derive_pair_seed(master: bytes, i: int, j: int) -> bytes:
    """Stream seed shared by clients i and j; symmetric in (i, j)."""
    if i == j:
        raise ValueError("pair members must be distinct")
    lo, hi = (i, j) if i < j else (j, i)
    if lo < 0:
        raise ValueError("client indices must be nonnegative")
    return derive_seed(master, _TAG_PAIR, lo, hi)


def derive_client_seed(master: bytes, i: int) -> bytes:
    if i < 0:
        raise ValueError("client index must be nonnegative")
    return derive_seed(master, _TAG_INDIV, i)


def _uint64_block(seed16: bytes, start: int, count: int) -> np.ndarray:
    """Raw uint64 outputs [start, start+count) of the stream keyed by seed16.

    Philox emits 4 words per counter tick; we align the counter to ``start``
    and trim the partial head.
    """
    if count == 0:
        return np.empty(0, dtype=np.uint64)
    key = np.frombuffer(seed16, dtype=np.uint64)
    first_block, offset = divmod(start, 4)
    bg = np.random.Philox(key=key, counter=[first_block, 0, 0, 0])
    raw = bg.random_raw(offset + count)
    return raw[offset:]


def _to_open_unit(u: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted into (0, 1]
    return ((u >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53


def gaussian_block(
    seed16: bytes, round_start: int, n_rounds: int, dim: int, sigma: float
) -> np.ndarray:
    """Rounds [round_start, round_start + n_rounds) of a stream as an
    (n_rounds, dim) array of N(0, sigma^2) deviates.

    Concatenating single-round calls reproduces this block bit for bit.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if round_start < 0 or n_rounds < 0:
        raise ValueError("round indices must be nonnegative")
    if sigma == 0.0:
        return np.zeros((n_rounds, dim))
    raw = _uint64_block(seed16, round_start * 2 * dim, n_rounds * 2 * dim)
    u1 = _to_open_unit(raw[0::2])
    u2 = _to_open_unit(raw[1::2])
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return (sigma * z).reshape(n_rounds, dim)


def gaussian_vector(seed16: bytes, round_index: int, dim: int, sigma: float) -> np.ndarray:
    """The length-``dim`` noise vector of one round of a stream."""
    return gaussian_block(seed16, round_index, 1, dim, sigma)[0]


def pairwise_noise(
    master: bytes, i: int, j: int, round_index: int, dim: int, sigma: float
) -> np.ndarray:
    """Shared mask of pair (i, j) at a round; identical for both orders."""
    return gaussian_vector(derive_pair_seed(master, i, j), round_index, dim, sigma)


def individual_noise(
    master: bytes, i: int, round_index: int, dim: int, sigma: float
) -> np.ndarray:
    """Per-client mask of client i at a round."""
    return gaussian_vector(derive_client_seed(master, i), round_index, dim, sigma)
