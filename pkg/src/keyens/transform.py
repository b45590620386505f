"""Keyed block-wise pixel shuffling.

An image of shape ``(H, W, C)`` is cut into ``M x M`` blocks. Each block is
flattened row-major with the channel index fastest, so entry ``(r, c, ch)`` of a
block sits at flat position ``(r * M + c) * C + ch``. Encryption gathers the
flattened block through the key's permutation (``out[i] = in[perm[i]]``) and
writes it back; the same permutation is used for every block of every image.
Leading batch axes are allowed everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, InvalidDimensions, ShapeMismatch
from .rngcore import RngStream

KEY_MAGIC = b"KSKY"
KEY_VERSION = 1
_KEY_HEADER = struct.Struct("<4sHQHH")


@dataclass(frozen=True, eq=False)
class ShuffleKey:
    seed: int
    block_size: int
    channels: int
    perm: np.ndarray = field(repr=False)
    inv_perm: np.ndarray = field(repr=False)

    @property
    def key_id(self) -> str:
        return f"ksky-{self.seed:016x}-m{self.block_size}-c{self.channels}"

    @property
    def block_len(self) -> int:
        return self.block_size * self.block_size * self.channels

    def __eq__(self, other) -> bool:
        if not isinstance(other, ShuffleKey):
            return NotImplemented
        return (self.seed, self.block_size, self.channels) == (
            other.seed, other.block_size, other.channels
        ) and np.array_equal(self.perm, other.perm)

    def __hash__(self) -> int:
        return hash((self.seed, self.block_size, self.channels))


class Ciphertext(NamedTuple):
    """Encrypted images tagged with the id of the key that produced them."""

    data: np.ndarray
    key_id: str


def key_from_perm(perm, channels: int = 1, seed: int = 0) -> ShuffleKey:
    """Build a key around an explicit permutation (tests, hand-made keys)."""
    perm = np.asarray(perm, dtype=np.int64)
    n = perm.size
    m = int(round((n / channels) ** 0.5))
    if m < 1 or m * m * channels != n or not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidDimensions("perm is not a permutation of a full M*M*C block")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(n)
    perm.setflags(write=False)
    inv.setflags(write=False)
    return ShuffleKey(seed, m, channels, perm, inv)


def gen_key(seed: int, block_size: int, channels: int) -> ShuffleKey:
    """Derive a key from ``seed``: Fisher-Yates over ``M*M*C`` entries fed by SplitMix64."""
    if block_size < 1 or channels < 1:
        raise InvalidDimensions(f"block_size and channels must be >= 1, got M={block_size}, C={channels}")
    if not 0 <= seed < 1 << 64:
        raise InvalidDimensions("seed must fit in 64 unsigned bits")
    perm = RngStream(seed).permutation(block_size * block_size * channels)
    return key_from_perm(perm, channels, seed)


def _check(x: np.ndarray, key: ShuffleKey) -> tuple[int, ...]:
    if x.ndim < 3:
        raise ShapeMismatch(f"expected (..., H, W, C) array, got shape {x.shape}")
    h, w, c = x.shape[-3:]
    m = key.block_size
    if c != key.channels:
        raise ShapeMismatch(f"image has {c} channels, key expects {key.channels}")
    if h % m or w % m:
        raise ShapeMismatch(f"image {h}x{w} not divisible by block size {m}")
    return x.shape


def _apply_blockwise(x: np.ndarray, key: ShuffleKey, index: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    shape = _check(x, key)
    *lead, h, w, c = shape
    m = key.block_size
    nl = len(lead)
    blocks = x.reshape(*lead, h // m, m, w // m, m, c)
    # (..., bh, r, bw, col, ch) -> (..., bh, bw, r, col, ch)
    axes = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    flat = blocks.transpose(axes).reshape(*lead, h // m, w // m, m * m * c)
    out = flat[..., index].reshape(*lead, h // m, w // m, m, m, c)
    return out.transpose(axes).reshape(shape)


def encrypt(x: np.ndarray, key: ShuffleKey) -> np.ndarray:
    return _apply_blockwise(x, key, key.perm)


def decrypt(y: np.ndarray, key: ShuffleKey) -> np.ndarray:
    return _apply_blockwise(y, key, key.inv_perm)


def encrypt_tagged(x: np.ndarray, key: ShuffleKey) -> Ciphertext:
    return Ciphertext(encrypt(x, key), key.key_id)


def backprop_through_encrypt(grad: np.ndarray, key: ShuffleKey) -> np.ndarray:
    """Pull ``dL/d encrypt(x)`` back to ``dL/dx``.

    Encryption is a fixed gather, so its adjoint is the gather through the
    inverse permutation.
    """
    return _apply_blockwise(grad, key, key.inv_perm)


def save_key(key: ShuffleKey, path) -> None:
    """Write the 18-byte key header; the permutation is regenerated on load."""
    Path(path).write_bytes(
        _KEY_HEADER.pack(KEY_MAGIC, KEY_VERSION, key.seed, key.block_size, key.channels)
    )


def load_key(path) -> ShuffleKey:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != KEY_MAGIC:
        raise FormatError(f"{path}: not a key file (bad magic)")
    if len(raw) != _KEY_HEADER.size:
        raise FormatError(f"{path}: truncated or oversized key file ({len(raw)} bytes)")
    _, version, seed, m, c = _KEY_HEADER.unpack(raw)
    if version != KEY_VERSION:
        raise FormatError(f"{path}: unsupported key file version {version}")
    return gen_key(seed, m, c)
