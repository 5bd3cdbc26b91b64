"""Grouped-query softmax attention with QK-Norm and partial RoPE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, ShapeError, matmul


@dataclass(frozen=True)
class GqaConfig:
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    rope_fraction: float = 0.5
    rope_base: float = 10000.0
    qk_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_heads < 1 or self.n_kv_heads < 1 or self.d_head < 1:
            raise ConfigError("head counts and d_head must be >= 1")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if not 0.0 < self.rope_fraction <= 1.0:
            raise ConfigError("rope_fraction must lie in (0, 1]")
        width = self.rope_fraction * self.d_head
        if width != int(width) or int(width) % 2:
            raise ConfigError(f"rope_fraction * d_head = {width} is not an even integer")
        if self.qk_norm_eps <= 0:
            raise ConfigError("qk_norm_eps must be > 0")

    @property
    def rope_dim(self) -> int:
        return int(self.rope_fraction * self.d_head)

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads


def rope_angles(positions, rope_dim: int, base: float) -> np.ndarray:
    """``(n, rope_dim/2)`` angles ``pos * base**(-2i/rope_dim)``."""
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, rope_dim, 2, dtype=np.float64) / rope_dim)
    return pos[:, None] * inv_freq[None, :]


def apply_partial_rope(x, positions, cfg: GqaConfig) -> np.ndarray:
    """Rotate adjacent pairs in the first ``rope_dim`` features; copy the rest.

    ``x`` is ``(n, d_head)`` or ``(n, heads, d_head)``; the same angles apply to
    every head.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.d_head:
        raise ShapeError(f"last dim {x.shape[-1]} != d_head {cfg.d_head}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],):
        raise ShapeError(f"{positions.shape[0] if positions.ndim else 0} positions for {x.shape[0]} rows")
    ang = rope_angles(positions, cfg.rope_dim, cfg.rope_base)
    if x.ndim == 3:
        ang = ang[:, None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    out = x.copy()
    even = x[..., 0 : cfg.rope_dim : 2]
    odd = x[..., 1 : cfg.rope_dim : 2]
    out[..., 0 : cfg.rope_dim : 2] = even * cos - odd * sin
    out[..., 1 : cfg.rope_dim : 2] = even * sin + odd * cos
    return out


def qk_norm(x, eps: float = 1e-6, gain=None) -> np.ndarray:
    """RMS-normalize along the last axis, times an optional gain (default 1)."""
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    y = x / rms
    return y if gain is None else y * gain


class KvCache:
    """Growing key/value cache for one softmax layer.

    Appending returns a new cache. Caches share one backing buffer; a
    cache that is not the newest one copies before it writes, so older
    caches never see later tokens.
    """

    def __init__(self, n_kv_heads: int, d_head: int, _k=None, _v=None, _length=0, _shared=None):
        self.n_kv_heads = n_kv_heads
        self.d_head = d_head
        self._k = _k if _k is not None else np.zeros((0, n_kv_heads, d_head))
        self._v = _v if _v is not None else np.zeros((0, n_kv_heads, d_head))
        self._length = _length
        self._shared = _shared if _shared is not None else [_length]

    def __len__(self) -> int:
        return self._length

    @property
    def keys(self) -> np.ndarray:
        view = self._k[: self._length]
        view.flags.writeable = False
        return view

    @property
    def values(self) -> np.ndarray:
        view = self._v[: self._length]
        view.flags.writeable = False
        return view

    @property
    def nbytes(self) -> int:
        """Bytes held by live entries (capacity slack excluded)."""
        return 2 * self._length * self.n_kv_heads * self.d_head * self._k.itemsize

    def append(self, k, v) -> "KvCache":
        k = np.asarray(k, dtype=np.float64).reshape(-1, self.n_kv_heads, self.d_head)
        v = np.asarray(v, dtype=np.float64).reshape(-1, self.n_kv_heads, self.d_head)
        if k.shape != v.shape:
            raise ShapeError(f"k {k.shape} and v {v.shape} differ")
        n_new = k.shape[0]
        end = self._length + n_new
        own_tip = self._shared[0] == self._length
        if own_tip and end <= self._k.shape[0]:
            buf_k, buf_v, shared = self._k, self._v, self._shared
        else:
            cap = max(end, 2 * self._k.shape[0], 16)
            buf_k = np.zeros((cap, self.n_kv_heads, self.d_head))
            buf_v = np.zeros_like(buf_k)
            buf_k[: self._length] = self._k[: self._length]
            buf_v[: self._length] = self._v[: self._length]
            shared = [self._length]
        buf_k[self._length : end] = k
        buf_v[self._length : end] = v
        shared[0] = end
        return KvCache(self.n_kv_heads, self.d_head, buf_k, buf_v, end, shared)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; the one softmax used everywhere."""
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def gqa_forward(q, k, v, cfg: GqaConfig, cache: KvCache | None = None) -> tuple[np.ndarray, KvCache]:
    """Causal grouped-query attention over new tokens appended to ``cache``.

    ``q`` is ``(n, n_heads, d_head)``; ``k`` and ``v`` are
    ``(n, n_kv_heads, d_head)``. An empty cache with n tokens is prefill; a
    filled cache with one token is a decode step. Query row i attends to
    cache positions ``0 .. len(cache) + i``. Each score row is computed
    and normalized over exactly those positions, so prefill row t and
    decode step t perform identical arithmetic.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = q.shape[0]
    if q.shape != (n, cfg.n_heads, cfg.d_head):
        raise ShapeError(f"q shape {q.shape} != ({n}, {cfg.n_heads}, {cfg.d_head})")
    if k.shape != (n, cfg.n_kv_heads, cfg.d_head) or v.shape != k.shape:
        raise ShapeError(f"k/v shapes {k.shape}/{v.shape} do not match config")
    if cache is None:
        cache = KvCache(cfg.n_kv_heads, cfg.d_head)
    if (cache.n_kv_heads, cache.d_head) != (cfg.n_kv_heads, cfg.d_head):
        raise ShapeError("cache geometry does not match config")
    start = len(cache)
    cache = cache.append(k, v)
    keys, values = cache.keys, cache.values
    scale = 1.0 / np.sqrt(cfg.d_head)
    out = np.empty_like(q)
    for h in range(cfg.n_heads):
        g = h // cfg.group_size
        kt = np.ascontiguousarray(keys[:, g, :].T)
        vg = np.ascontiguousarray(values[:, g, :])
        scores = matmul(q[:, h, :], kt) * scale
        for i in range(n):
            visible = start + i + 1
            p = softmax_rows(scores[i, :visible])
            out[i, h] = matmul(p[None, :], vg[:visible])[0]
    return out, cache

