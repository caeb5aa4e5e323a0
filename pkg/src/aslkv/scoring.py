"""Observation-window attention scoring, pooling, ranking and KV compression.

All arrays carry a leading head axis and no batch axis (batch size is 1 in
this package). ``T = n - W`` denotes the number of past (non-window) tokens.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from aslkv.errors import ArgumentError, ConfigError, DataError, StateError


@dataclass(frozen=True)
class ScoringConfig:
    window_size: int = 32
    kernel_size: int = 7
    kv_budget: int = 2048

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.kv_budget <= self.window_size:
            raise ConfigError(
                f"kv_budget ({self.kv_budget}) must exceed window_size ({self.window_size})"
            )


@dataclass
class PooledScores:
    layer_index: int
    per_head: np.ndarray  # [H_k, T]
    reduced: np.ndarray  # [T]


@dataclass
class RankVector:
    layer_index: int
    ranks: np.ndarray  # [T] int64, 0 = highest score


def window_attention(q_window: np.ndarray, k_full: np.ndarray) -> np.ndarray:
    """Softmax attention of the last W queries over all n keys, [H_q, W, n].

    Window query ``t`` sits at absolute position ``n - W + t`` and may not
    attend to anything after it.
    """
    hq, W, d = q_window.shape
    hk, n, dk = k_full.shape
    if d != dk:
        raise ArgumentError("query and key head dims differ")
    if hq % hk:
        raise ArgumentError(f"H_q={hq} is not a multiple of H_k={hk}")
    if W > n:
        raise ArgumentError(f"window ({W}) longer than sequence ({n})")
    keys = np.repeat(k_full, hq // hk, axis=0)
    logits = q_window @ keys.transpose(0, 2, 1) / np.sqrt(d)
    cols = np.arange(n)
    limit = n - W + np.arange(W)
    logits = np.where(cols[None, :] > limit[:, None], -np.inf, logits)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def past_histogram(attn: np.ndarray, window_size: int, n: int) -> np.ndarray:
    """Sum attention over the window queries, keeping only past columns."""
    if n <= window_size:
        raise ArgumentError(f"need n > W, got n={n}, W={window_size}")
    if attn.shape[-2:] != (window_size, n):
        raise ArgumentError(f"attention shape {attn.shape} does not match W={window_size}, n={n}")
    return attn[..., : n - window_size].sum(axis=-2)


def avg_pool_1d(u: np.ndarray, kernel_size: int) -> np.ndarray:
    """Stride-1 box filter along the last axis, zero padded by S//2 each side.

    Padded zeros count toward the divisor, so edge values shrink.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ArgumentError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] < 1:
        raise ArgumentError("cannot pool an empty vector")
    if kernel_size == 1:
        return u.copy()
    pad = kernel_size // 2
    widths = [(0, 0)] * (u.ndim - 1) + [(pad, pad)]
    padded = np.pad(u, widths)
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel_size, axis=-1)
    return windows.sum(axis=-1) / kernel_size


def group_sum(pooled: np.ndarray, group_size: int, layer_index: int = 0) -> PooledScores:
    """Collapse query heads into their KV groups, then across all groups."""
    if pooled.ndim != 2 or group_size < 1 or pooled.shape[0] % group_size:
        raise ArgumentError(f"cannot split {pooled.shape[0]} query heads into groups of {group_size}")
    hk = pooled.shape[0] // group_size
    per_head = pooled.reshape(hk, group_size, -1).sum(axis=1)
    return PooledScores(layer_index=layer_index, per_head=per_head, reduced=per_head.sum(axis=0))


def rank_desc(scores: np.ndarray, layer_index: int = 0) -> RankVector:
    """Rank 0 goes to the largest score; ties go to the smaller index first."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise DataError("scores contain NaN")
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.int64)
    ranks[order] = np.arange(scores.size)
    return RankVector(layer_index=layer_index, ranks=ranks)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis (stable ties)."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def pooled_scores(q: np.ndarray, k: np.ndarray, config: ScoringConfig, layer_index: int = 0) -> PooledScores:
    """Window attention -> past histogram -> pooling -> group sums."""
    n = q.shape[1]
    W = config.window_size
    attn = window_attention(q[:, n - W :], k)
    hist = past_histogram(attn, W, n)
    pooled = avg_pool_1d(hist, config.kernel_size)
    return group_sum(pooled, q.shape[0] // k.shape[0], layer_index)


def compress_indices(per_head: np.ndarray, n: int, window_size: int, kv_budget: int) -> np.ndarray:
    """Per KV head: top-(min(budget, n) - W) past tokens plus the window, sorted."""
    keep = min(kv_budget, n) - window_size
    top = top_k_indices(per_head, keep)
    window = np.broadcast_to(np.arange(n - window_size, n), (per_head.shape[0], window_size))
    return np.sort(np.concatenate([top, window], axis=-1), axis=-1)


class RankCache:
    """Rank vectors of the most recent ``capacity`` layers, oldest evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("rank cache capacity must be >= 1")
        self.capacity = capacity
        self._store: "OrderedDict[int, np.ndarray]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, layer: int) -> bool:
        return layer in self._store

    def __getitem__(self, layer: int) -> np.ndarray:
        return self._store[layer]

    def keys(self) -> list[int]:
        return list(self._store)

    def push(self, layer: int, ranks: np.ndarray) -> None:
        if self._store and layer != next(reversed(self._store)) + 1:
            raise StateError(f"rank cache expected layer {next(reversed(self._store)) + 1}, got {layer}")
        self._store[layer] = np.asarray(ranks, dtype=np.int64)
        while len(self._store) > self.capacity:
            self._store.popitem(last=False)

    def stack(self, first: int, last: int) -> np.ndarray:
        """Rows for layers ``first..last`` inclusive, [last - first + 1, T]."""
        missing = [layer for layer in range(first, last + 1) if layer not in self._store]
        if missing:
            raise StateError(f"rank cache is missing layers {missing}")
        return np.stack([self._store[layer] for layer in range(first, last + 1)])

    def clear(self) -> None:
        self._store.clear()


def get_ranks(
    layer_index: int,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    config: ScoringConfig,
    rank_cache: Optional[RankCache],
    scores: Optional[PooledScores] = None,
):
    """Compress K/V SnapKV-style and record the layer's rank vector.

    Returns ``(k_compressed, v_compressed, indices)`` where ``indices`` is
    [H_k, min(budget, n)] of sorted token indices. The rank vector stored in
    ``rank_cache`` ranks the head-reduced scores. Pass precomputed
    ``scores`` to avoid scoring twice.
    """
    n = q.shape[1]
    if config.kv_budget <= config.window_size:
        raise ConfigError("kv_budget must exceed window_size")
    if n <= config.window_size:
        raise ArgumentError(f"need n > W, got n={n}, W={config.window_size}")
    if scores is None:
        scores = pooled_scores(q, k, config, layer_index)
    idx = compress_indices(scores.per_head, n, config.window_size, config.kv_budget)
    if rank_cache is not None:
        rank_cache.push(layer_index, rank_desc(scores.reduced, layer_index).ranks)
    heads = np.arange(k.shape[0])[:, None]
    return k[heads, idx], v[heads, idx], idx
