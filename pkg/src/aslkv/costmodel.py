"""Closed-form prefill/decode/memory cost ratios against full attention.

Work is counted in abstract units with constants dropped; only ratios are
meaningful. ``select_layer`` may be fractional so that a mean selection
layer over many prompts can be plugged in directly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

from aslkv.errors import ConfigError


def t_attn(n: float, d: float) -> float:
    """Per-layer attention work for n tokens: n^2 d + n d^2."""
    if n < 1 or d < 1:
        raise ConfigError(f"t_attn needs n, d >= 1, got n={n}, d={d}")
    return n * n * d + n * d * d


@dataclass(frozen=True)
class CostModelSpec:
    num_layers: int
    select_layer: float
    n: int
    k: int
    head_dim: int = 128
    num_kv_heads: int = 8
    lmin: int = 0
    lobs: int = 8
    pool_width: int = 7
    union_size: Optional[int] = None  # defaults to the k * lobs bound

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if not 0 <= self.select_layer < self.num_layers:
            raise ConfigError(f"select_layer must lie in [0, {self.num_layers}), got {self.select_layer}")
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        if self.head_dim < 1 or self.num_kv_heads < 1 or self.pool_width < 1 or self.lobs < 0:
            raise ConfigError("head_dim, num_kv_heads and pool_width must be >= 1; lobs >= 0")
        if self.union_size is not None and not 0 <= self.union_size <= self.k * self.lobs:
            raise ConfigError(f"union_size must lie in [0, k * lobs = {self.k * self.lobs}]")

    @property
    def m(self) -> int:
        return self.k * self.lobs if self.union_size is None else self.union_size


@dataclass(frozen=True)
class CostReport:
    ttft_ratio: float
    tpot_ratio: float
    memory_ratio: float
    attention: float
    pooling: float
    ranking: float
    variance: float
    topk: float

    def to_dict(self) -> dict:
        return asdict(self)


def ttft_ratio(spec: CostModelSpec) -> float:
    L, sel = spec.num_layers, spec.select_layer
    shrink = t_attn(spec.k, spec.head_dim) / t_attn(spec.n, spec.head_dim)
    return (sel + 1) / L + (L - sel - 1) / L * shrink


def tpot_ratio(spec: CostModelSpec) -> float:
    return spec.k / spec.n


def memory_ratio(spec: CostModelSpec) -> float:
    # (2 L h d k + 2 lobs n / w) / (2 L h d n), simplified so lobs = 0 gives k / n exactly
    overhead = spec.lobs / (spec.pool_width * spec.num_layers * spec.num_kv_heads * spec.head_dim)
    return spec.k / spec.n + overhead


def overhead_terms(spec: CostModelSpec) -> dict:
    """Per-prompt bookkeeping work of the adaptive selector.

    Layers evaluated before the selection layer count as
    ``max(0, select_layer - lmin)``; a fixed selection layer shallower than
    ``lmin`` has no monitoring cost.
    """
    monitored = max(0.0, spec.select_layer - spec.lmin)
    n = spec.n
    return {
        "pooling": monitored * n,
        "ranking": monitored * n * math.log(n),
        "variance": monitored * spec.lobs * spec.m,
        "topk": n * math.log(spec.k),
    }


def evaluate(spec: CostModelSpec) -> CostReport:
    terms = overhead_terms(spec)
    L, sel = spec.num_layers, spec.select_layer
    attention = (sel + 1) * t_attn(spec.n, spec.head_dim) + (L - sel - 1) * t_attn(spec.k, spec.head_dim)
    return CostReport(
        ttft_ratio=ttft_ratio(spec),
        tpot_ratio=tpot_ratio(spec),
        memory_ratio=memory_ratio(spec),
        attention=attention,
        **terms,
    )
