"""Adaptive selection-layer decision from the rank variance of top tokens.

Rank vectors are recorded from layer ``lmin - lobs + 1`` on, so the first
evaluation at ``lmin`` already sees a full ``lobs``-deep window and its
relative variance is 1.0 by definition. Each evaluation takes the union of
every window row's top-k tokens, averages their per-token (population) rank
variance over the window, and divides by the variance at ``lmin``. The first
layer whose ratio drops below ``tau`` becomes the selection layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from aslkv.errors import ArgumentError, ConfigError, StateError
from aslkv.scoring import RankCache, rank_desc


@dataclass(frozen=True)
class AslConfig:
    lmin: int = 10
    lobs: int = 8
    tau: float = 0.3
    kv_budget: int = 2048
    window_size: int = 32

    def __post_init__(self):
        if self.lobs < 1:
            raise ConfigError("lobs must be >= 1")
        if self.lmin < self.lobs - 1:
            raise ConfigError(
                f"lmin ({self.lmin}) must be >= lobs - 1 ({self.lobs - 1}) so a full lookback exists"
            )
        if not self.tau >= 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if self.window_size < 1 or self.kv_budget <= self.window_size:
            raise ConfigError(
                f"kv_budget ({self.kv_budget}) must exceed window_size ({self.window_size})"
            )

    @property
    def record_from(self) -> int:
        return self.lmin - self.lobs + 1


def default_lmin(num_layers: int, lobs: int = 8) -> int:
    """One third of the depth, raised if needed to fit a full lookback."""
    return max(num_layers // 3, lobs - 1)


@dataclass(frozen=True)
class VarianceState:
    init_var: Optional[float] = None
    log: tuple = ()  # ((layer, relative_variance), ...)

    def __post_init__(self):
        if self.init_var is not None and self.init_var < 0:
            raise StateError("init_var cannot be negative")


@dataclass
class SelectionDecision:
    selection_layer: int
    selected_indices: np.ndarray
    relative_variance_at_selection: float
    fallback: bool = False


def top_union(rank_window: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices ranked < k in at least one row."""
    rank_window = np.atleast_2d(rank_window)
    T = rank_window.shape[1]
    if not 0 < k <= T:
        raise ArgumentError(f"k must lie in [1, {T}], got {k}")
    return np.flatnonzero((rank_window < k).any(axis=0))


def rank_variance(rank_window: np.ndarray, union: np.ndarray) -> float:
    """Mean over ``union`` of each token's population rank variance."""
    union = np.asarray(union, dtype=np.int64)
    if union.size == 0:
        raise ArgumentError("union is empty")
    cols = np.atleast_2d(rank_window)[:, union].astype(np.float64)
    return float(cols.var(axis=0).mean())


def relative_variance(var: float, state: VarianceState):
    """Return ``(ratio, new_state)``; the first call pins the reference variance."""
    if var < 0:
        raise ArgumentError("variance cannot be negative")
    if state.init_var is None:
        return 1.0, replace(state, init_var=float(var))
    if state.init_var == 0.0:
        # ranks were already frozen at the first evaluation
        return 0.0, state
    return var / state.init_var, state


def selected_from_ranks(latest_ranks: np.ndarray, k: int, window_size: int) -> np.ndarray:
    """Tokens ranked < k plus the W window positions that follow the T past ones."""
    T = latest_ranks.size
    top = np.flatnonzero(latest_ranks < k)
    return np.union1d(top, np.arange(T, T + window_size))


def select_tokens(layer_index: int, config: AslConfig, rank_cache: RankCache, state: VarianceState):
    """Evaluate one layer; returns ``(decision or None, new_state)``.

    On a decision the rank cache is cleared.
    """
    if layer_index < config.lmin:
        return None, state
    if layer_index not in rank_cache:
        raise StateError(f"rank cache has no entry for layer {layer_index}")
    R = rank_cache.stack(layer_index - config.lobs + 1, layer_index)
    T = R.shape[1]
    k = min(config.kv_budget - config.window_size, T)
    union = top_union(R, k)
    ratio, state = relative_variance(rank_variance(R, union), state)
    state = replace(state, log=state.log + ((layer_index, ratio),))
    if ratio < config.tau:
        decision = SelectionDecision(
            selection_layer=layer_index,
            selected_indices=selected_from_ranks(R[-1], k, config.window_size),
            relative_variance_at_selection=ratio,
        )
        rank_cache.clear()
        return decision, state
    return None, state


def force_select(layer_index: int, config: AslConfig, rank_cache: RankCache, state: VarianceState) -> SelectionDecision:
    """Selection from the latest ranks when the threshold was never crossed."""
    if layer_index not in rank_cache:
        raise StateError(f"rank cache has no entry for layer {layer_index}")
    ranks = rank_cache[layer_index]
    k = min(config.kv_budget - config.window_size, ranks.size)
    ratio = state.log[-1][1] if state.log and state.log[-1][0] == layer_index else float("nan")
    rank_cache.clear()
    return SelectionDecision(
        selection_layer=layer_index,
        selected_indices=selected_from_ranks(ranks, k, config.window_size),
        relative_variance_at_selection=ratio,
        fallback=True,
    )


@dataclass
class AslMonitor:
    """Streams head-reduced score vectors layer by layer until a decision.

    Used both inside a live prefill and when replaying stored traces, so the
    two paths share one decision procedure.
    """

    config: AslConfig
    num_layers: int
    rank_cache: RankCache = field(init=False)
    state: VarianceState = field(default_factory=VarianceState)
    decision: Optional[SelectionDecision] = None
    ranks: dict = field(default_factory=dict)
    _next_layer: int = 0

    def __post_init__(self):
        if self.config.lmin > self.num_layers - 1:
            raise ConfigError(f"lmin ({self.config.lmin}) must be below the layer count ({self.num_layers})")
        self.rank_cache = RankCache(self.config.lobs)

    @property
    def relative_variances(self) -> dict:
        return dict(self.state.log)

    def observe(self, layer: int, reduced_scores: np.ndarray) -> Optional[SelectionDecision]:
        if self.decision is not None:
            raise StateError("a selection was already made")
        if layer != self._next_layer:
            raise StateError(f"expected layer {self._next_layer}, got {layer}")
        self._next_layer += 1
        if layer >= self.config.record_from:
            ranks = rank_desc(reduced_scores, layer).ranks
            self.ranks[layer] = ranks
            self.rank_cache.push(layer, ranks)
        decision, self.state = select_tokens(layer, self.config, self.rank_cache, self.state)
        if decision is None and layer == self.num_layers - 1:
            decision = force_select(layer, self.config, self.rank_cache, self.state)
        self.decision = decision
        return decision
