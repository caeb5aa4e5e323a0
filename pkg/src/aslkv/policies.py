"""Prefill drivers for each KV retention policy.

``full``       every layer keeps every token.
``snapkv``     full attention, each layer's cache compressed per KV head.
``fastkv``     one pass; fixed selection layer, deeper layers see the subset.
``gemfilter``  two passes; the second re-runs all layers over the subset.
``asl``        like fastkv, with the selection layer chosen by rank variance.
``asl_2pass``  like gemfilter, with the selection layer chosen by rank variance.

Layers before the selection layer keep either every token
(``pre_selection_budget="full"``) or a SnapKV-compressed cache of the same
budget (``"budget"``). The selection layer's own attention is always full;
the subset applies from the next layer on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from aslkv.costmodel import t_attn
from aslkv.errors import ConfigError
from aslkv.model import LayerPlan, Model, PrefillResult, as_tokens, prefill
from aslkv.scoring import ScoringConfig, get_ranks, pooled_scores, rank_desc
from aslkv.selector import AslConfig, AslMonitor, default_lmin, selected_from_ranks

POLICIES = ("full", "snapkv", "fastkv", "gemfilter", "asl", "asl_2pass")
FIXED_LAYER_POLICIES = ("fastkv", "gemfilter")
ASL_POLICIES = ("asl", "asl_2pass")


@dataclass(frozen=True)
class PruneConfig:
    policy: str = "asl"
    kv_budget: int = 2048
    window_size: int = 32
    kernel_size: int = 7
    fixed_selection_layer: Optional[int] = None
    tau: float = 0.3
    lmin: Optional[int] = None
    lobs: int = 8
    pre_selection_budget: str = "budget"

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {', '.join(POLICIES)}")
        if self.pre_selection_budget not in ("budget", "full"):
            raise ConfigError("pre_selection_budget must be 'budget' or 'full'")
        if self.policy in FIXED_LAYER_POLICIES:
            if self.fixed_selection_layer is None or self.fixed_selection_layer < 0:
                raise ConfigError(f"policy {self.policy} needs a non-negative fixed_selection_layer")
        elif self.fixed_selection_layer is not None:
            raise ConfigError(f"fixed_selection_layer conflicts with policy {self.policy}")
        # validates window/kernel/budget together
        self.scoring

    @property
    def scoring(self) -> ScoringConfig:
        return ScoringConfig(self.window_size, self.kernel_size, self.kv_budget)

    @property
    def bounded_before_selection(self) -> bool:
        return self.pre_selection_budget == "budget"

    def asl_config(self, num_layers: int) -> AslConfig:
        lmin = default_lmin(num_layers, self.lobs) if self.lmin is None else self.lmin
        return AslConfig(lmin=lmin, lobs=self.lobs, tau=self.tau, kv_budget=self.kv_budget, window_size=self.window_size)

    def check_model(self, num_layers: int) -> None:
        if self.fixed_selection_layer is not None and self.fixed_selection_layer >= num_layers:
            raise ConfigError(
                f"fixed_selection_layer ({self.fixed_selection_layer}) must be below the layer count ({num_layers})"
            )
        if self.policy in ASL_POLICIES:
            if num_layers < self.lobs + 2:
                raise ConfigError(f"adaptive policies need at least lobs + 2 = {self.lobs + 2} layers")
            cfg = self.asl_config(num_layers)
            if cfg.lmin > num_layers - 1:
                raise ConfigError(f"lmin ({cfg.lmin}) must be below the layer count ({num_layers})")


@dataclass
class RunMetrics:
    policy: str
    n: int
    num_layers: int
    selection_layer: Optional[int] = None
    selected_positions: Optional[np.ndarray] = None
    fallback: bool = False
    pass_count: int = 1
    cache_sizes: list = field(default_factory=list)
    relative_variances: dict = field(default_factory=dict)
    attention_work: list = field(default_factory=list)
    ranks: dict = field(default_factory=dict)
    reduced_scores: dict = field(default_factory=dict)

    @property
    def selected_count(self) -> Optional[int]:
        return None if self.selected_positions is None else int(self.selected_positions.size)


class _Recorder:
    """Base hook: tallies attention work per layer."""

    def __init__(self, model: Model, config: Optional[PruneConfig] = None):
        self.config = config
        self.head_dim = model.config.head_dim
        self.work = np.zeros(model.config.num_layers)

    def _tally(self, layer: int, m: int) -> None:
        self.work[layer] += t_attn(m, self.head_dim)

    def tally_only(self, layer, positions, q, k, v):
        self._tally(layer, q.shape[1])
        return None

    __call__ = tally_only

    def _compress(self, layer, q, k, v):
        m = q.shape[1]
        if not self.config.bounded_before_selection or m <= self.config.window_size:
            return None
        return get_ranks(layer, q, k, v, self.config.scoring, None)[2]


class _SnapKVHook(_Recorder):
    def __call__(self, layer, positions, q, k, v):
        self._tally(layer, q.shape[1])
        if q.shape[1] <= self.config.window_size:
            return None
        return LayerPlan(keep=get_ranks(layer, q, k, v, self.config.scoring, None)[2])


class _FixedLayerHook(_Recorder):
    def __init__(self, model, config, stop_at_selection):
        super().__init__(model, config)
        self.stop_at_selection = stop_at_selection
        self.selected = None

    def __call__(self, layer, positions, q, k, v):
        self._tally(layer, q.shape[1])
        sel = self.config.fixed_selection_layer
        if layer < sel:
            return LayerPlan(keep=self._compress(layer, q, k, v))
        if layer > sel or q.shape[1] <= self.config.window_size:
            return None
        scores = pooled_scores(q, k, self.config.scoring, layer)
        ranks = rank_desc(scores.reduced, layer).ranks
        budget = min(self.config.kv_budget - self.config.window_size, ranks.size)
        self.selected = selected_from_ranks(ranks, budget, self.config.window_size)
        keep = np.broadcast_to(self.selected, (k.shape[0], self.selected.size))
        return LayerPlan(keep=keep, propagate=self.selected, stop=self.stop_at_selection)


class _AslHook(_Recorder):
    def __init__(self, model, config, stop_at_selection):
        super().__init__(model, config)
        self.stop_at_selection = stop_at_selection
        self.monitor = AslMonitor(config.asl_config(model.config.num_layers), model.config.num_layers)
        self.reduced = {}

    def __call__(self, layer, positions, q, k, v):
        self._tally(layer, q.shape[1])
        if self.monitor.decision is not None or q.shape[1] <= self.config.window_size:
            return None
        scores = pooled_scores(q, k, self.config.scoring, layer)
        self.reduced[layer] = scores.reduced
        decision = self.monitor.observe(layer, scores.reduced)
        keep = None
        if self.config.bounded_before_selection:
            keep = get_ranks(layer, q, k, v, self.config.scoring, None, scores=scores)[2]
        if decision is None:
            return LayerPlan(keep=keep)
        return LayerPlan(keep=keep, propagate=decision.selected_indices, stop=self.stop_at_selection)


def _cache_sizes(result: PrefillResult) -> list:
    return [cache.size for cache in result.caches]


def _second_pass(model: Model, seq, selected: np.ndarray, hook: _Recorder):
    """Re-run every layer over the selected subsequence, original positions kept."""
    return prefill(model, seq.ids[selected], hook=hook.tally_only, positions=selected, next_position=len(seq))


def run_full(model: Model, tokens):
    seq = as_tokens(tokens, model.config.vocab_size)
    hook = _Recorder(model)
    result = prefill(model, seq, hook=hook)
    metrics = RunMetrics(
        policy="full",
        n=len(seq),
        num_layers=model.config.num_layers,
        cache_sizes=_cache_sizes(result),
        attention_work=hook.work.tolist(),
    )
    return result, metrics


def run_snapkv(model: Model, tokens, config: PruneConfig):
    seq = as_tokens(tokens, model.config.vocab_size)
    hook = _SnapKVHook(model, config)
    result = prefill(model, seq, hook=hook)
    metrics = RunMetrics(
        policy="snapkv",
        n=len(seq),
        num_layers=model.config.num_layers,
        cache_sizes=_cache_sizes(result),
        attention_work=hook.work.tolist(),
    )
    return result, metrics


def _run_fixed(model: Model, tokens, config: PruneConfig, two_pass: bool):
    config.check_model(model.config.num_layers)
    seq = as_tokens(tokens, model.config.vocab_size)
    hook = _FixedLayerHook(model, config, stop_at_selection=two_pass)
    result = prefill(model, seq, hook=hook)
    passes = 1
    if two_pass:
        selected = hook.selected if hook.selected is not None else np.arange(len(seq))
        result = _second_pass(model, seq, selected, hook)
        passes = 2
    metrics = RunMetrics(
        policy=config.policy,
        n=len(seq),
        num_layers=model.config.num_layers,
        selection_layer=config.fixed_selection_layer,
        selected_positions=hook.selected,
        pass_count=passes,
        cache_sizes=_cache_sizes(result),
        attention_work=hook.work.tolist(),
    )
    return result, metrics


def run_fastkv(model: Model, tokens, config: PruneConfig):
    if config.policy != "fastkv":
        raise ConfigError(f"run_fastkv called with policy {config.policy}")
    return _run_fixed(model, tokens, config, two_pass=False)


def run_gemfilter(model: Model, tokens, config: PruneConfig):
    if config.policy != "gemfilter":
        raise ConfigError(f"run_gemfilter called with policy {config.policy}")
    return _run_fixed(model, tokens, config, two_pass=True)


def _run_adaptive(model: Model, tokens, config: PruneConfig, two_pass: bool):
    config.check_model(model.config.num_layers)
    seq = as_tokens(tokens, model.config.vocab_size)
    hook = _AslHook(model, config, stop_at_selection=two_pass)
    result = prefill(model, seq, hook=hook)
    decision = hook.monitor.decision
    passes = 1
    if two_pass:
        selected = decision.selected_indices if decision is not None else np.arange(len(seq))
        result = _second_pass(model, seq, selected, hook)
        passes = 2
    metrics = RunMetrics(
        policy=config.policy,
        n=len(seq),
        num_layers=model.config.num_layers,
        selection_layer=None if decision is None else decision.selection_layer,
        selected_positions=None if decision is None else decision.selected_indices,
        fallback=bool(decision is not None and decision.fallback),
        pass_count=passes,
        cache_sizes=_cache_sizes(result),
        relative_variances=hook.monitor.relative_variances,
        attention_work=hook.work.tolist(),
        ranks=dict(hook.monitor.ranks),
        reduced_scores=dict(hook.reduced),
    )
    return result, metrics


def run_asl(model: Model, tokens, config: PruneConfig):
    if config.policy != "asl":
        raise ConfigError(f"run_asl called with policy {config.policy}")
    return _run_adaptive(model, tokens, config, two_pass=False)


def run_asl_2pass(model: Model, tokens, config: PruneConfig):
    if config.policy != "asl_2pass":
        raise ConfigError(f"run_asl_2pass called with policy {config.policy}")
    return _run_adaptive(model, tokens, config, two_pass=True)


def run_policy(model: Model, tokens, config: PruneConfig):
    """Dispatch on ``config.policy``; returns ``(PrefillResult, RunMetrics)``."""
    if config.policy == "full":
        return run_full(model, tokens)
    runner = {
        "snapkv": run_snapkv,
        "fastkv": run_fastkv,
        "gemfilter": run_gemfilter,
        "asl": run_asl,
        "asl_2pass": run_asl_2pass,
    }[config.policy]
    return runner(model, tokens, config)
