"""Experiment reports and their canonical JSON / CSV encodings."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from aslkv.costmodel import CostModelSpec, evaluate
from aslkv.errors import ArgumentError, FormatError
from aslkv.policies import ASL_POLICIES, PruneConfig
from aslkv.trace import ScoreTrace, replay_decision

SIGNIFICANT_DIGITS = 9


@dataclass
class ExperimentReport:
    config: dict
    selection_layer: Optional[int]
    selected_count: Optional[int]
    fallback: bool
    relative_variances: list  # one entry per layer, None where not evaluated
    cache_sizes: list
    cost: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        try:
            return cls(**data)
        except TypeError as exc:
            raise FormatError(f"malformed report: {exc}") from None


def config_echo(config: PruneConfig, num_layers: int, n: int) -> dict:
    echo = {
        "policy": config.policy,
        "kv_budget": config.kv_budget,
        "window_size": config.window_size,
        "kernel_size": config.kernel_size,
        "pre_selection_budget": config.pre_selection_budget,
        "num_layers": num_layers,
        "n": n,
    }
    if config.policy in ASL_POLICIES:
        asl = config.asl_config(num_layers)
        echo.update(tau=asl.tau, lmin=asl.lmin, lobs=asl.lobs)
    else:
        echo["fixed_selection_layer"] = config.fixed_selection_layer
    return echo


def cost_block(config: PruneConfig, num_layers: int, n: int, selection_layer, num_kv_heads, head_dim):
    if selection_layer is None or num_kv_heads is None or head_dim is None:
        return None
    lmin = config.asl_config(num_layers).lmin if config.policy in ASL_POLICIES else 0
    spec = CostModelSpec(
        num_layers=num_layers,
        select_layer=selection_layer,
        n=n,
        k=min(config.kv_budget, n),
        head_dim=head_dim,
        num_kv_heads=num_kv_heads,
        lmin=lmin,
        lobs=config.lobs if config.policy in ASL_POLICIES else 0,
        pool_width=config.kernel_size,
    )
    return evaluate(spec).to_dict()


def contract_cache_sizes(config: PruneConfig, num_layers: int, n: int, selection_layer, selected_count) -> list:
    """Per-layer cache sizes each policy promises after prefill."""
    L = num_layers
    if n <= config.window_size or config.policy == "full":
        return [n] * L
    bounded = min(config.kv_budget, n)
    if config.policy == "snapkv":
        return [bounded] * L
    if config.policy in ("gemfilter", "asl_2pass"):
        return [selected_count] * L
    before = bounded if config.bounded_before_selection else n
    at_selection = selected_count if config.policy == "fastkv" else before
    sel = selection_layer
    return [before] * sel + [at_selection] + [selected_count] * (L - sel - 1)


def build_report(config: PruneConfig, metrics, model_config) -> ExperimentReport:
    """Report for a live run on the toy model."""
    L = metrics.num_layers
    return ExperimentReport(
        config=config_echo(config, L, metrics.n),
        selection_layer=metrics.selection_layer,
        selected_count=metrics.selected_count,
        fallback=metrics.fallback,
        relative_variances=[metrics.relative_variances.get(layer) for layer in range(L)],
        cache_sizes=list(metrics.cache_sizes),
        cost=cost_block(
            config, L, metrics.n, metrics.selection_layer, model_config.num_kv_heads, model_config.head_dim
        ),
    )


def replay(trace: ScoreTrace, config: PruneConfig) -> ExperimentReport:
    """Re-run the adaptive decision over stored scores.

    Cache sizes are the policy's contractual sizes for the replayed decision.
    """
    if config.policy not in ASL_POLICIES:
        raise ArgumentError(f"replay needs an adaptive policy, got {config.policy}")
    L, n = trace.num_layers, trace.n
    monitor = replay_decision(trace, config.asl_config(L))
    decision = monitor.decision
    meta = trace.metadata
    if meta.get("kernel_size", config.kernel_size) != config.kernel_size:
        raise ArgumentError("kernel size does not match the trace")
    variances = monitor.relative_variances
    selected_count = int(decision.selected_indices.size)
    return ExperimentReport(
        config=config_echo(config, L, n),
        selection_layer=decision.selection_layer,
        selected_count=selected_count,
        fallback=decision.fallback,
        relative_variances=[variances.get(layer) for layer in range(L)],
        cache_sizes=contract_cache_sizes(config, L, n, decision.selection_layer, selected_count),
        cost=cost_block(config, L, n, decision.selection_layer, meta.get("num_kv_heads"), meta.get("head_dim")),
    )


def _round(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.{SIGNIFICANT_DIGITS}g}")
    if isinstance(obj, dict):
        return {str(key): _round(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(value) for value in obj]
    if hasattr(obj, "item"):  # numpy scalar
        return _round(obj.item())
    return obj


def to_json(report: ExperimentReport) -> str:
    return json.dumps(_round(report.to_dict()), sort_keys=True, indent=2) + "\n"


def to_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "relative_variance", "cache_size"])
    for layer, (ratio, size) in enumerate(zip(report.relative_variances, report.cache_sizes)):
        writer.writerow([layer, "" if ratio is None else f"{ratio:.{SIGNIFICANT_DIGITS}g}", size])
    return buf.getvalue()


def emit_report(report: ExperimentReport, fmt: str = "json") -> bytes:
    if fmt == "json":
        return to_json(report).encode()
    if fmt == "csv":
        return to_csv(report).encode()
    raise ArgumentError(f"unknown report format {fmt!r}")


def parse_report(data) -> ExperimentReport:
    if isinstance(data, bytes):
        data = data.decode()
    try:
        return ExperimentReport.from_dict(json.loads(data))
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc}") from None
