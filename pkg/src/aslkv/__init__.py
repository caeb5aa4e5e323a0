"""Layer-wise KV-cache token pruning with adaptive selection layers."""

from aslkv.errors import (
    ArgumentError,
    AslkvError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    StateError,
)
from aslkv.model import LayerKVCache, Model, ModelConfig, build_model, decode_step, prefill
from aslkv.scoring import RankCache, ScoringConfig
from aslkv.selector import AslConfig, AslMonitor, SelectionDecision, VarianceState
from aslkv.policies import PruneConfig, RunMetrics, run_policy
from aslkv.costmodel import CostModelSpec, CostReport, evaluate

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "AslConfig",
    "AslMonitor",
    "AslkvError",
    "ConfigError",
    "CostModelSpec",
    "CostReport",
    "DataError",
    "FormatError",
    "LayerKVCache",
    "Model",
    "ModelConfig",
    "NumericError",
    "PruneConfig",
    "RankCache",
    "RunMetrics",
    "ScoringConfig",
    "SelectionDecision",
    "StateError",
    "VarianceState",
    "build_model",
    "decode_step",
    "evaluate",
    "prefill",
    "run_policy",
]
