"""A small grouped-query-attention transformer used as the execution substrate.

The model is deliberately minimal: no positional encoding, a parameter-free
RMS norm before attention and before the (linear) feed-forward map, and
float64 arithmetic everywhere. Prefill accepts a per-layer hook which sees
Q/K/V before the layer's attention runs and may

* choose which KV entries the layer's cache keeps (per KV head),
* shrink the token stream for every deeper layer (one-shot selection),
* stop the pass early (first pass of a two-pass policy).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from aslkv.errors import ConfigError, DataError, NumericError, StateError

_RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 16
    num_q_heads: int = 4
    num_kv_heads: int = 2
    head_dim: int = 16
    hidden_dim: int = 64
    vocab_size: int = 512
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "num_q_heads", "num_kv_heads", "head_dim", "hidden_dim", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.num_q_heads % self.num_kv_heads:
            raise ConfigError(
                f"num_q_heads ({self.num_q_heads}) must be a multiple of num_kv_heads ({self.num_kv_heads})"
            )
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ConfigError("rng_seed must fit in an unsigned 64-bit integer")

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def digest(self) -> str:
        """Short stable hash of the config, used to tag exported traces."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise DataError("a token sequence needs at least one id")
        if ids.min() < 0:
            raise DataError("token ids must be non-negative")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.ids.size)


def as_tokens(tokens, vocab_size: int) -> TokenSequence:
    seq = tokens if isinstance(tokens, TokenSequence) else TokenSequence(np.asarray(tokens))
    if seq.ids.max() >= vocab_size:
        raise DataError(f"token id {int(seq.ids.max())} outside vocabulary of size {vocab_size}")
    return seq


def random_tokens(n: int, vocab_size: int, seed: int) -> TokenSequence:
    # separate stream from the weights drawn with the same seed
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    return TokenSequence(rng.integers(0, vocab_size, size=n))


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray  # [hidden, H_q * d]
    wk: np.ndarray  # [hidden, H_k * d]
    wv: np.ndarray  # [hidden, H_k * d]
    wo: np.ndarray  # [H_q * d, hidden]
    w_ffn: np.ndarray  # [hidden, hidden]


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    embed: np.ndarray
    layers: tuple
    unembed: np.ndarray


@dataclass
class LayerActivations:
    layer_index: int
    q: np.ndarray  # [H_q, m, d]
    k: np.ndarray  # [H_k, m, d]
    v: np.ndarray  # [H_k, m, d]


@dataclass
class LayerKVCache:
    """KV entries retained by one layer.

    ``positions[h]`` lists the (original) token positions kept for KV head
    ``h`` in increasing order; every head keeps the same number of entries.
    """

    layer_index: int
    positions: np.ndarray  # [H_k, m] int64
    keys: np.ndarray  # [H_k, m, d]
    values: np.ndarray  # [H_k, m, d]
    next_position: int

    @property
    def size(self) -> int:
        return int(self.positions.shape[1])

    @property
    def retained_indices(self) -> np.ndarray:
        return np.unique(self.positions)

    def shared_positions(self) -> Optional[np.ndarray]:
        """The common position set if all heads agree, else None."""
        first = self.positions[0]
        if all(np.array_equal(first, row) for row in self.positions[1:]):
            return first
        return None


@dataclass
class LayerPlan:
    """What a prefill hook wants done with the current layer.

    ``keep`` holds local column indices per KV head (None keeps all);
    ``propagate`` holds local row indices forwarded to deeper layers (None
    keeps all); ``stop`` ends the pass after this layer.
    """

    keep: Optional[np.ndarray] = None
    propagate: Optional[np.ndarray] = None
    stop: bool = False


PrefillHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray], Optional[LayerPlan]]


@dataclass
class PrefillResult:
    logits: Optional[np.ndarray]
    caches: list = field(default_factory=list)
    stopped_at: Optional[int] = None


def build_model(config: ModelConfig) -> Model:
    """Fill every weight from a Philox stream seeded by ``config.rng_seed``."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    rng = np.random.Generator(np.random.Philox(int(config.rng_seed)))
    D = config.hidden_dim
    bound = 1.0 / np.sqrt(D)

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape)

    embed = draw(config.vocab_size, D)
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                wq=draw(D, config.num_q_heads * config.head_dim),
                wk=draw(D, config.num_kv_heads * config.head_dim),
                wv=draw(D, config.num_kv_heads * config.head_dim),
                wo=draw(config.num_q_heads * config.head_dim, D),
                w_ffn=draw(D, D),
            )
        )
    unembed = draw(D, config.vocab_size)
    for arr in (embed, unembed, *[w for lw in layers for w in asdict(lw).values()]):
        arr.setflags(write=False)
    return Model(config=config, embed=embed, layers=tuple(layers), unembed=unembed)


def _rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)


def _project(model: Model, layer: int, x: np.ndarray):
    cfg = model.config
    w = model.layers[layer]
    h = _rms(x)
    m = x.shape[0]
    q = (h @ w.wq).reshape(m, cfg.num_q_heads, cfg.head_dim).transpose(1, 0, 2)
    k = (h @ w.wk).reshape(m, cfg.num_kv_heads, cfg.head_dim).transpose(1, 0, 2)
    v = (h @ w.wv).reshape(m, cfg.num_kv_heads, cfg.head_dim).transpose(1, 0, 2)
    return q, k, v


def _softmax(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool) -> np.ndarray:
    """GQA attention; q [H_q, m, d], k/v [H_k, s, d] -> [m, H_q * d]."""
    group = q.shape[0] // k.shape[0]
    k = np.repeat(k, group, axis=0)
    v = np.repeat(v, group, axis=0)
    d = q.shape[-1]
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    if causal:
        m, s = scores.shape[1:]
        mask = np.triu(np.ones((m, s), dtype=bool), k=s - m + 1)
        scores = np.where(mask, -np.inf, scores)
    out = _softmax(scores) @ v  # [H_q, m, d]
    return out.transpose(1, 0, 2).reshape(q.shape[1], -1)


def _finish_layer(model: Model, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
    w = model.layers[layer]
    x = x + attn @ w.wo
    return x + _rms(x) @ w.w_ffn


def _logits(model: Model, x_last: np.ndarray) -> np.ndarray:
    logits = _rms(x_last) @ model.unembed
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def prefill(
    model: Model,
    tokens,
    hook: Optional[PrefillHook] = None,
    positions: Optional[np.ndarray] = None,
    next_position: Optional[int] = None,
) -> PrefillResult:
    """Run the prompt through every layer, building one cache per layer.

    ``positions`` overrides the positions recorded in the caches (two-pass
    policies feed a compacted subsequence but keep original positions), and
    ``next_position`` is where decoding continues (defaults to last + 1).
    """
    cfg = model.config
    seq = as_tokens(tokens, cfg.vocab_size)
    n = len(seq)
    pos = np.arange(n, dtype=np.int64) if positions is None else np.asarray(positions, dtype=np.int64)
    if pos.shape != (n,):
        raise DataError("positions must match the token count")
    if next_position is None:
        next_position = int(pos[-1]) + 1

    x = model.embed[seq.ids]
    caches = []
    for layer in range(cfg.num_layers):
        q, k, v = _project(model, layer, x)
        plan = hook(layer, pos, q, k, v) if hook is not None else None
        plan = plan or LayerPlan()
        attn = _attend(q, k, v, causal=True)
        x = _finish_layer(model, layer, x, attn)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations at layer {layer}")

        if plan.keep is None:
            keep = np.broadcast_to(np.arange(pos.size), (cfg.num_kv_heads, pos.size))
        else:
            keep = np.sort(np.asarray(plan.keep, dtype=np.int64), axis=-1)
        heads = np.arange(cfg.num_kv_heads)[:, None]
        caches.append(
            LayerKVCache(
                layer_index=layer,
                positions=pos[keep],
                keys=k[heads, keep],
                values=v[heads, keep],
                next_position=next_position,
            )
        )
        if plan.propagate is not None:
            rows = np.sort(np.asarray(plan.propagate, dtype=np.int64))
            x = x[rows]
            pos = pos[rows]
        if plan.stop:
            return PrefillResult(logits=None, caches=caches, stopped_at=layer)
    return PrefillResult(logits=_logits(model, x[-1]), caches=caches)


def forward_logits(model: Model, tokens) -> np.ndarray:
    """Logits at every position under full causal attention, [n, vocab]."""
    seq = as_tokens(tokens, model.config.vocab_size)
    x = model.embed[seq.ids]
    for layer in range(model.config.num_layers):
        q, k, v = _project(model, layer, x)
        x = _finish_layer(model, layer, x, _attend(q, k, v, causal=True))
    logits = _rms(x) @ model.unembed
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def decode_step(model: Model, caches: Sequence[LayerKVCache], last_token: int):
    """Feed one token through all layers against the cached KV entries.

    Returns ``(logits, new_caches)``; the input caches are not modified.
    """
    cfg = model.config
    if len(caches) != cfg.num_layers:
        raise StateError(f"expected {cfg.num_layers} caches, got {len(caches)}")
    for cache in caches:
        if cache.size == 0:
            raise StateError(f"layer {cache.layer_index} cache is empty")
    tok = as_tokens([last_token], cfg.vocab_size)
    x = model.embed[tok.ids]
    new_caches = []
    for layer, cache in enumerate(caches):
        q, k, v = _project(model, layer, x)
        keys = np.concatenate([cache.keys, k], axis=1)
        values = np.concatenate([cache.values, v], axis=1)
        positions = np.concatenate(
            [cache.positions, np.full((cfg.num_kv_heads, 1), cache.next_position, dtype=np.int64)], axis=1
        )
        # the single new query sits after every cached entry, so no mask is needed
        x = _finish_layer(model, layer, x, _attend(q, keys, values, causal=False))
        new_caches.append(
            LayerKVCache(
                layer_index=cache.layer_index,
                positions=positions,
                keys=keys,
                values=values,
                next_position=cache.next_position + 1,
            )
        )
    return _logits(model, x[-1]), new_caches
