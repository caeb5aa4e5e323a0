"""Score traces: synthetic generation, line-delimited file I/O, replay.

A trace stores one head-reduced, pooled score vector (length ``n - W``) per
layer as 32-bit floats. The on-disk form is JSON Lines: a header record
followed by one record per layer, starting at layer 0::

    {"format":"aslkv-trace","format_version":1,"metadata":{...}}
    {"layer":0,"scores":[0.0021,0.0019,...]}
    {"layer":1,"scores":[...]}

Floats are written in their shortest float32 round-trip form, so
``write(read(path))`` reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from aslkv.errors import ArgumentError, FormatError
from aslkv.selector import AslMonitor

FORMAT_NAME = "aslkv-trace"
FORMAT_VERSION = 1
_REQUIRED_META = ("num_layers", "n", "window_size")


@dataclass
class ScoreTrace:
    metadata: dict
    scores: list = field(default_factory=list)  # float32 vectors, one per layer
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        missing = [key for key in _REQUIRED_META if key not in self.metadata]
        if missing:
            raise FormatError(f"trace metadata lacks {missing}")
        self.scores = [np.asarray(s, dtype=np.float32) for s in self.scores]
        T = self.metadata["n"] - self.metadata["window_size"]
        if T < 1:
            raise FormatError("trace needs n > window_size")
        if len(self.scores) > self.metadata["num_layers"]:
            raise FormatError("more layer records than num_layers")
        for layer, vec in enumerate(self.scores):
            if vec.shape != (T,):
                raise FormatError(f"layer {layer} has {vec.size} scores, expected {T}")
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"layer {layer} has non-finite scores")

    @property
    def num_layers(self) -> int:
        return int(self.metadata["num_layers"])

    @property
    def n(self) -> int:
        return int(self.metadata["n"])

    @property
    def window_size(self) -> int:
        return int(self.metadata["window_size"])

    @property
    def complete(self) -> bool:
        return len(self.scores) == self.num_layers


@dataclass(frozen=True)
class SyntheticTraceSpec:
    """Three-phase score shape: near-uniform, ramp, localized on a focus set.

    Before ``uniform_until`` scores are flat plus noise. Between
    ``uniform_until`` and ``localize_from`` a fixed focus set gains weight
    linearly. From ``localize_from`` on the focus set carries its full bump
    and the noise amplitude halves every layer.
    """

    num_layers: int = 32
    n: int = 512
    window_size: int = 32
    uniform_until: int = 12
    localize_from: int = 18
    focus_size: int = 32
    sharpness: float = 4.0
    noise: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if not 0 <= self.uniform_until <= self.localize_from < self.num_layers:
            raise ArgumentError("need 0 <= uniform_until <= localize_from < num_layers")
        if self.n <= self.window_size or self.window_size < 1:
            raise ArgumentError("need n > window_size >= 1")
        if not 1 <= self.focus_size <= self.n - self.window_size:
            raise ArgumentError("focus_size must lie in [1, n - window_size]")
        if self.sharpness < 0 or self.noise < 0:
            raise ArgumentError("sharpness and noise must be non-negative")


def _localization(spec: SyntheticTraceSpec, layer: int) -> float:
    if layer >= spec.localize_from:
        return 1.0
    if layer < spec.uniform_until:
        return 0.0
    return (layer - spec.uniform_until) / (spec.localize_from - spec.uniform_until)


def gen_trace(spec: SyntheticTraceSpec) -> ScoreTrace:
    rng = np.random.Generator(np.random.Philox(spec.seed))
    T = spec.n - spec.window_size
    focus = rng.choice(T, size=spec.focus_size, replace=False)
    bump = np.zeros(T)
    bump[focus] = spec.sharpness * rng.uniform(0.5, 1.5, size=spec.focus_size)
    scores = []
    for layer in range(spec.num_layers):
        sigma = spec.noise
        if layer >= spec.localize_from:
            sigma *= 0.5 ** (layer - spec.localize_from + 1)
        s = 1.0 + _localization(spec, layer) * bump + sigma * rng.random(T)
        scores.append((s / s.sum()).astype(np.float32))
    metadata = {"source": "synthetic", "generator": asdict(spec)}
    metadata.update(num_layers=spec.num_layers, n=spec.n, window_size=spec.window_size)
    return ScoreTrace(metadata=metadata, scores=scores)


def _encode_vector(vec: np.ndarray) -> str:
    return "[" + ",".join(str(x) for x in vec) + "]"


def dumps_trace(trace: ScoreTrace) -> str:
    header = {"format": FORMAT_NAME, "format_version": trace.format_version, "metadata": trace.metadata}
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for layer, vec in enumerate(trace.scores):
        lines.append('{"layer":%d,"scores":%s}' % (layer, _encode_vector(vec)))
    return "\n".join(lines) + "\n"


def loads_trace(text: str) -> ScoreTrace:
    if not text.endswith("\n"):
        raise FormatError("trace is truncated (no trailing newline)")
    lines = text[:-1].split("\n")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"trace is not valid JSON Lines: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise FormatError("not an aslkv trace")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported trace version {header.get('format_version')!r}")
    scores = []
    for expected, record in enumerate(records):
        if record.get("layer") != expected:
            raise FormatError(f"expected layer {expected}, found {record.get('layer')!r}")
        scores.append(np.asarray(record["scores"], dtype=np.float32))
    return ScoreTrace(metadata=header["metadata"], scores=scores)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, data: str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        os.chmod(tmp, 0o666 & ~_umask())
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(trace: ScoreTrace, path) -> None:
    atomic_write(path, dumps_trace(trace))


def read_trace(path) -> ScoreTrace:
    with open(path, newline="") as fh:
        return loads_trace(fh.read())


def trace_from_run(metrics, model_config, prune_config) -> ScoreTrace:
    """Export the reduced scores a live adaptive run computed before deciding."""
    layers = sorted(metrics.reduced_scores)
    if layers != list(range(len(layers))):
        raise ArgumentError("run did not record scores contiguously from layer 0")
    metadata = {
        "source": "model",
        "model": asdict(model_config),
        "model_digest": model_config.digest(),
        "num_layers": model_config.num_layers,
        "num_kv_heads": model_config.num_kv_heads,
        "head_dim": model_config.head_dim,
        "n": metrics.n,
        "window_size": prune_config.window_size,
        "kernel_size": prune_config.kernel_size,
    }
    return ScoreTrace(metadata=metadata, scores=[metrics.reduced_scores[layer] for layer in layers])


def replay_decision(trace: ScoreTrace, asl_config):
    """Drive the streaming selector over stored scores; returns the monitor."""
    if asl_config.window_size != trace.window_size:
        raise ArgumentError(
            f"window size {asl_config.window_size} does not match the trace's {trace.window_size}"
        )
    monitor = AslMonitor(asl_config, trace.num_layers)
    for layer, vec in enumerate(trace.scores):
        if monitor.observe(layer, vec.astype(np.float64)) is not None:
            break
    if monitor.decision is None:
        raise FormatError(
            f"trace stops at layer {len(trace.scores) - 1} of {trace.num_layers} before any selection"
        )
    return monitor
