"""Diagnostics: positional activation range, positional perplexity,
quantization-error tables, and their CSV reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError
from .model import Model, QuantStrategy, canonical_part, forward, nll_matrix
from .quant import QuantScheme, _dequant_array, quantize

POSITIONAL_HEADER = ("position", "mean", "std")
ERROR_HEADER = ("scheme", "rms_error", "max_error", "range_utilization")


@dataclass
class PositionalStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise DimensionError(f"mean has {self.mean.size} positions, std has {self.std.size}")
        if np.any(self.std < 0):
            raise ValueError("standard deviation must be non-negative")

    def __len__(self) -> int:
        return self.mean.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, PositionalStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)


@dataclass(frozen=True)
class QuantErrorRow:
    scheme: str
    rms_error: float
    max_error: float
    range_utilization: float
    max_scale: float = field(default=math.nan, compare=False)


def positional_gaps(activations: np.ndarray) -> np.ndarray:
    """Mean over samples of ``max - min`` across features, per position: ``[B, T, F] -> [T]``."""
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 3 or a.shape[-1] == 0:
        raise DimensionError(f"expected [batch, positions, features] activations, got {a.shape}")
    return (a.max(axis=-1) - a.min(axis=-1)).mean(axis=0)


def range_stats(activations) -> PositionalStats:
    """Aggregate per-batch positional gaps: mean and population std across batches."""
    per_batch = np.stack([positional_gaps(a) for a in activations])
    return PositionalStats(per_batch.mean(axis=0), per_batch.std(axis=0))


def probe_name(model: Model, layer_index: int, module: str, stack: str | None = None) -> str:
    """Name of the linear whose input is probed (self-attention for ``qkv``)."""
    try:
        part = canonical_part(module)
    except (KeyError, ValueError):
        raise ConfigError(f"invalid module {module!r}; expected mlp_out, qkv, attn_out or mlp_intermediate") from None
    stacks = [s for s in ("encoder", "decoder") if model.layer_map.get(s) and
              any(k.startswith(s + ".") for k in model.linears)]
    stack = stack or stacks[0]
    names = [k for k, p in model.linears.items() if k.startswith(f"{stack}.{layer_index}.") and p == part]
    if not names:
        raise ConfigError(f"no {stack} layer {layer_index} in this model")
    return names[0]


def positional_activation_range(model: Model, batches, layer_index: int, module: str = "mlp_out",
                                strategy: QuantStrategy | None = None, stack: str | None = None) -> PositionalStats:
    """Per-position gap between the largest and smallest input activation of one linear."""
    name = probe_name(model, layer_index, module, stack)
    acts = []
    for tokens in batches:
        out = forward(model, tokens, strategy, probe=True)
        acts.append(out.probes[name])
    if not acts:
        raise ValueError("no batches given")
    return range_stats(acts)


def positional_stats_from_nll(nll: np.ndarray) -> PositionalStats:
    """``exp`` of the mean NLL per position; std is over per-window ``exp(nll)``."""
    nll = np.asarray(nll, dtype=np.float64)
    if nll.ndim != 2 or nll.size == 0:
        raise ValueError("need a non-empty [windows, positions] NLL matrix")
    return PositionalStats(np.exp(nll.mean(axis=0)), np.exp(nll).std(axis=0))


def positional_perplexity(model: Model, eval_stream, strategy: QuantStrategy | None = None,
                          window: int | None = None) -> PositionalStats:
    stream = np.asarray(eval_stream).reshape(-1)
    if stream.size == 0:
        raise ValueError("empty evaluation stream")
    return positional_stats_from_nll(nll_matrix(model, stream, strategy, window))


def quant_error_report(x, schemes: list[QuantScheme]) -> list[QuantErrorRow]:
    """Roundtrip RMS / max error and fraction of the integer code range in use."""
    if not schemes:
        raise ValueError("need at least one scheme")
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    rows = []
    for s in schemes:
        kind = "activation" if s.granularity == "per_token" else "weight"
        q = quantize(arr, s, kind=kind)
        err = np.abs(_dequant_array(q).astype(np.float64) - arr)
        if s.passthrough:
            util, max_scale = math.nan, 0.0
        else:
            lo, hi = s.int_range
            util = np.unique(np.asarray(q.ints)).size / (hi - lo + 1)
            max_scale = float(np.max(q.params.scales))
        rows.append(QuantErrorRow(s.label(), float(np.sqrt(np.mean(err ** 2))) if err.size else 0.0,
                                  float(err.max()) if err.size else 0.0, float(util), max_scale))
    return rows


def emit_report(stats, path) -> None:
    """Write ``PositionalStats`` or quant-error rows as CSV (UTF-8, LF)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(stats, PositionalStats):
            w.writerow(POSITIONAL_HEADER)
            for p, (m, s) in enumerate(zip(stats.mean, stats.std)):
                w.writerow([p, repr(float(m)), repr(float(s))])
        else:
            w.writerow(ERROR_HEADER)
            for r in stats:
                w.writerow([r.scheme, repr(r.rms_error), repr(r.max_error), repr(r.range_utilization)])


def parse_report(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty report")
    header, body = tuple(rows[0]), rows[1:]
    if header == POSITIONAL_HEADER:
        return PositionalStats([float(r[1]) for r in body], [float(r[2]) for r in body])
    if header == ERROR_HEADER:
        return [QuantErrorRow(r[0], float(r[1]), float(r[2]), float(r[3]), math.nan) for r in body]
    raise ValueError(f"{path}: unrecognised header {header}")
