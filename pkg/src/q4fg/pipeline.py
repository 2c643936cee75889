"""Model-level operations behind the CLI: part quantization and pruning,
token files, and the per-shape quantization-strategy tuner."""

from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .exceptions import ConfigError, SchemeMisuseError
from .model import PARTS, Model, QuantStrategy, canonical_part, forward
from .quant import QuantScheme, _dequant_array, quantize
from .sparsity import CompositionOrder, SparsityMask, l1_mask
from .tensor import Tensor

THREADS_ENV = "Q4FG_THREADS"


def thread_count(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


@contextmanager
def worker_limit(threads: int | None = None):
    """Cap BLAS worker threads (``Q4FG_THREADS`` when ``threads`` is None)."""
    with threadpool_limits(limits=threads or thread_count()):
        yield


def parse_parts(text) -> list[str]:
    if text is None or text == "all":
        return list(PARTS)
    items = text if isinstance(text, (list, tuple)) else [t for t in text.split(",") if t]
    return list(dict.fromkeys(canonical_part(t.strip()) for t in items))


def quantize_parts(model: Model, scheme: QuantScheme, parts=None, masks: dict | None = None,
                   order=CompositionOrder.PRUNE_THEN_QUANT) -> list[str]:
    """Store integer weights for every linear of the selected parts (in place).

    The float weight is replaced by its dequantized value.  Quantizing a
    linear that already carries integer weights raises.
    """
    if scheme.passthrough:
        raise SchemeMisuseError("quantize needs a 4- or 8-bit weight scheme")
    order = CompositionOrder(order)
    wanted = set(parse_parts(parts))
    names = [n for n, p in model.linears.items() if p in wanted]
    already = [n for n in names if n in model.qweights]
    if already:
        raise SchemeMisuseError(f"already quantized: {', '.join(already)}")
    masks = masks or {}
    for name in names:
        w = model.params[name + ".weight"]
        m = masks.get(name)
        m = None if m is None else (m.mask if isinstance(m, SparsityMask) else np.asarray(m, dtype=bool))
        src = w.data if m is None or order is CompositionOrder.QUANT_THEN_PRUNE else w.data * m
        # under quant_then_prune the mask stays separate and is applied at inference
        q = quantize(src, scheme, kind="weight")
        model.qweights[name] = q
        model.params[name + ".weight"] = Tensor(_dequant_array(q).astype(w.dtype), dtype=w.dtype, name=w.name)
    return names


def prune_parts(model: Model, sparsity: float, structure="unstructured", parts=None) -> dict[str, SparsityMask]:
    """Magnitude masks for every linear of the selected parts."""
    wanted = set(parse_parts(parts))
    return {n: l1_mask(model.params[n + ".weight"], sparsity, structure)
            for n, p in model.linears.items() if p in wanted}


# ---------------------------------------------------------------------------
# token files
# ---------------------------------------------------------------------------

def write_tokens(path, tokens) -> None:
    arr = np.asarray(tokens).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
        raise ValueError("token ids must fit in u32")
    arr.astype("<u4").tofile(path)


def read_tokens(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<u4")
    return raw.astype(np.int64)


# ---------------------------------------------------------------------------
# strategy tuner
# ---------------------------------------------------------------------------

@dataclass
class TuneBucket:
    batch_size: int
    seq_len: int
    chosen: str
    timings_ns: dict[str, float]
    part_deltas_ns: dict[str, float]

    @property
    def m(self) -> int:
        return self.batch_size * self.seq_len

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "seq_len": self.seq_len, "m": self.m, "chosen": self.chosen,
                "timings_ns": self.timings_ns, "part_deltas_ns": self.part_deltas_ns}

    @classmethod
    def from_dict(cls, d: dict) -> TuneBucket:
        return cls(int(d["batch_size"]), int(d["seq_len"]), d["chosen"],
                   {k: float(v) for k, v in d["timings_ns"].items()},
                   {k: float(v) for k, v in d["part_deltas_ns"].items()})


@dataclass
class StrategyTuneResult:
    weight_scheme: QuantScheme
    activation_scheme: QuantScheme
    buckets: list[TuneBucket] = field(default_factory=list)
    repeats: int = 5
    threads: int = 1

    def strategy(self, code: str) -> QuantStrategy:
        return QuantStrategy.from_code(code, self.weight_scheme, self.activation_scheme)

    def select(self, m: int) -> QuantStrategy:
        """Strategy of the bucket with ``M`` closest to ``m`` (smaller M on ties)."""
        if not self.buckets:
            raise ConfigError("tune result holds no buckets")
        best = min(self.buckets, key=lambda b: (abs(b.m - m), b.m))
        return self.strategy(best.chosen)

    def to_dict(self) -> dict:
        return {"weight_scheme": self.weight_scheme.to_dict(), "activation_scheme": self.activation_scheme.to_dict(),
                "repeats": self.repeats, "threads": self.threads, "buckets": [b.to_dict() for b in self.buckets]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> StrategyTuneResult:
        return cls(QuantScheme.from_dict(d["weight_scheme"]), QuantScheme.from_dict(d["activation_scheme"]),
                   [TuneBucket.from_dict(b) for b in d["buckets"]], int(d["repeats"]), int(d["threads"]))

    @classmethod
    def from_json(cls, text: str) -> StrategyTuneResult:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> StrategyTuneResult:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def parse_shapes(text: str) -> list[tuple[int, int]]:
    """``"1,32;8,32"`` -> ``[(1, 32), (8, 32)]``."""
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        try:
            bs, seq = (int(v) for v in item.split(","))
        except ValueError:
            raise ConfigError(f"shape must be 'bs,seq', got {item!r}") from None
        if bs < 1 or seq < 1:
            raise ConfigError(f"shape sizes must be positive, got {item!r}")
        out.append((bs, seq))
    if not out:
        raise ConfigError("need at least one shape")
    return out


def _tokens_for(model: Model, bs: int, seq: int, rng: np.random.Generator):
    if seq > model.cfg.max_seq:
        raise ConfigError(f"sequence length {seq} exceeds the model's max_seq {model.cfg.max_seq}")
    tok = rng.integers(0, model.cfg.vocab_size, size=(bs, seq))
    return (tok, tok) if model.cfg.arch == "encoder_decoder" else tok


def tune_strategy(model: Model, shapes, weight: QuantScheme, act: QuantScheme, repeats: int = 5,
                  seed: int = 0, codes: list[str] | None = None, threads: int | None = None) -> StrategyTuneResult:
    """Time the model forward under every strategy code and keep the fastest per shape.

    Weights are pre-quantized once (as in deployment); activation
    quantization runs inside every timed forward.  Strategies are timed in
    interleaved rounds and compared by median.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    codes = codes or [s.code for s in QuantStrategy.grid()]
    deployed = model.copy()
    deployed.qweights = {}
    for name in deployed.linears:
        w = deployed.params[name + ".weight"].data
        deployed.qweights[name] = quantize(w, weight, kind="weight")
    rng = np.random.default_rng(seed)
    threads = threads or thread_count()
    result = StrategyTuneResult(weight, act, repeats=repeats, threads=threads)
    with worker_limit(threads):
        for bs, seq in shapes:
            tokens = _tokens_for(deployed, bs, seq, rng)
            strategies = {c: QuantStrategy.from_code(c, weight, act) for c in codes}
            samples = {c: [] for c in codes}
            for s in strategies.values():
                forward(deployed, tokens, s)  # warm-up
            for _ in range(repeats):
                for c, s in strategies.items():
                    t0 = time.perf_counter_ns()
                    forward(deployed, tokens, s)
                    samples[c].append(time.perf_counter_ns() - t0)
            timings = {c: float(np.median(v)) for c, v in samples.items()}
            chosen = min(codes, key=lambda c: (timings[c], c))
            deltas = {}
            base = timings.get("0000")
            for i, part in enumerate(PARTS):
                solo = "".join("1" if j == i else "0" for j in range(len(PARTS)))
                if base is not None and solo in timings:
                    deltas[part] = timings[solo] - base
            result.buckets.append(TuneBucket(bs, seq, chosen, timings, deltas))
    return result
