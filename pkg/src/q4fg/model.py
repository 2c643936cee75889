"""Miniature transformer family with per-part quantization.

Three architectures share one parameter layout: ``encoder_only``,
``encoder_decoder`` and ``decoder_only``.  Weights are stored
``[out_features, in_features]``.  Only the four linear parts listed in
:data:`PARTS` are ever quantized; embeddings, layer norms, the attention
score/softmax path and the output head stay in float.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from itertools import product
from typing import Callable

import numpy as np

from .exceptions import ConfigError, DimensionError
from .qlinear import masked_linear, quant_linear
from .quant import PASSTHROUGH, QTensor, QuantScheme, activation_scheme, weight_scheme
from .sparsity import CompositionOrder, SparsityMask
from .tensor import (
    Tensor,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    mean,
    no_grad,
    reshape,
    softmax_attention,
    split,
    transpose,
)

ARCHS = ("encoder_only", "encoder_decoder", "decoder_only")
PARTS = ("qkv_proj", "attn_out", "mlp_intermediate", "mlp_out")
PART_ALIASES = {
    "qkv": "qkv_proj",
    "qkv_proj": "qkv_proj",
    "attn_out": "attn_out",
    "mlp_int": "mlp_intermediate",
    "mlp_intermediate": "mlp_intermediate",
    "mlp_out": "mlp_out",
}


def canonical_part(name: str) -> str:
    try:
        return PART_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown model part {name!r}; expected one of {sorted(PART_ALIASES)}") from None


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "encoder_only"
    num_encoder_layers: int = 2
    num_decoder_layers: int = 0
    hidden: int = 32
    heads: int = 2
    ffn_mult: int = 4
    ln_placement: str = "post"
    vocab_size: int = 64
    max_seq: int = 64
    num_labels: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.ln_placement not in ("pre", "post"):
            raise ConfigError(f"ln_placement must be 'pre' or 'post', got {self.ln_placement!r}")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} must be a positive multiple of heads={self.heads}")
        if self.num_encoder_layers < 0 or self.num_decoder_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.arch == "encoder_only" and (self.num_decoder_layers != 0 or self.num_encoder_layers < 1):
            raise ConfigError("encoder_only needs >= 1 encoder layer and 0 decoder layers")
        if self.arch == "decoder_only" and (self.num_encoder_layers != 0 or self.num_decoder_layers < 1):
            raise ConfigError("decoder_only needs >= 1 decoder layer and 0 encoder layers")
        if self.arch == "encoder_decoder" and (self.num_encoder_layers < 1 or self.num_decoder_layers < 1):
            raise ConfigError("encoder_decoder needs >= 1 layer on each side")
        if self.vocab_size < 2 or self.max_seq < 1 or self.ffn_mult < 1:
            raise ConfigError("vocab_size >= 2, max_seq >= 1 and ffn_mult >= 1 are required")
        if self.num_labels is not None and (self.num_labels < 2 or self.arch != "encoder_only"):
            raise ConfigError("a classification head needs num_labels >= 2 on an encoder_only model")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class QuantStrategy:
    """Which of the four linear parts run quantized, and with what schemes."""

    qkv_proj: bool = True
    attn_out: bool = True
    mlp_intermediate: bool = True
    mlp_out: bool = True
    weight_scheme: QuantScheme = field(default_factory=lambda: weight_scheme(4))
    activation_scheme: QuantScheme = field(default_factory=lambda: activation_scheme(4))

    def enabled(self, part: str) -> bool:
        return bool(getattr(self, part))

    @property
    def code(self) -> str:
        return "".join("1" if self.enabled(p) else "0" for p in PARTS)

    @property
    def any_enabled(self) -> bool:
        return any(self.enabled(p) for p in PARTS)

    def with_parts(self, **flags) -> QuantStrategy:
        return QuantStrategy(**{**self._flags(), **flags},
                             weight_scheme=self.weight_scheme, activation_scheme=self.activation_scheme)

    def _flags(self) -> dict:
        return {p: self.enabled(p) for p in PARTS}

    @classmethod
    def from_code(cls, code: str, weight: QuantScheme | None = None, act: QuantScheme | None = None) -> QuantStrategy:
        if len(code) != 4 or set(code) - {"0", "1"}:
            raise ConfigError(f"strategy code must be 4 binary digits, got {code!r}")
        return cls(**{p: c == "1" for p, c in zip(PARTS, code)},
                   weight_scheme=weight or weight_scheme(4), activation_scheme=act or activation_scheme(4))

    @classmethod
    def disabled(cls) -> QuantStrategy:
        return cls.from_code("0000")

    @classmethod
    def q3_only(cls, weight: QuantScheme | None = None, act: QuantScheme | None = None) -> QuantStrategy:
        return cls.from_code("0010", weight, act)

    @classmethod
    def grid(cls, weight: QuantScheme | None = None, act: QuantScheme | None = None) -> list[QuantStrategy]:
        return [cls.from_code("".join(bits), weight, act) for bits in product("01", repeat=4)]

    def to_dict(self) -> dict:
        return {**self._flags(), "weight_scheme": self.weight_scheme.to_dict(),
                "activation_scheme": self.activation_scheme.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> QuantStrategy:
        return cls(**{p: bool(d.get(p, False)) for p in PARTS},
                   weight_scheme=QuantScheme.from_dict(d["weight_scheme"]) if "weight_scheme" in d else weight_scheme(4),
                   activation_scheme=(QuantScheme.from_dict(d["activation_scheme"])
                                      if "activation_scheme" in d else activation_scheme(4)))


def passthrough_strategy() -> QuantStrategy:
    """All parts enabled with 32-bit passthrough schemes."""
    return QuantStrategy(weight_scheme=PASSTHROUGH, activation_scheme=PASSTHROUGH)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _layer_linears(stack: str, cfg: ModelConfig) -> list[tuple[str, str, int, int]]:
    """``(suffix, part, out_features, in_features)`` of one layer."""
    h, f = cfg.hidden, cfg.ffn_mult * cfg.hidden
    if stack == "encoder":
        attn = [("attn.qkv", "qkv_proj", 3 * h, h), ("attn.out", "attn_out", h, h)]
    else:
        attn = [("self_attn.qkv", "qkv_proj", 3 * h, h), ("self_attn.out", "attn_out", h, h)]
        if cfg.arch == "encoder_decoder":
            attn += [("cross_attn.q", "qkv_proj", h, h), ("cross_attn.kv", "qkv_proj", 2 * h, h),
                     ("cross_attn.out", "attn_out", h, h)]
    return attn + [("mlp.fc1", "mlp_intermediate", f, h), ("mlp.fc2", "mlp_out", h, f)]


def _layer_norms(stack: str, cfg: ModelConfig) -> list[str]:
    if stack == "decoder" and cfg.arch == "encoder_decoder":
        return ["ln1", "ln2", "ln3"]
    return ["ln1", "ln2"]


def _stacks(cfg: ModelConfig) -> list[tuple[str, int]]:
    out = []
    if cfg.num_encoder_layers:
        out.append(("encoder", cfg.num_encoder_layers))
    if cfg.num_decoder_layers:
        out.append(("decoder", cfg.num_decoder_layers))
    return out


def parameter_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered ``(name, shape, init)`` for every parameter of ``cfg``."""
    h = cfg.hidden
    specs = [("embed.token", (cfg.vocab_size, h), "embed"), ("embed.pos", (cfg.max_seq, h), "embed")]
    for stack, n in _stacks(cfg):
        for i in range(n):
            for suffix, _, out_f, in_f in _layer_linears(stack, cfg):
                specs.append((f"{stack}.{i}.{suffix}.weight", (out_f, in_f), "weight"))
                specs.append((f"{stack}.{i}.{suffix}.bias", (out_f,), "zeros"))
            for ln in _layer_norms(stack, cfg):
                specs.append((f"{stack}.{i}.{ln}.gamma", (h,), "ones"))
                specs.append((f"{stack}.{i}.{ln}.beta", (h,), "zeros"))
        if cfg.ln_placement == "pre":
            specs.append((f"{stack}.final_ln.gamma", (h,), "ones"))
            specs.append((f"{stack}.final_ln.beta", (h,), "zeros"))
    n_out = cfg.num_labels if cfg.num_labels else cfg.vocab_size
    specs.append(("head.weight", (n_out, h), "weight"))
    specs.append(("head.bias", (n_out,), "zeros"))
    return specs


def linear_parts(cfg: ModelConfig) -> dict[str, str]:
    """Map every quantizable linear (name prefix) to its part."""
    out = {}
    for stack, n in _stacks(cfg):
        for i in range(n):
            for suffix, part, _, _ in _layer_linears(stack, cfg):
                out[f"{stack}.{i}.{suffix}"] = part
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    logits: Tensor
    attention_scores: list[Tensor]
    attention_probs: list[Tensor]
    attention_keys: list[tuple[str, int, str]]
    attention_allowed: list[np.ndarray]
    hidden_states: list[Tensor]
    hidden_keys: list[tuple[str, int]]
    probes: dict[str, np.ndarray]


class Model:
    """Parameter container plus forward pass."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.qweights: dict[str, QTensor] = {}
        self.linears = linear_parts(cfg)
        self.layer_map = {
            "encoder": list(range(cfg.num_encoder_layers)),
            "decoder": list(range(cfg.num_decoder_layers)),
        }

    @property
    def dtype(self):
        return self.params["embed.token"].dtype

    def num_parameters(self, prefix: str | None = None) -> int:
        return sum(p.size for k, p in self.params.items() if prefix is None or k.startswith(prefix))

    def copy(self) -> Model:
        params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.dtype) for k, p in self.params.items()}
        out = Model(self.cfg, params)
        out.qweights = copy.deepcopy(self.qweights)
        out.layer_map = copy.deepcopy(self.layer_map)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.asarray(v, dtype=self.params[k].dtype).copy()

    def trainable(self, flag: bool = True) -> Model:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def __call__(self, tokens, strategy=None, **kwargs) -> ForwardOutput:
        return forward(self, tokens, strategy, **kwargs)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministic initialization: weights ``N(0, 1/fan_in)``, embeddings ``N(0, 0.5^2)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, init in parameter_specs(cfg):
        if init == "weight":
            data = rng.standard_normal(shape) / math.sqrt(shape[1])
        elif init == "embed":
            data = 0.5 * rng.standard_normal(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), dtype=dtype, name=name)
    return Model(cfg, params)


class _Ctx:
    __slots__ = ("model", "strategy", "masks", "order", "train", "rate", "rng", "probe", "probes")

    def __init__(self, model, strategy, masks, order, train, rate, rng, probe):
        self.model = model
        self.strategy = strategy
        self.masks = masks or {}
        self.order = CompositionOrder(order)
        self.train = train
        self.rate = rate
        self.rng = rng
        self.probe = probe
        self.probes: dict[str, np.ndarray] = {}

    def p(self, name: str) -> Tensor:
        return self.model.params[name]

    def linear(self, name: str, x: Tensor) -> Tensor:
        if self.probe:
            self.probes[name] = x.data.copy()
        w, b = self.p(name + ".weight"), self.p(name + ".bias")
        mask = self.masks.get(name)
        if isinstance(mask, SparsityMask):
            mask = mask.mask
        part = self.model.linears[name]
        s = self.strategy
        if s is None or not s.enabled(part):
            return masked_linear(x, w, b, mask)
        qweight = None if self.train else self.model.qweights.get(name)
        return quant_linear(x, w, b, s.weight_scheme, s.activation_scheme, mask, self.order, qweight)

    def drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.rng, training=self.train)


def _heads(x: Tensor, heads: int) -> Tensor:
    b, t, h = x.shape
    return transpose(reshape(x, (b, t, heads, h // heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, nh, t, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, nh * d))


def _ln(ctx: _Ctx, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, ctx.p(prefix + ".gamma"), ctx.p(prefix + ".beta"))


def _attention(ctx: _Ctx, prefix: str, x: Tensor, memory: Tensor | None, mode: str, record: Callable):
    heads = ctx.model.cfg.heads
    if memory is None:
        q, k, v = split(ctx.linear(prefix + ".qkv", x), 3, axis=-1)
    else:
        q = ctx.linear(prefix + ".q", x)
        k, v = split(ctx.linear(prefix + ".kv", memory), 2, axis=-1)
    out, scores, probs, allowed = softmax_attention(_heads(q, heads), _heads(k, heads), _heads(v, heads), mode)
    record(scores, probs, allowed)
    return ctx.linear(prefix + ".out", _merge(out))


def _mlp(ctx: _Ctx, prefix: str, x: Tensor) -> Tensor:
    return ctx.linear(prefix + ".fc2", gelu(ctx.linear(prefix + ".fc1", x)))


def _sublayer(ctx: _Ctx, ln_name: str, x: Tensor, fn: Callable[[Tensor], Tensor]) -> Tensor:
    if ctx.model.cfg.ln_placement == "pre":
        return x + ctx.drop(fn(_ln(ctx, ln_name, x)))
    return _ln(ctx, ln_name, x + ctx.drop(fn(x)))


def _embed(ctx: _Ctx, ids: np.ndarray) -> Tensor:
    t = ids.shape[1]
    pos = np.arange(t)
    return ctx.drop(embedding(ctx.p("embed.token"), ids) + embedding(ctx.p("embed.pos"), pos))


def _check_tokens(cfg: ModelConfig, ids) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError(f"tokens must be a [batch, seq] integer array, got {ids.shape} {ids.dtype}")
    if ids.shape[1] > cfg.max_seq:
        raise DimensionError(f"sequence length {ids.shape[1]} exceeds max_seq={cfg.max_seq}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DimensionError(f"token ids must lie in [0, {cfg.vocab_size})")
    return ids


def forward(
    model: Model,
    tokens,
    strategy: QuantStrategy | None = None,
    masks: dict | None = None,
    mode: str = "eval",
    order: CompositionOrder | str = CompositionOrder.PRUNE_THEN_QUANT,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    probe: bool = False,
) -> ForwardOutput:
    """Run the model.  ``tokens`` is ``[B, T]`` ids, or ``(src, tgt)`` for encoder-decoder.

    ``mode="eval"`` records no graph and uses stored integer weights when
    present; ``mode="train"`` records the graph for backpropagation.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        with no_grad():
            return _forward(model, tokens, strategy, masks, order, False, 0.0, rng, probe)
    return _forward(model, tokens, strategy, masks, order, True, dropout_rate, rng, probe)


def _forward(model, tokens, strategy, masks, order, train, rate, rng, probe) -> ForwardOutput:
    cfg = model.cfg
    ctx = _Ctx(model, strategy, masks, order, train, rate, rng, probe)
    att_scores, att_probs, att_keys, att_allowed = [], [], [], []
    hidden, hidden_keys = [], []

    def recorder(stack, i, kind):
        def rec(scores, probs, allowed):
            att_scores.append(scores)
            att_probs.append(probs)
            att_keys.append((stack, i, kind))
            att_allowed.append(allowed)
        return rec

    if cfg.arch == "encoder_decoder":
        if not isinstance(tokens, (tuple, list)) or len(tokens) != 2:
            raise DimensionError("encoder_decoder forward expects (src_tokens, tgt_tokens)")
        src, tgt = _check_tokens(cfg, tokens[0]), _check_tokens(cfg, tokens[1])
        if src.shape[0] != tgt.shape[0]:
            raise DimensionError("source and target batch sizes differ")
    elif cfg.arch == "encoder_only":
        src, tgt = _check_tokens(cfg, tokens), None
    else:
        src, tgt = None, _check_tokens(cfg, tokens)

    memory = None
    if src is not None:
        x = _embed(ctx, src)
        for i in range(cfg.num_encoder_layers):
            pre = f"encoder.{i}"
            x = _sublayer(ctx, pre + ".ln1", x,
                          lambda z: _attention(ctx, pre + ".attn", z, None, "full", recorder("encoder", i, "self")))
            x = _sublayer(ctx, pre + ".ln2", x, lambda z: _mlp(ctx, pre + ".mlp", z))
            hidden.append(x)
            hidden_keys.append(("encoder", i))
        if cfg.ln_placement == "pre":
            x = _ln(ctx, "encoder.final_ln", x)
        memory = x

    if tgt is not None:
        x = _embed(ctx, tgt)
        cross = cfg.arch == "encoder_decoder"
        for i in range(cfg.num_decoder_layers):
            pre = f"decoder.{i}"
            x = _sublayer(ctx, pre + ".ln1", x,
                          lambda z: _attention(ctx, pre + ".self_attn", z, None, "causal",
                                               recorder("decoder", i, "self")))
            if cross:
                x = _sublayer(ctx, pre + ".ln2", x,
                              lambda z: _attention(ctx, pre + ".cross_attn", z, memory, "cross",
                                                   recorder("decoder", i, "cross")))
            x = _sublayer(ctx, pre + (".ln3" if cross else ".ln2"), x, lambda z: _mlp(ctx, pre + ".mlp", z))
            hidden.append(x)
            hidden_keys.append(("decoder", i))
        if cfg.ln_placement == "pre":
            x = _ln(ctx, "decoder.final_ln", x)

    if cfg.num_labels:
        x = mean(x, axis=1)
    logits = linear(x, ctx.p("head.weight"), ctx.p("head.bias"))
    return ForwardOutput(logits, att_scores, att_probs, att_keys, att_allowed, hidden, hidden_keys, ctx.probes)


# ---------------------------------------------------------------------------
# layer reduction
# ---------------------------------------------------------------------------

def _first(teacher_n: int, target_n: int) -> list[int]:
    return list(range(target_n))


def _even(teacher_n: int, target_n: int) -> list[int]:
    return [i * teacher_n // target_n for i in range(target_n)]


COPY_POLICIES: dict[str, Callable[[int, int], list[int]]] = {"first": _first, "even": _even}


def layer_reduce(teacher_cfg: ModelConfig, target_x: int, target_y: int,
                 encoder_policy: str = "first", decoder_policy: str = "even") -> tuple[ModelConfig, dict]:
    """Student config and ``{"encoder": [...], "decoder": [...]}`` teacher-index mapping."""
    if target_x > teacher_cfg.num_encoder_layers or target_y > teacher_cfg.num_decoder_layers:
        raise ConfigError(
            f"targets {target_x}/{target_y} exceed teacher depth "
            f"{teacher_cfg.num_encoder_layers}/{teacher_cfg.num_decoder_layers}"
        )
    if target_x < 0 or target_y < 0:
        raise ConfigError("target layer counts must be non-negative")
    d = teacher_cfg.to_dict()
    d.update(num_encoder_layers=target_x, num_decoder_layers=target_y)
    student = ModelConfig.from_dict(d)
    mapping = {
        "encoder": COPY_POLICIES[encoder_policy](teacher_cfg.num_encoder_layers, target_x),
        "decoder": COPY_POLICIES[decoder_policy](teacher_cfg.num_decoder_layers, target_y),
    }
    return student, mapping


def reduce_model(teacher: Model, target_x: int, target_y: int, **policies) -> Model:
    """Build a layer-reduced student initialized from the teacher's layers."""
    cfg, mapping = layer_reduce(teacher.cfg, target_x, target_y, **policies)
    params = {}
    for name, _, _ in parameter_specs(cfg):
        parts = name.split(".")
        src = name
        if parts[0] in ("encoder", "decoder") and parts[1].isdigit():
            parts[1] = str(mapping[parts[0]][int(parts[1])])
            src = ".".join(parts)
        p = teacher.params[src]
        params[name] = Tensor(p.data.copy(), dtype=p.dtype, name=name)
    student = Model(cfg, params)
    for stack in ("encoder", "decoder"):
        student.layer_map[stack] = [teacher.layer_map[stack][j] for j in mapping[stack]]
    return student


# ---------------------------------------------------------------------------
# language-model evaluation
# ---------------------------------------------------------------------------

def _windows(stream, window: int) -> np.ndarray:
    stream = np.asarray(stream).reshape(-1)
    if stream.size < 2:
        raise ValueError("token stream needs at least 2 tokens")
    span = window + 1
    n = stream.size // span
    if n == 0:
        raise ValueError(f"token stream of {stream.size} tokens is shorter than one window of {span}")
    return stream[: n * span].reshape(n, span)


def nll_matrix(model: Model, stream, strategy: QuantStrategy | None = None, window: int | None = None,
               batch_size: int = 64) -> np.ndarray:
    """Next-token NLL, ``[windows, window]``, over non-overlapping ``window+1`` token slices."""
    if model.cfg.arch == "encoder_decoder" or model.cfg.num_labels:
        raise ConfigError("next-token NLL needs a language-model head on a single-stack model")
    window = window or min(model.cfg.max_seq, np.asarray(stream).size - 1)
    wins = _windows(stream, window)
    out = []
    for s in range(0, len(wins), batch_size):
        chunk = wins[s:s + batch_size]
        logits = forward(model, chunk[:, :-1], strategy).logits.data.astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out.append(-np.take_along_axis(logp, chunk[:, 1:, None], axis=-1)[..., 0])
    return np.concatenate(out, axis=0)


def perplexity(model: Model, stream, strategy: QuantStrategy | None = None, window: int | None = None) -> float:
    """``exp`` of the mean next-token NLL over the stream."""
    return float(np.exp(nll_matrix(model, stream, strategy, window).mean()))


__all__ = [
    "ARCHS", "PARTS", "ModelConfig", "QuantStrategy", "Model", "ForwardOutput", "build_model", "forward",
    "layer_reduce", "reduce_model", "perplexity", "nll_matrix", "parameter_specs", "linear_parts",
    "passthrough_strategy", "canonical_part", "COPY_POLICIES",
]
