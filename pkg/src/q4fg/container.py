"""Binary model container.

Layout::

    b"Q4FG" | u16 version | u32 metadata length | metadata (canonical JSON)
    | zero padding to a 64-byte boundary | tensor payloads

Payload offsets in the metadata index are relative to the start of the
payload section; each payload starts on a 64-byte boundary.  All integers and
payloads are little-endian.  Quantized linears are stored as their integer
codes (4-bit codes packed two per byte) plus float32 scales and zero points;
their float weights are not stored.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContainerError
from .gemm import PackedInt4Matrix, pack_int4, unpack_int4
from .model import Model, ModelConfig, QuantStrategy, parameter_specs
from .quant import QTensor, QuantParams, QuantScheme, _dequant_array, _group_starts
from .sparsity import SparsityMask
from .tensor import Tensor

MAGIC = b"Q4FG"
FORMAT_VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sHI")
_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1"), "u8": np.dtype("u1")}


@dataclass
class ModelContainer:
    model: Model
    masks: dict[str, SparsityMask] = field(default_factory=dict)
    strategy: QuantStrategy | None = None
    extra: dict = field(default_factory=dict)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("ascii")


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _encode_tensors(c: ModelContainer) -> tuple[dict, dict, list[tuple[str, str, list[int], bytes]]]:
    model = c.model
    quant_meta = {}
    blobs = []
    for name, p in model.params.items():
        lin = name[:-len(".weight")] if name.endswith(".weight") else None
        if lin is not None and lin in model.qweights:
            continue
        blobs.append((name, "f32", list(p.shape), np.ascontiguousarray(p.data, dtype="<f4").tobytes()))
    for lin in sorted(model.qweights):
        q = model.qweights[lin]
        s = q.scheme
        if s.passthrough:
            raise ContainerError(f"{lin}: passthrough weights are stored as float parameters")
        if s.bits == 4:
            packed = pack_int4(np.asarray(q.ints).reshape(q.shape[0], -1), signed=s.symmetric)
            blobs.append((lin + ".qweight", "i4" if s.symmetric else "u4", list(q.shape), packed.tobytes()))
        else:
            dt = "i8" if s.symmetric else "u8"
            blobs.append((lin + ".qweight", dt, list(q.shape), np.asarray(q.ints, dtype=_DTYPES[dt]).tobytes()))
        blobs.append((lin + ".scales", "f32", [len(q.params)], q.params.scales.astype("<f4").tobytes()))
        blobs.append((lin + ".zeros", "f32", [len(q.params)], q.params.zero_points.astype("<f4").tobytes()))
        quant_meta[lin] = s.to_dict()
    mask_meta = {}
    for lin in sorted(c.masks):
        m = c.masks[lin]
        blobs.append((lin + ".mask", "bits", list(m.shape), m.packbits()))
        mask_meta[lin] = m.metadata()
    return quant_meta, mask_meta, sorted(blobs, key=lambda b: b[0])


def to_bytes(c: ModelContainer) -> bytes:
    quant_meta, mask_meta, blobs = _encode_tensors(c)
    index = {}
    offset = 0
    for name, dt, shape, raw in blobs:
        index[name] = {"dtype": dt, "shape": shape, "offset": offset, "nbytes": len(raw)}
        offset += len(raw) + _pad(len(raw))
    meta = {
        "config": c.model.cfg.to_dict(),
        "layer_map": c.model.layer_map,
        "quantized": quant_meta,
        "masks": mask_meta,
        "strategy": None if c.strategy is None else c.strategy.to_dict(),
        "extra": c.extra,
        "tensors": index,
    }
    js = canonical_json(meta)
    head = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(js)) + js
    parts = [head, b"\0" * _pad(len(head))]
    for _, _, _, raw in blobs:
        parts += [raw, b"\0" * _pad(len(raw))]
    return b"".join(parts)


def _decode_array(dt: str, shape: list[int], raw: bytes, name: str):
    count = int(np.prod(shape)) if shape else 1
    if dt in _DTYPES:
        arr = np.frombuffer(raw, dtype=_DTYPES[dt])
        if arr.size != count:
            raise ContainerError(f"{name}: payload holds {arr.size} values, shape {shape} needs {count}")
        return arr.reshape(shape).astype(_DTYPES[dt].newbyteorder("="))
    if dt in ("i4", "u4"):
        rows = shape[0]
        cols = count // rows if rows else 0
        try:
            packed = PackedInt4Matrix(rows, cols, np.frombuffer(raw, dtype=np.uint8).copy(), signed=dt == "i4")
        except ValueError as exc:
            raise ContainerError(f"{name}: {exc}") from None
        return unpack_int4(packed).reshape(shape)
    if dt == "bits":
        return raw
    raise ContainerError(f"{name}: unknown dtype {dt!r}")


def from_bytes(buf: bytes) -> ModelContainer:
    if len(buf) < _PREFIX.size:
        raise ContainerError("file too short for a container header")
    magic, version, jlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}; not a model container")
    if version != FORMAT_VERSION:
        raise ContainerError(f"container format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if start + jlen > len(buf):
        raise ContainerError("metadata extends past end of file")
    try:
        meta = json.loads(buf[start:start + jlen].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt metadata: {exc}") from None
    base = start + jlen + _pad(start + jlen)

    spans = sorted((e["offset"], e["offset"] + e["nbytes"], n) for n, e in meta["tensors"].items())
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ContainerError(f"payloads {an} and {bn} overlap")
    if spans and base + spans[-1][1] > len(buf):
        raise ContainerError(f"payload {spans[-1][2]} extends past end of file")

    arrays = {}
    for name, e in meta["tensors"].items():
        raw = buf[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[name] = _decode_array(e["dtype"], e["shape"], raw, name)

    cfg = ModelConfig.from_dict(meta["config"])
    model = Model(cfg, {})
    model.layer_map = {k: list(v) for k, v in meta["layer_map"].items()}
    for lin, sd in meta["quantized"].items():
        scheme = QuantScheme.from_dict(sd)
        try:
            ints = arrays.pop(lin + ".qweight")
            params = QuantParams(arrays.pop(lin + ".scales"), arrays.pop(lin + ".zeros"))
        except KeyError as exc:
            raise ContainerError(f"quantized part {lin} is missing payload {exc}") from None
        shape = tuple(ints.shape)
        lane = np.int8 if scheme.symmetric else np.uint8
        q = QTensor(ints.astype(lane), params, scheme, shape, _group_starts(shape, scheme))
        model.qweights[lin] = q
        model.params[lin + ".weight"] = Tensor(_dequant_array(q).astype(np.float32), dtype=np.float32,
                                               name=lin + ".weight")
    masks = {}
    for lin, mm in meta["masks"].items():
        masks[lin] = SparsityMask.from_packed(arrays.pop(lin + ".mask"), mm)
    for name, arr in arrays.items():
        model.params[name] = Tensor(arr, dtype=np.float32, name=name)
    missing = [n for n in _expected_params(cfg) if n not in model.params]
    if missing:
        raise ContainerError(f"container lacks parameters {missing[:3]}")
    # keep the canonical parameter order
    model.params = {n: model.params[n] for n in _expected_params(cfg)}
    strategy = None if meta["strategy"] is None else QuantStrategy.from_dict(meta["strategy"])
    return ModelContainer(model, masks, strategy, meta.get("extra", {}))


def _expected_params(cfg: ModelConfig) -> list[str]:
    return [n for n, _, _ in parameter_specs(cfg)]


def save(path, c: ModelContainer | Model) -> None:
    if isinstance(c, Model):
        c = ModelContainer(c)
    Path(path).write_bytes(to_bytes(c))


def load(path) -> ModelContainer:
    return from_bytes(Path(path).read_bytes())


def payload_nbytes(buf_or_container, suffix: str = ".qweight") -> dict[str, int]:
    """Payload byte counts of tensors whose name ends with ``suffix``."""
    buf = buf_or_container if isinstance(buf_or_container, bytes) else to_bytes(buf_or_container)
    _, _, jlen = _PREFIX.unpack_from(buf)
    meta = json.loads(buf[_PREFIX.size:_PREFIX.size + jlen])
    return {n: e["nbytes"] for n, e in meta["tensors"].items() if n.endswith(suffix)}
