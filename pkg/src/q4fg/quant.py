"""Uniform integer quantizers.

Symmetric mapping uses a signed range ``[-2^(b-1), 2^(b-1)-1]`` with
``scale = max|x| / (2^(b-1)-1)`` and zero point 0.  Asymmetric mapping uses
an unsigned range ``[0, 2^b-1]`` with ``zero = min(x)`` and
``scale = (max(x)-min(x)) / (2^b-1)``.  Rounding is half-to-even.

Granularities:

* ``per_tensor`` -- one (scale, zero) for the whole tensor;
* ``per_group``  -- the row-major vectorized tensor is cut into ``groups``
  contiguous runs (``numpy.array_split`` boundaries, so trailing groups may be
  one element shorter); ``groups=None`` means one group per row;
* ``per_token``  -- one (scale, zero) per row of the ``[-1, features]`` view,
  computed dynamically from that row.

``bits=32`` is a passthrough: quantize stores the floats untouched.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .exceptions import SchemeMisuseError
from .tensor import Tensor, _result

GRANULARITIES = ("per_tensor", "per_group", "per_token")
SUPPORTED_BITS = (4, 8, 32)


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 4
    symmetric: bool = True
    granularity: str = "per_group"
    groups: int | None = None
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise SchemeMisuseError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise SchemeMisuseError(f"unknown granularity {self.granularity!r}")
        if self.groups is not None and self.groups < 1:
            raise SchemeMisuseError(f"group count must be >= 1, got {self.groups}")
        if self.clip is not None:
            lo, hi = self.clip
            if not lo < hi:
                raise SchemeMisuseError(f"clip range must satisfy lo < hi, got {self.clip}")
            object.__setattr__(self, "clip", (float(lo), float(hi)))

    @property
    def passthrough(self) -> bool:
        return self.bits == 32

    @property
    def mapping(self) -> str:
        return "symmetric" if self.symmetric else "asymmetric"

    @property
    def int_range(self) -> tuple[int, int]:
        return int_range(self.bits, self.symmetric)

    def label(self) -> str:
        if self.passthrough:
            return "fp32"
        gran = {"per_tensor": "tensor", "per_token": "token"}.get(self.granularity)
        if gran is None:
            gran = "row" if self.groups is None else f"g{self.groups}"
        text = f"int{self.bits}-{'sym' if self.symmetric else 'asym'}-{gran}"
        if self.clip is not None:
            text += f"-clip{self.clip[0]:g}:{self.clip[1]:g}"
        return text

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "mapping": self.mapping,
            "granularity": self.granularity,
            "groups": self.groups,
            "clip": list(self.clip) if self.clip is not None else None,
            "rounding": "half_to_even",
        }

    @classmethod
    def from_dict(cls, d: dict) -> QuantScheme:
        clip = d.get("clip")
        return cls(
            bits=int(d["bits"]),
            symmetric=d.get("mapping", "symmetric") == "symmetric",
            granularity=d.get("granularity", "per_group"),
            groups=d.get("groups"),
            clip=tuple(clip) if clip is not None else None,
        )


PASSTHROUGH = QuantScheme(bits=32, granularity="per_tensor")


def weight_scheme(bits: int = 4, symmetric: bool = True, groups: int | None = None) -> QuantScheme:
    return QuantScheme(bits=bits, symmetric=symmetric, granularity="per_group", groups=groups)


def activation_scheme(bits: int = 4, symmetric: bool = True, clip=None) -> QuantScheme:
    return QuantScheme(bits=bits, symmetric=symmetric, granularity="per_token", clip=clip)


def int_range(bits: int, symmetric: bool) -> tuple[int, int]:
    if symmetric:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass
class QuantParams:
    scales: np.ndarray
    zero_points: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float32).reshape(-1)
        self.zero_points = np.asarray(self.zero_points, dtype=np.float32).reshape(-1)

    def __len__(self) -> int:
        return len(self.scales)


@dataclass
class QTensor:
    """Integer payload plus the parameters needed to map it back to floats.

    Integers are stored widened to 8-bit lanes: ``int8`` under symmetric
    mapping, ``uint8`` under asymmetric mapping.  For the passthrough scheme
    ``ints`` holds the original floats.
    """

    ints: np.ndarray
    params: QuantParams
    scheme: QuantScheme
    shape: tuple[int, ...]
    starts: np.ndarray = field(repr=False)
    dtype: np.dtype = field(default=np.dtype(np.float32), repr=False)

    @property
    def num_groups(self) -> int:
        return len(self.starts)

    def group_sizes(self) -> np.ndarray:
        return np.diff(np.append(self.starts, self.ints.size))

    def element_scales(self) -> np.ndarray:
        """Per-element scale, shaped like the tensor."""
        return np.repeat(self.params.scales, self.group_sizes()).reshape(self.shape)

    def element_zeros(self) -> np.ndarray:
        return np.repeat(self.params.zero_points, self.group_sizes()).reshape(self.shape)

    def row_segments(self):
        """Factor group parameters of a 2-D ``[rows, cols]`` tensor over rows.

        Returns ``(segments, scales, zeros)`` with ``segments`` a list of
        ``(c0, c1)`` column ranges and ``scales``/``zeros`` arrays of shape
        ``[len(segments), rows]``.  Works when every group either spans whole
        rows or lies inside one row with the same column cuts in every row.
        """
        if len(self.shape) != 2:
            raise SchemeMisuseError(f"row factorization needs a 2-d tensor, got shape {self.shape}")
        rows, cols = self.shape
        starts = self.starts
        ends = np.append(starts[1:], rows * cols)
        if np.all(starts % cols == 0):
            gid = np.searchsorted(starts, np.arange(rows) * cols, side="right") - 1
            return [(0, cols)], self.params.scales[gid][None, :], self.params.zero_points[gid][None, :]
        if np.any(starts // cols != (ends - 1) // cols) or len(starts) % rows:
            raise SchemeMisuseError("weight groups straddle row boundaries; cannot factor per row")
        per_row = len(starts) // rows
        cuts = (starts % cols).reshape(rows, per_row)
        if not np.all(cuts == cuts[0]):
            raise SchemeMisuseError("weight groups cut rows at different columns")
        bounds = list(cuts[0]) + [cols]
        segments = [(int(bounds[i]), int(bounds[i + 1])) for i in range(per_row)]
        sc = self.params.scales.reshape(rows, per_row).T
        zp = self.params.zero_points.reshape(rows, per_row).T
        return segments, sc, zp


# ---------------------------------------------------------------------------
# parameter computation
# ---------------------------------------------------------------------------

def compute_params_symmetric(x, bits: int) -> tuple[float, float]:
    """Scale and zero point for one group under symmetric mapping."""
    x = np.asarray(x, dtype=np.float64)
    s, z = _sym_params(np.array([np.max(x)]), np.array([np.min(x)]), bits)
    return float(s[0]), float(z[0])


def compute_params_asymmetric(x, bits: int) -> tuple[float, float]:
    """Scale and zero point for one group under asymmetric mapping."""
    x = np.asarray(x, dtype=np.float64)
    s, z = _asym_params(np.array([np.max(x)]), np.array([np.min(x)]), bits)
    return float(s[0]), float(z[0])


def _sym_params(gmax: np.ndarray, gmin: np.ndarray, bits: int):
    qmax = 2 ** (bits - 1) - 1
    amax = np.maximum(np.abs(gmax), np.abs(gmin))
    scale = np.where(amax > 0, amax / qmax, 1.0)
    return _finalize_scale(scale), np.zeros_like(scale, dtype=np.float32)


def _asym_params(gmax: np.ndarray, gmin: np.ndarray, bits: int):
    span = gmax - gmin
    scale = np.where(span > 0, span / (2**bits - 1), 1.0)
    return _finalize_scale(scale), gmin.astype(np.float32)


def _finalize_scale(scale: np.ndarray) -> np.ndarray:
    s = scale.astype(np.float32)
    # float32 underflow on subnormal spans would divide by zero
    return np.maximum(s, np.float32(np.finfo(np.float32).smallest_subnormal))


def _group_starts(shape: tuple[int, ...], scheme: QuantScheme) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    if scheme.granularity == "per_tensor" or n == 0:
        return np.zeros(1, dtype=np.int64)
    if scheme.granularity == "per_token":
        width = shape[-1] if shape else 1
        return np.arange(0, n, width, dtype=np.int64)
    g = scheme.groups
    if g is None:
        g = shape[0] if len(shape) >= 2 else 1
    if g > n:
        raise SchemeMisuseError(f"{g} groups requested for a tensor of {n} elements")
    base, extra = divmod(n, g)
    sizes = np.full(g, base, dtype=np.int64)
    sizes[:extra] += 1
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)


def _clipped(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    if scheme.clip is None:
        return x
    return np.clip(x, scheme.clip[0], scheme.clip[1])


def _check_kind(x_shape, scheme: QuantScheme, kind: str | None) -> None:
    if kind not in (None, "weight", "activation"):
        raise ValueError(f"kind must be 'weight' or 'activation', got {kind!r}")
    if kind == "weight" and scheme.granularity == "per_token":
        raise SchemeMisuseError("per_token granularity is for activations, not weights")
    if scheme.granularity == "per_token" and len(x_shape) == 0:
        raise SchemeMisuseError("per_token granularity needs a token axis")


def quantize(x, scheme: QuantScheme, kind: str | None = None) -> QTensor:
    """Quantize ``x`` (Tensor or array) under ``scheme``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float32)
    _check_kind(arr.shape, scheme, kind)
    shape = tuple(arr.shape)
    starts = _group_starts(shape, scheme)
    if scheme.passthrough:
        n = len(starts)
        return QTensor(arr.copy(), QuantParams(np.ones(n), np.zeros(n)), scheme, shape, starts, dtype)
    flat = _clipped(arr.astype(np.float64).reshape(-1), scheme)
    if flat.size == 0:
        raise SchemeMisuseError("cannot quantize an empty tensor")
    gmax = np.maximum.reduceat(flat, starts)
    gmin = np.minimum.reduceat(flat, starts)
    if scheme.symmetric:
        scales, zeros = _sym_params(gmax, gmin, scheme.bits)
    else:
        scales, zeros = _asym_params(gmax, gmin, scheme.bits)
    params = QuantParams(scales, zeros)
    sizes = np.diff(np.append(starts, flat.size))
    # codes come from the exact float64 ratio; only the stored scale is float32
    levels = 2 ** (scheme.bits - 1) - 1 if scheme.symmetric else 2**scheme.bits - 1
    if scheme.symmetric:
        extent, z = np.maximum(np.abs(gmax), np.abs(gmin)), np.zeros_like(gmin)
    else:
        extent, z = gmax - gmin, gmin
    extent = np.where(extent > 0, extent, float(levels))
    lo, hi = scheme.int_range
    ratio = (flat - np.repeat(z, sizes)) * levels / np.repeat(extent, sizes)
    q = np.rint(np.clip(ratio, lo, hi))
    ints = q.astype(np.int8 if scheme.symmetric else np.uint8).reshape(shape)
    return QTensor(ints, params, scheme, shape, starts, dtype)


def dequantize(q: QTensor, dtype=None) -> Tensor:
    """Map a :class:`QTensor` back to floats: ``scale * ints + zero``."""
    dtype = q.dtype if dtype is None else np.dtype(dtype)
    if q.scheme.passthrough:
        return Tensor(q.ints.astype(dtype, copy=True), dtype=dtype)
    return Tensor(_dequant_array(q).astype(dtype), dtype=dtype)


def _dequant_array(q: QTensor) -> np.ndarray:
    sizes = q.group_sizes()
    s = np.repeat(q.params.scales.astype(np.float64), sizes)
    z = np.repeat(q.params.zero_points.astype(np.float64), sizes)
    return (q.ints.reshape(-1).astype(np.float64) * s + z).reshape(q.shape)


def tokenwise_activation_params(x, scheme: QuantScheme) -> QuantParams:
    """One (scale, zero) per token row of the ``[-1, features]`` view."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim < 1:
        raise SchemeMisuseError("token-wise parameters need at least one axis")
    tok = QuantScheme(bits=scheme.bits, symmetric=scheme.symmetric, granularity="per_token", clip=scheme.clip)
    return quantize(arr.reshape(-1, arr.shape[-1]), tok, kind="activation").params


def inside_clip(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Where the clipped straight-through gradient passes (``clip(x) == x``)."""
    if scheme.clip is None or scheme.passthrough:
        return np.ones(x.shape, dtype=bool)
    return (x >= scheme.clip[0]) & (x <= scheme.clip[1])


# ---------------------------------------------------------------------------
# straight-through fake quantization
# ---------------------------------------------------------------------------

class STESurrogate:
    """Freeze quantization residuals so STE gradients become exact derivatives.

    In ``record`` mode every fake-quant site stores ``xhat - x`` at the current
    point.  In ``replay`` mode the same sites (visited in the same order)
    return ``x + stored_residual`` on unclipped entries and the stored value
    on clipped ones.  The replayed function is smooth and its derivative is
    exactly what the straight-through estimator reports, which makes it a
    finite-difference target.
    """

    def __init__(self):
        self.mode = "record"
        self.records: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self.cursor = 0

    def replay(self) -> None:
        self.mode = "replay"
        self.cursor = 0

    def visit(self, x: np.ndarray, xhat: np.ndarray, inside: np.ndarray) -> np.ndarray:
        if self.mode == "record":
            self.records.append((xhat - x, xhat.copy(), inside.copy()))
            return xhat
        resid, xhat0, inside0 = self.records[self.cursor]
        self.cursor += 1
        return np.where(inside0, x + resid, xhat0).astype(x.dtype, copy=False)


_surrogate: STESurrogate | None = None


@contextlib.contextmanager
def ste_surrogate() -> Iterator[STESurrogate]:
    global _surrogate
    prev = _surrogate
    _surrogate = STESurrogate()
    try:
        yield _surrogate
    finally:
        _surrogate = prev


def active_surrogate() -> STESurrogate | None:
    return _surrogate


def fake_quantize_array(x: np.ndarray, scheme: QuantScheme, kind: str | None = None):
    """Quantize-dequantize a raw array; returns ``(xhat, inside_mask)``."""
    if scheme.passthrough:
        return x, np.ones(x.shape, dtype=bool)
    xhat = _dequant_array(quantize(x, scheme, kind=kind)).astype(x.dtype)
    inside = inside_clip(x, scheme)
    if _surrogate is not None:
        xhat = _surrogate.visit(x, xhat, inside)
    return xhat, inside


def fake_quantize_ste(x: Tensor, scheme: QuantScheme, kind: str | None = None) -> Tensor:
    """``dequantize(quantize(x))`` forward, clipped straight-through backward."""
    if scheme.passthrough:
        return x
    xhat, inside = fake_quantize_array(x.data, scheme, kind)
    return _result(xhat, (x,), lambda g: (np.where(inside, g, 0.0).astype(g.dtype, copy=False),))
