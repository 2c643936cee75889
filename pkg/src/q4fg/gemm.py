"""Nibble packing, exact integer GEMM, fused dequantization epilogue, benchmarks.

Packed layout: row-major, two 4-bit values per byte, the even column in the
low nibble and the odd column in the high nibble.  Rows with an odd column
count end with a zero high nibble.  Signed payloads use two's-complement
nibbles; unsigned payloads (asymmetric codes) store 0..15 directly.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, RangeError, SchemeMisuseError
from .quant import QTensor

GEMM_CASES = ("qkv_proj", "attn_out", "mlp_intermediate", "mlp_out")
BENCH_HEADER = ("case", "bits", "M", "N", "K", "median_ns", "bytes_moved", "gops")


@dataclass(frozen=True)
class PackedInt4Matrix:
    rows: int
    cols: int
    data: np.ndarray
    signed: bool = True

    def __post_init__(self):
        expected = self.rows * ((self.cols + 1) // 2)
        if self.data.dtype != np.uint8 or self.data.size != expected:
            raise DimensionError(f"packed payload must be {expected} uint8 bytes, got {self.data.size} {self.data.dtype}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def nbytes(self) -> int:
        return int(self.data.size)

    def tobytes(self) -> bytes:
        return self.data.tobytes()


def pack_int4(m, signed: bool = True) -> PackedInt4Matrix:
    m = np.asarray(m)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"pack_int4 expects a matrix, got shape {m.shape}")
    lo, hi = (-8, 7) if signed else (0, 15)
    bad = np.argwhere((m < lo) | (m > hi))
    if len(bad):
        r, c = (int(v) for v in bad[0])
        raise RangeError(f"value {int(m[r, c])} at ({r}, {c}) outside 4-bit range [{lo}, {hi}]")
    rows, cols = m.shape
    nib = (m.astype(np.int16) & 0xF).astype(np.uint8)
    if cols % 2:
        nib = np.concatenate([nib, np.zeros((rows, 1), dtype=np.uint8)], axis=1)
    packed = nib[:, 0::2] | (nib[:, 1::2] << 4)
    return PackedInt4Matrix(rows, cols, np.ascontiguousarray(packed).reshape(-1), signed)


def unpack_int4(p: PackedInt4Matrix) -> np.ndarray:
    b = p.data.reshape(p.rows, -1)
    out = np.empty((p.rows, b.shape[1] * 2), dtype=np.int8)
    lo = (b & 0xF).astype(np.int8)
    hi = (b >> 4).astype(np.int8)
    if p.signed:
        lo = np.where(lo >= 8, lo - 16, lo).astype(np.int8)
        hi = np.where(hi >= 8, hi - 16, hi).astype(np.int8)
    out[:, 0::2] = lo
    out[:, 1::2] = hi
    out = out[:, : p.cols]
    return out if p.signed else out.astype(np.uint8)


def _as_int_matrix(x) -> np.ndarray:
    if isinstance(x, PackedInt4Matrix):
        return unpack_int4(x)
    x = np.asarray(x)
    if x.ndim != 2 or not np.issubdtype(x.dtype, np.integer):
        raise DimensionError(f"integer GEMM operands must be 2-d integer matrices, got {x.shape} {x.dtype}")
    return x


def gemm_int(a, b, b_transposed: bool = False) -> np.ndarray:
    """Exact ``a @ b`` with 32-bit accumulation; ``b`` may be given as ``[N, K]``.

    Operands are 8-bit or packed 4-bit integers.  The product runs through a
    float64 BLAS call: every partial sum is an integer far below 2**53, so the
    result is exact irrespective of summation order or thread count.
    """
    a = _as_int_matrix(a)
    b = _as_int_matrix(b)
    bk = b.shape[1] if b_transposed else b.shape[0]
    if a.shape[1] != bk:
        shape_b = (b.shape[1], b.shape[0]) if b_transposed else b.shape
        raise DimensionError(f"gemm_int shape mismatch: {a.shape} x {shape_b}")
    k = a.shape[1]
    amax = int(np.abs(a.astype(np.int64)).max(initial=0))
    bmax = int(np.abs(b.astype(np.int64)).max(initial=0))
    if k * amax * bmax >= 2**31:
        raise RangeError(f"int32 accumulator could overflow: K={k}, max|a|={amax}, max|b|={bmax}")
    bf = b.astype(np.float64)
    acc = a.astype(np.float64) @ (bf.T if b_transposed else bf)
    return acc.astype(np.int32)


@dataclass
class GemmEpilogue:
    """Post-GEMM work: dequantization scales, zero-point corrections, bias, activation.

    ``token_scales``/``token_zeros`` have one entry per output row (token);
    ``weight_scales``/``weight_zeros`` have shape ``[segments, N]`` where
    segments are column ranges of the reduction axis sharing one scale.
    """

    token_scales: np.ndarray
    weight_scales: np.ndarray
    segments: list[tuple[int, int]]
    token_zeros: np.ndarray | None = None
    weight_zeros: np.ndarray | None = None
    bias: np.ndarray | None = None
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ("none", "gelu"):
            raise ValueError(f"unknown epilogue activation {self.activation!r}")
        self.weight_scales = np.atleast_2d(self.weight_scales)
        if self.weight_zeros is not None:
            self.weight_zeros = np.atleast_2d(self.weight_zeros)
        if self.weight_scales.shape[0] != len(self.segments):
            raise DimensionError("one weight-scale row is needed per reduction segment")

    @property
    def m(self) -> int:
        return len(self.token_scales)

    @property
    def n(self) -> int:
        return self.weight_scales.shape[1]

    @classmethod
    def from_qtensors(cls, x_q: QTensor, w_q: QTensor, bias=None, activation: str = "none") -> GemmEpilogue:
        if x_q.num_groups != x_q.shape[0]:
            raise SchemeMisuseError("fused GEMM needs one activation (scale, zero) per token row")
        segments, ws, wz = w_q.row_segments()
        return cls(
            token_scales=x_q.params.scales,
            token_zeros=None if x_q.scheme.symmetric else x_q.params.zero_points,
            weight_scales=ws,
            weight_zeros=None if w_q.scheme.symmetric else wz,
            segments=segments,
            bias=None if bias is None else np.asarray(bias),
            activation=activation,
        )


def gemm_fused(
    x_q: QTensor,
    w_q: QTensor,
    epilogue: GemmEpilogue | None = None,
    *,
    packed_weight: PackedInt4Matrix | None = None,
    weight_mask: np.ndarray | None = None,
    out_dtype=np.float32,
) -> np.ndarray:
    """``act(dequant(x_q) @ dequant(w_q).T + bias)`` computed from integer products.

    ``x_q`` holds token-wise quantized activations ``[M, K]``; ``w_q`` holds
    group-wise quantized weights ``[N, K]``.  With ``weight_mask`` the
    effective weight is ``dequant(w_q) * mask``; masked entries contribute
    exactly zero, zero-point terms included.
    """
    if x_q.scheme.passthrough or w_q.scheme.passthrough:
        raise SchemeMisuseError("fused integer GEMM needs integer operands on both sides")
    if epilogue is None:
        epilogue = GemmEpilogue.from_qtensors(x_q, w_q)
    xi = x_q.ints
    wi = unpack_int4(packed_weight) if packed_weight is not None else w_q.ints
    if xi.ndim != 2 or wi.ndim != 2 or xi.shape[1] != wi.shape[1]:
        raise DimensionError(f"gemm_fused shape mismatch: activations {xi.shape}, weights {wi.shape}")
    if epilogue.m != xi.shape[0] or epilogue.n != wi.shape[0]:
        raise DimensionError(
            f"epilogue sized for {epilogue.m}x{epilogue.n}, GEMM output is {xi.shape[0]}x{wi.shape[0]}"
        )
    mask = None
    if weight_mask is not None:
        mask = np.asarray(weight_mask).astype(np.int8)
        wi = (wi.astype(np.int16) * mask).astype(wi.dtype)
    dt = np.dtype(out_dtype)
    sa = epilogue.token_scales.astype(dt)[:, None]
    za = None if epilogue.token_zeros is None else epilogue.token_zeros.astype(dt)[:, None]
    y = None
    for s, (c0, c1) in enumerate(epilogue.segments):
        sw = epilogue.weight_scales[s].astype(dt)[None, :]
        acc = gemm_int(xi[:, c0:c1], wi[:, c0:c1], b_transposed=True)
        term = acc.astype(dt) * sa * sw
        if epilogue.weight_zeros is not None:
            zw = epilogue.weight_zeros[s].astype(dt)[None, :]
            if mask is None:
                xsum = xi[:, c0:c1].astype(np.int64).sum(axis=1, keepdims=True)
                count = np.full((1, wi.shape[0]), c1 - c0, dtype=np.int64)
            else:
                xsum = gemm_int(xi[:, c0:c1], mask[:, c0:c1], b_transposed=True)
                count = mask[:, c0:c1].astype(np.int64).sum(axis=1)[None, :]
            term = term + xsum.astype(dt) * sa * zw
        if za is not None:
            wsum = wi[:, c0:c1].astype(np.int64).sum(axis=1)[None, :]
            term = term + za * wsum.astype(dt) * sw
            if epilogue.weight_zeros is not None:
                term = term + za * zw * count.astype(dt)
        y = term if y is None else y + term
    if epilogue.bias is not None:
        y = y + epilogue.bias.astype(dt)[None, :]
    if epilogue.activation == "gelu":
        y = gelu_array(y)
    return y


def gelu_array(x: np.ndarray) -> np.ndarray:
    c = np.asarray(math.sqrt(2.0 / math.pi), dtype=x.dtype)
    a = np.asarray(0.044715, dtype=x.dtype)
    return 0.5 * x * (1.0 + np.tanh(c * (x + a * x * x * x)))


# ---------------------------------------------------------------------------
# shape cases and benchmarking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GemmShapeCase:
    """One of the four encoder linear-layer GEMMs at ``M = bs * seq``."""

    name: str
    m: int
    hidden: int

    def __post_init__(self):
        if self.name not in GEMM_CASES:
            raise ValueError(f"unknown GEMM case {self.name!r}; expected one of {GEMM_CASES}")
        if self.m < 1 or self.hidden < 1:
            raise ValueError("M and hidden size must be positive")

    @property
    def nk(self) -> tuple[int, int]:
        h = self.hidden
        return {
            "qkv_proj": (3 * h, h),
            "attn_out": (h, h),
            "mlp_intermediate": (4 * h, h),
            "mlp_out": (h, 4 * h),
        }[self.name]

    @property
    def shape(self) -> tuple[int, int, int]:
        n, k = self.nk
        return self.m, n, k

    @classmethod
    def from_batch(cls, name: str, batch_size: int, seq_len: int, hidden: int) -> GemmShapeCase:
        return cls(name, batch_size * seq_len, hidden)


@dataclass(frozen=True)
class BenchRecord:
    case: str
    bits: int
    m: int
    n: int
    k: int
    median_ns: float
    bytes_moved: int
    gops: float
    threads: int = 1

    def row(self) -> list:
        return [self.case, self.bits, self.m, self.n, self.k, f"{self.median_ns:.0f}", self.bytes_moved, f"{self.gops:.6g}"]


def weight_bytes(n: int, k: int, bits: int) -> int:
    if bits == 4:
        return math.ceil(n * k / 2)
    if bits == 8:
        return n * k
    if bits == 32:
        return 4 * n * k
    raise ValueError(f"unsupported bit width {bits}")


def bench_gemm(case: GemmShapeCase, bits: int, repeats: int = 5, seed: int = 0, threads: int = 1) -> BenchRecord:
    """Time one GEMM shape at ``bits`` in {4, 8, 32}; report the median of ``repeats``."""
    if repeats < 3:
        raise ValueError("bench_gemm needs at least 3 repeats")
    m, n, k = case.shape
    rng = np.random.default_rng(seed)
    if bits == 4:
        a = rng.integers(-8, 8, size=(m, k), dtype=np.int8)
        w = pack_int4(rng.integers(-8, 8, size=(n, k), dtype=np.int8))

        def run():
            return gemm_int(a, w, b_transposed=True)
    elif bits == 8:
        a = rng.integers(-128, 128, size=(m, k), dtype=np.int16).astype(np.int8)
        w = rng.integers(-128, 128, size=(n, k), dtype=np.int16).astype(np.int8)

        def run():
            return gemm_int(a, w, b_transposed=True)
    elif bits == 32:
        a = rng.standard_normal((m, k)).astype(np.float32)
        w = rng.standard_normal((n, k)).astype(np.float32)

        def run():
            return a @ w.T
    else:
        raise ValueError(f"unsupported bit width {bits}")
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        run()
        times.append(time.perf_counter_ns() - t0)
    med = float(statistics.median(times))
    return BenchRecord(case.name, bits, m, n, k, med, weight_bytes(n, k, bits), 2.0 * m * n * k / max(med, 1.0), threads)


def write_bench_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in records:
            w.writerow(r.row())
