"""Quantized linear layer op shared by training and inference.

Forward values always come from the integer kernel (token-wise quantized
activations times group-wise quantized weights, fused epilogue), in training
and in evaluation alike; the backward pass is the clipped straight-through
estimator through both fake-quantizers.  Train-mode and eval-mode outputs are
therefore the same numbers.

Inside an active :func:`q4fg.quant.ste_surrogate` block the forward switches
to the float surrogate ``xhat @ what.T + b`` with frozen quantization
residuals, which is what finite-difference checks differentiate.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError
from .gemm import GemmEpilogue, gemm_fused
from .quant import (
    QTensor,
    QuantScheme,
    _dequant_array,
    active_surrogate,
    inside_clip,
    quantize,
)
from .sparsity import CompositionOrder
from .tensor import Tensor, _result, linear, mul


def masked_linear(x: Tensor, weight: Tensor, bias: Tensor | None, mask: np.ndarray | None) -> Tensor:
    """Float linear layer on the pruned weight."""
    if mask is None:
        return linear(x, weight, bias)
    return linear(x, mul(weight, Tensor(mask.astype(weight.dtype), dtype=weight.dtype)), bias)


def effective_weight(weight: np.ndarray, scheme: QuantScheme, mask: np.ndarray | None = None,
                     order: CompositionOrder = CompositionOrder.PRUNE_THEN_QUANT,
                     qweight: QTensor | None = None) -> tuple[np.ndarray, QTensor | None]:
    """Dequantized (and pruned) weight seen by the forward pass, plus its QTensor."""
    order = CompositionOrder(order)
    m = None if mask is None else mask.astype(weight.dtype)
    if scheme.passthrough and qweight is None:
        return (weight if m is None else weight * m), None
    if qweight is not None:
        wq = qweight
    else:
        src = weight * m if (m is not None and order is CompositionOrder.PRUNE_THEN_QUANT) else weight
        wq = quantize(src, scheme, kind="weight")
    what = _dequant_array(wq).astype(weight.dtype)
    if m is not None and order is CompositionOrder.QUANT_THEN_PRUNE:
        what = what * m
    return what, wq


def quant_linear(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    weight_scheme: QuantScheme,
    act_scheme: QuantScheme,
    mask: np.ndarray | None = None,
    order: CompositionOrder | str = CompositionOrder.PRUNE_THEN_QUANT,
    qweight: QTensor | None = None,
) -> Tensor:
    order = CompositionOrder(order)
    if weight_scheme.passthrough and act_scheme.passthrough and qweight is None:
        return masked_linear(x, weight, bias, mask)
    k = x.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != k:
        raise DimensionError(f"quant_linear shape mismatch: input {x.shape}, weight {weight.shape}")
    dt = x.dtype
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    m = None if mask is None else np.asarray(mask).astype(dt)

    sur = active_surrogate()
    src = weight.data * m if (m is not None and order is CompositionOrder.PRUNE_THEN_QUANT) else weight.data
    what, wq = effective_weight(weight.data, weight_scheme, mask, order, qweight)
    if act_scheme.passthrough:
        xhat, xq = x2, None
        inside = np.ones(x2.shape, dtype=bool)
    else:
        xq = quantize(x2, act_scheme, kind="activation")
        xhat = _dequant_array(xq).astype(dt)
        inside = inside_clip(x2, act_scheme)

    if sur is not None:
        if wq is not None:
            what = sur.visit(src, _dequant_array(wq).astype(dt), np.ones(src.shape, dtype=bool))
            if m is not None and order is CompositionOrder.QUANT_THEN_PRUNE:
                what = what * m
        if xq is not None:
            xhat = sur.visit(x2, xhat, inside)
        y = xhat @ what.T
        if bias is not None:
            y = y + bias.data
    elif wq is not None and xq is not None:
        epi = GemmEpilogue.from_qtensors(xq, wq, None if bias is None else bias.data)
        qtp = m if (m is not None and order is CompositionOrder.QUANT_THEN_PRUNE) else None
        y = gemm_fused(xq, wq, epi, weight_mask=qtp, out_dtype=dt)
    else:
        y = xhat @ what.T
        if bias is not None:
            y = y + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.where(inside, g2 @ what, 0.0).astype(dt, copy=False).reshape(x.shape)
        gw = g2.T @ xhat
        if m is not None:
            gw = gw * m
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(np.asarray(y, dtype=dt).reshape(*lead, weight.shape[0]), parents, backward)
