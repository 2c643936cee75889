"""Magnitude and movement pruning masks, Pair-(N:M) structure, and their
composition order with quantization.

Pair-(N:M) groups run along the last (input / reduction) axis of a weight
stored ``[out_features, in_features]``: every aligned run of M weights holds
exactly N zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import DimensionError
from .quant import QuantScheme, fake_quantize_ste
from .tensor import Tensor, mul


class CompositionOrder(str, Enum):
    PRUNE_THEN_QUANT = "prune_then_quant"  # Quant(Prune(W)), "P=>Q"
    QUANT_THEN_PRUNE = "quant_then_prune"  # Prune(Quant(W)), "Q=>P"


def parse_structure(structure) -> tuple[int, int] | None:
    """``"unstructured"`` -> None; ``"2:4"`` or ``(2, 4)`` -> (2, 4)."""
    if structure is None or structure == "unstructured":
        return None
    if isinstance(structure, str):
        try:
            n, m = (int(v) for v in structure.split(":"))
        except ValueError:
            raise ValueError(f"structure must be 'unstructured' or 'N:M', got {structure!r}") from None
    else:
        n, m = (int(v) for v in structure)
    if not 0 <= n < m:
        raise ValueError(f"Pair-(N:M) needs 0 <= N < M, got {n}:{m}")
    return n, m


@dataclass(frozen=True, eq=False)
class SparsityMask:
    mask: np.ndarray
    nm: tuple[int, int] | None = None
    origin: str = "teacher_magnitude"

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask).astype(bool))

    def __eq__(self, other):
        if not isinstance(other, SparsityMask):
            return NotImplemented
        return self.nm == other.nm and self.origin == other.origin and np.array_equal(self.mask, other.mask)

    __hash__ = None

    @property
    def structure(self) -> str:
        return "unstructured" if self.nm is None else "pair_nm"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.mask.mean())

    @property
    def frozen(self) -> bool:
        return self.origin == "teacher_magnitude"

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.mask.astype(dtype)

    def check_structure(self) -> bool:
        if self.nm is None:
            return True
        n, m = self.nm
        if self.mask.shape[-1] % m:
            return False
        zeros = (~self.mask).reshape(-1, m).sum(axis=1)
        return bool(np.all(zeros == n))

    def metadata(self) -> dict:
        return {
            "shape": list(self.mask.shape),
            "structure": self.structure,
            "n": None if self.nm is None else self.nm[0],
            "m": None if self.nm is None else self.nm[1],
            "origin": self.origin,
        }

    def packbits(self) -> bytes:
        return np.packbits(self.mask.reshape(-1).astype(np.uint8)).tobytes()

    @classmethod
    def from_packed(cls, payload: bytes, meta: dict) -> SparsityMask:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape))
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count)
        nm = None if meta.get("structure") == "unstructured" else (int(meta["n"]), int(meta["m"]))
        return cls(bits.reshape(shape).astype(bool), nm, meta.get("origin", "teacher_magnitude"))


def _select(importance: np.ndarray, sparsity: float, nm: tuple[int, int] | None) -> np.ndarray:
    """Keep-mask pruning the lowest-importance entries; ties prune the lower index."""
    if nm is None:
        flat = importance.reshape(-1)
        k = int(round(sparsity * flat.size))
        keep = np.ones(flat.size, dtype=bool)
        keep[np.argsort(flat, kind="stable")[:k]] = False
        return keep.reshape(importance.shape)
    n, m = nm
    if importance.ndim == 0 or importance.shape[-1] % m:
        raise DimensionError(f"last dimension {importance.shape[-1:]} is not divisible by M={m}")
    rows = importance.reshape(-1, m)
    order = np.argsort(rows, axis=1, kind="stable")[:, :n]
    keep = np.ones(rows.shape, dtype=bool)
    np.put_along_axis(keep, order, False, axis=1)
    return keep.reshape(importance.shape)


def _check_sparsity(sparsity: float, nm) -> None:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    if nm is not None and not np.isclose(sparsity, nm[0] / nm[1]):
        raise ValueError(f"Pair-({nm[0]}:{nm[1]}) implies sparsity {nm[0] / nm[1]}, got {sparsity}")


def l1_mask(w, sparsity: float, structure="unstructured") -> SparsityMask:
    """Zero the smallest-magnitude weights (globally, or the N smallest per M-group)."""
    arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    nm = parse_structure(structure)
    _check_sparsity(sparsity, nm)
    return SparsityMask(_select(np.abs(arr), sparsity, nm), nm, "teacher_magnitude")


def movement_scores_update(scores: np.ndarray, w, grad_w, lr: float = 1.0) -> np.ndarray:
    """Accumulate movement scores: ``scores - lr * w * grad_w``."""
    wd = w.data if isinstance(w, Tensor) else np.asarray(w)
    g = np.asarray(grad_w)
    if not (scores.shape == wd.shape == g.shape):
        raise DimensionError(f"shape mismatch: scores {scores.shape}, w {wd.shape}, grad {g.shape}")
    return scores - lr * (wd * g)


def movement_mask(scores: np.ndarray, sparsity: float, structure="unstructured") -> SparsityMask:
    """Keep the highest-scoring weights."""
    nm = parse_structure(structure)
    _check_sparsity(sparsity, nm)
    return SparsityMask(_select(np.asarray(scores), sparsity, nm), nm, "movement")


class MovementPruner:
    """Iterative movement pruning state for a set of named weights.

    Scores start at zero and accumulate ``-lr * w * grad`` every step; the
    masks are recomputed from the scores every ``cadence`` steps.
    """

    def __init__(self, shapes: dict[str, tuple[int, ...]], sparsity: float, structure="unstructured",
                 lr: float = 1.0, cadence: int = 1):
        if cadence < 1:
            raise ValueError("mask refresh cadence must be >= 1")
        self.sparsity = sparsity
        self.structure = structure
        self.lr = lr
        self.cadence = cadence
        self.steps = 0
        self.scores = {k: np.zeros(s, dtype=np.float64) for k, s in shapes.items()}
        self.masks = {k: SparsityMask(np.ones(s, dtype=bool), parse_structure(structure), "movement")
                      for k, s in shapes.items()}

    def update(self, weights: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name in self.scores:
            if grads.get(name) is not None:
                self.scores[name] = movement_scores_update(self.scores[name], weights[name], grads[name], self.lr)
        self.steps += 1
        if self.steps % self.cadence == 0:
            self.masks = {k: movement_mask(s, self.sparsity, self.structure) for k, s in self.scores.items()}


def masked_quantized_weight(w: Tensor, mask: SparsityMask | np.ndarray, scheme: QuantScheme,
                            order: CompositionOrder | str = CompositionOrder.PRUNE_THEN_QUANT) -> Tensor:
    """Effective forward weight under pruning and quantization.

    ``prune_then_quant``: ``fake_quantize(w * mask)`` -- group statistics see
    the zeros.  ``quant_then_prune``: ``fake_quantize(w) * mask`` -- masked
    entries are exactly zero.
    """
    order = CompositionOrder(order)
    m = mask.mask if isinstance(mask, SparsityMask) else np.asarray(mask, dtype=bool)
    if m.shape != w.shape:
        raise DimensionError(f"mask shape {m.shape} does not match weight shape {w.shape}")
    mt = Tensor(m.astype(w.dtype), dtype=w.dtype)
    if order is CompositionOrder.PRUNE_THEN_QUANT:
        return fake_quantize_ste(mul(w, mt), scheme, kind="weight")
    return mul(fake_quantize_ste(w, scheme, kind="weight"), mt)
