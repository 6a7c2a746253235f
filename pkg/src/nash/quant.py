"""Quantizers with straight-through gradients and the per-branch bit plan.

Weight quantizers: 1-bit uses a per-output-channel mean-abs scale and
emits {-s, +s}; multi-bit uses a per-tensor max-abs scale over a signed
symmetric grid. Both scales are snapped to a power of two so that
requantizing an already quantized tensor reproduces it bit for bit
(idempotence would otherwise be broken by rounding in the scale
recomputation). Activation quantizers use fixed, configured ranges and
are exactly idempotent by construction.

Rounding is half-up (floor(x/step + 0.5)) everywhere so the float path
agrees exactly with count-of-thresholds-crossed hardware semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .tensor import Tensor, _emit

WEIGHT = "weight"
RELU_ACT = "relu_act"
HARDTANH_ACT = "hardtanh_act"
IDENTITY_ACT = "identity_act"

_ACT_KINDS = (RELU_ACT, HARDTANH_ACT, IDENTITY_ACT)


@dataclass(frozen=True)
class QuantSpec:
    """Configuration for one quantization site."""

    bits: int
    signed: bool
    kind: str
    range: float = 2.0  # clip range for relu_act / identity_act

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise InvalidArgumentError(f"bits must lie in [1, 8], got {self.bits}")
        if self.kind not in (WEIGHT,) + _ACT_KINDS:
            raise InvalidArgumentError(f"unknown quantizer kind {self.kind!r}")
        if self.range <= 0:
            raise InvalidArgumentError("range must be positive")


@dataclass(frozen=True)
class BitWidthPlan:
    """Bit widths per network site: main backbone branch, residual
    shortcuts, and the searched branches.

    Residual widths and the searched branches' activation width are fixed
    at 8; searched-branch weights are 1-bit except under the
    no-maxpool variant, where they are 8-bit.
    """

    backbone_w: int
    backbone_a: int
    residual_w: int = 8
    residual_a: int = 8
    nas_w: int = 1
    nas_a: int = 8


_ALLOWED_BITS = (1, 2, 4, 8)


def resolve_plan(variant: str, wxay: tuple[int, int]) -> BitWidthPlan:
    """Map (variant, wXaY) to the full per-site plan."""
    w, a = wxay
    if w not in _ALLOWED_BITS or a not in _ALLOWED_BITS:
        raise InvalidArgumentError(f"unsupported bit pair w{w}a{a}")
    if variant not in ("v1", "v2", "v3", "v4", "original"):
        raise InvalidArgumentError(f"unknown variant {variant!r}")
    nas_w = 8 if variant == "v4" else 1
    return BitWidthPlan(backbone_w=w, backbone_a=a, nas_w=nas_w)


def _halfup(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def _pow2_round(s: np.ndarray) -> np.ndarray:
    """Nearest power of two, elementwise; zeros map to 1.0."""
    s = np.where(s > 0, s, 1.0)
    return np.exp2(np.round(np.log2(s))).astype(s.dtype)


def _pow2_ceil(s: np.ndarray) -> np.ndarray:
    """Smallest power of two >= s; zeros map to 1.0."""
    s = np.where(s > 0, s, 1.0)
    return np.exp2(np.ceil(np.log2(s))).astype(s.dtype)


def weight_qmax(bits: int) -> int:
    """Largest positive integer code: 1 for binary, 2^(b-1)-1 otherwise."""
    return 1 if bits == 1 else (1 << (bits - 1)) - 1


def weight_scale(w: np.ndarray, bits: int) -> np.ndarray:
    """Power-of-two-snapped scale; per output channel for 1-bit,
    per tensor otherwise. Returned with a broadcastable shape.

    Binary snaps to the nearest power of two (mean-abs basis); multi-bit
    snaps upward (max-abs basis), which keeps the recomputed scale a
    fixed point when the tensor is already on its grid.
    """
    if bits == 1:
        if w.ndim >= 2:
            axes = tuple(range(1, w.ndim))
            raw = np.abs(w).mean(axis=axes, keepdims=True)
        else:
            raw = np.abs(w).mean(keepdims=True)
        return _pow2_round(raw.astype(w.dtype))
    raw = np.abs(w).max(keepdims=True).reshape((1,) * w.ndim)
    raw = raw / weight_qmax(bits)
    return _pow2_ceil(raw.astype(w.dtype))


def weight_codes(w: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes and scale for a weight tensor; value = codes * scale."""
    s = weight_scale(w, bits)
    qmax = weight_qmax(bits)
    if bits == 1:
        codes = np.where(w >= 0, 1.0, -1.0).astype(w.dtype)
    else:
        codes = np.clip(_halfup(w / s), -qmax, qmax).astype(w.dtype)
    return codes, s


def quantize_weight(w: Tensor, spec: QuantSpec, tape=None) -> Tensor:
    """Forward snaps to the grid; backward is straight-through with the
    gradient masked to zero outside the clip range [-s*qmax, s*qmax]."""
    if spec.kind != WEIGHT:
        raise InvalidArgumentError("quantize_weight requires a weight-kind spec")
    codes, s = weight_codes(w.data, spec.bits)
    out = codes * s
    clip = s * weight_qmax(spec.bits)
    mask = np.abs(w.data) <= clip

    def backward(g):
        return (g * mask,)

    return _emit(tape, (w,), out, backward)


def act_grid(spec: QuantSpec) -> tuple[float, int, int]:
    """(step, min_code, max_code) of an activation quantizer's grid."""
    b = spec.bits
    if spec.kind == RELU_ACT:
        levels = (1 << b) - 1
        return spec.range / levels, 0, levels
    if spec.kind == HARDTANH_ACT:
        qmax = (1 << (b - 1)) - 1 if b > 1 else 1
        return 1.0 / qmax, -qmax, qmax
    if spec.kind == IDENTITY_ACT:
        half = 1 << (b - 1)
        return spec.range / half, -half, half - 1
    raise InvalidArgumentError(f"not an activation kind: {spec.kind!r}")


def act_quant(x: Tensor, spec: QuantSpec, tape=None) -> Tensor:
    """Quantized activation with a straight-through backward inside the
    clip range.

    relu_act clamps to [0, range]; hardtanh_act to [-1, 1]; identity_act
    to the signed range implied by ``spec.range``.
    """
    if spec.kind not in _ACT_KINDS:
        raise InvalidArgumentError("act_quant requires an activation-kind spec")
    step, lo, hi = act_grid(spec)
    codes = np.clip(_halfup(x.data / np.asarray(step, dtype=x.data.dtype)), lo, hi)
    out = (codes * step).astype(x.data.dtype)

    if spec.kind == RELU_ACT:
        mask = (x.data > 0) & (x.data < hi * step)
    elif spec.kind == HARDTANH_ACT:
        mask = np.abs(x.data) <= 1.0
    else:
        mask = (x.data > lo * step) & (x.data < hi * step)

    def backward(g):
        return (g * mask,)

    return _emit(tape, (x,), out, backward)


def act_thresholds(spec: QuantSpec) -> tuple[list[float], int, float]:
    """Lower the quantizer to threshold semantics.

    Returns (thresholds ascending, output bias, output step). The node
    output is (count of thresholds x >= t) + bias, and multiplying by the
    step reproduces act_quant exactly: thresholds sit halfway between
    grid codes, matching half-up rounding.
    """
    step, lo, hi = act_grid(spec)
    thresholds = [float((n - 0.5) * step) for n in range(lo + 1, hi + 1)]
    return thresholds, lo, float(step)
