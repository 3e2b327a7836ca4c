"""Weight quantizers: sign-sparse-shift (S3), DeepShift rounding, uniform integer.

Every scheme exposes a forward decode and a straight-through backward.  The
:class:`WeightQuantizer` subclasses at the bottom are the plug-ins used by the
network's weight layers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Rng, round_half_away

LN2 = math.log(2.0)

# 𝟙(0) = 1: a latent sitting exactly on zero counts as "on".
def heaviside(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    return (x >= 0).astype(dtype)


@dataclass
class S3LatentWeights:
    """Continuous latents behind one S3 weight tensor.

    ``w_s1``/``w_s2`` are absent for the 2-bit variant, ``w_s3`` is only
    present for the 4-bit variant.
    """

    w_sign: np.ndarray
    w_sparse: np.ndarray
    w_s1: Optional[np.ndarray] = None
    w_s2: Optional[np.ndarray] = None
    w_s3: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = {a.shape for a in self.tensors().values()}
        if len(shapes) != 1:
            raise ValueError(f"S3 latents must share one shape, got {sorted(shapes)}")
        if (self.w_s1 is None) != (self.w_s2 is None):
            raise ValueError("w_s1 and w_s2 must be given together")
        if self.w_s3 is not None and self.w_s1 is None:
            raise ValueError("w_s3 requires w_s1 and w_s2")

    @property
    def bits(self) -> int:
        if self.w_s1 is None:
            return 2
        return 4 if self.w_s3 is not None else 3

    @property
    def shape(self) -> tuple[int, ...]:
        return self.w_sign.shape

    def tensors(self) -> dict[str, np.ndarray]:
        names = ("w_sign", "w_sparse", "w_s1", "w_s2", "w_s3")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


@dataclass
class ShiftWeightCode:
    """Elementwise (zero, sign, exponent) codes; value = 0 or sign * 2**exponent."""

    zero: np.ndarray  # bool
    sign: np.ndarray  # int8, +1 / -1
    exponent: np.ndarray  # int8

    @property
    def shape(self) -> tuple[int, ...]:
        return self.zero.shape

    def decode(self, dtype=np.float32) -> np.ndarray:
        mag = np.ldexp(np.ones(self.shape, dtype=np.float64), self.exponent.astype(np.int32))
        out = np.where(self.zero, 0.0, self.sign * mag)
        return out.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ShiftWeightCode):
            return NotImplemented
        return (np.array_equal(self.zero, other.zero)
                and np.array_equal(self.sign, other.sign)
                and np.array_equal(self.exponent, other.exponent))


def s3_exponent(latent: S3LatentWeights) -> np.ndarray:
    """Integer exponent S from the shift latents (0 everywhere for 2 bits)."""
    if latent.w_s1 is None:
        return np.zeros(latent.shape, dtype=np.int8)
    h1 = latent.w_s1 >= 0
    h2 = latent.w_s2 >= 0
    s = h2 * (h1.astype(np.int8) + 1)
    if latent.w_s3 is not None:
        s = (latent.w_s3 >= 0) * (s + 1)
    return s.astype(np.int8)


def s3_decode(latent: S3LatentWeights) -> ShiftWeightCode:
    """Discrete weight 2**S * 𝟙(w_sparse) * (2𝟙(w_sign) - 1)."""
    return ShiftWeightCode(
        zero=latent.w_sparse < 0,
        sign=np.where(latent.w_sign >= 0, 1, -1).astype(np.int8),
        exponent=s3_exponent(latent),
    )


def s3_backward(grad_w: np.ndarray, latent: S3LatentWeights,
                decoded: ShiftWeightCode) -> S3LatentWeights:
    """Latent gradients, with d𝟙/dx replaced by 1.

    The exponent path keeps the exact ln2 factor from d(2**S)/dS.
    """
    dtype = grad_w.dtype
    h_sparse = heaviside(latent.w_sparse).astype(dtype)
    sign = (2 * heaviside(latent.w_sign) - 1).astype(dtype)
    pow2 = np.ldexp(np.ones(latent.shape, dtype=dtype), decoded.exponent.astype(np.int32))
    w_shift = decoded.decode(dtype)

    g_sign = grad_w * pow2 * h_sparse * 2
    g_sparse = grad_w * pow2 * sign
    grads = dict(w_sign=g_sign.astype(dtype), w_sparse=g_sparse.astype(dtype))
    if latent.w_s1 is not None:
        h1 = heaviside(latent.w_s1).astype(dtype)
        h2 = heaviside(latent.w_s2).astype(dtype)
        g_exp = grad_w * LN2 * w_shift  # dL/dS
        if latent.w_s3 is None:
            ds_d2, ds_d1 = h1 + 1, h2
        else:
            h3 = heaviside(latent.w_s3).astype(dtype)
            grads["w_s3"] = (g_exp * (h2 * (h1 + 1) + 1)).astype(dtype)
            ds_d2, ds_d1 = h3 * (h1 + 1), h3 * h2
        grads["w_s2"] = (g_exp * ds_d2).astype(dtype)
        grads["w_s1"] = (g_exp * ds_d1).astype(dtype)
    return S3LatentWeights(**grads)


def sparse_regularizer(w_sparse: np.ndarray) -> tuple[float, np.ndarray]:
    """L1 norm of the negative part of ``w_sparse`` and its subgradient (0 at 0).

    The value is the correctly rounded sum, so it does not depend on summation order.
    """
    w = np.asarray(w_sparse)
    value = math.fsum((-w[w < 0]).astype(np.float64).tolist())
    grad = np.where(w < 0, -1.0, 0.0).astype(w.dtype)
    return value, grad


def deepshift_window(bits: int) -> tuple[int, int]:
    """(p_min, p_max): sign plus (bits-1) exponent bits covering 2**-k .. 2**0."""
    if bits not in (2, 3, 4):
        raise ValueError(f"DeepShift supports 2, 3 or 4 bits, got {bits}")
    return -(2 ** (bits - 1) - 1), 0


def deepshift_quantize(w: np.ndarray, bits: int) -> ShiftWeightCode:
    """Round log2|w| to the nearest integer inside the exponent window.

    There is no zero code; tiny magnitudes land on the smallest power.
    Sign of an exact zero is +1.
    """
    p_min, p_max = deepshift_window(bits)
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore"):
        p = round_half_away(np.log2(np.abs(w)))
    p = np.clip(np.nan_to_num(p, neginf=p_min), p_min, p_max)
    return ShiftWeightCode(
        zero=np.zeros(w.shape, dtype=bool),
        sign=np.where(w < 0, -1, 1).astype(np.int8),
        exponent=p.astype(np.int8),
    )


@dataclass
class IntQuantParams:
    bits: int
    scale: np.ndarray  # one positive value per output channel (axis 0)

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def int_quantize(w: np.ndarray, bits: int) -> tuple[np.ndarray, IntQuantParams]:
    """Symmetric per-output-channel integer codes, ties rounded away from zero."""
    if bits < 2:
        raise ValueError(f"integer quantization needs bits >= 2, got {bits}")
    w = np.asarray(w)
    qmax = 2 ** (bits - 1) - 1
    flat = w.reshape(w.shape[0], -1).astype(np.float64)
    amax = np.max(np.abs(flat), axis=1)
    scale = amax / qmax
    scale[scale == 0] = 1.0  # all-zero channels, and subnormal maxima whose scale underflows
    codes = np.clip(round_half_away(flat / scale[:, None]), -qmax, qmax)
    return codes.astype(np.int32).reshape(w.shape), IntQuantParams(bits, scale)


def int_dequantize(codes: np.ndarray, params: IntQuantParams, dtype=np.float32) -> np.ndarray:
    shape = (-1,) + (1,) * (codes.ndim - 1)
    return (codes * params.scale.reshape(shape)).astype(dtype)


def int_ste_mask(w: np.ndarray, params: IntQuantParams) -> np.ndarray:
    """1 where the element was inside the clamp range, 0 where it was clipped."""
    shape = (-1,) + (1,) * (w.ndim - 1)
    ratio = np.abs(w.astype(np.float64)) / params.scale.reshape(shape)
    return (ratio <= params.qmax + 0.5).astype(w.dtype)


# --------------------------------------------------------------------------
# Network plug-ins


class WeightQuantizer:
    """Maps a layer's trainable tensors to the weight used in forward."""

    mode = "fp32"
    bits = 32
    is_shift = False

    def init_params(self, w_init: np.ndarray, rng: Rng) -> dict[str, np.ndarray]:
        return {"weight": w_init}

    def weight(self, params: dict[str, np.ndarray]) -> np.ndarray:
        return params["weight"]

    def backward(self, grad_w: np.ndarray, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {"weight": grad_w}

    def regularizer(self, params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        return 0.0, {}

    def codes(self, params: dict[str, np.ndarray]) -> ShiftWeightCode:
        raise TypeError(f"{self.name} weights are not shift codes")

    @property
    def name(self) -> str:
        return "fp32" if self.mode == "fp32" else f"{self.mode}{self.bits}"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class FullPrecision(WeightQuantizer):
    pass


class IntQuantizer(WeightQuantizer):
    mode = "q"

    def __init__(self, bits: int):
        self.bits = bits

    def weight(self, params):
        w = params["weight"]
        codes, qp = int_quantize(w, self.bits)
        return int_dequantize(codes, qp, w.dtype)

    def backward(self, grad_w, params):
        w = params["weight"]
        _, qp = int_quantize(w, self.bits)
        return {"weight": grad_w * int_ste_mask(w, qp)}


class DeepShiftQuantizer(WeightQuantizer):
    mode = "d"
    is_shift = True

    def __init__(self, bits: int):
        deepshift_window(bits)
        self.bits = bits

    def weight(self, params):
        w = params["weight"]
        return deepshift_quantize(w, self.bits).decode(w.dtype)

    def codes(self, params):
        return deepshift_quantize(params["weight"], self.bits)


class S3Quantizer(WeightQuantizer):
    mode = "s"
    is_shift = True

    def __init__(self, bits: int):
        if bits not in (2, 3, 4):
            raise ValueError(f"S3 supports 2, 3 or 4 bits, got {bits}")
        self.bits = bits

    def latent_names(self) -> tuple[str, ...]:
        return ("w_sign", "w_sparse", "w_s1", "w_s2", "w_s3")[: {2: 2, 3: 4, 4: 5}[self.bits]]

    def init_params(self, w_init, rng):
        # w_init is the FP32 draw; the other latents come from the same distribution.
        std = float(np.std(w_init)) if w_init.size > 1 else 1.0
        params = {}
        for name in self.latent_names():
            if name == "w_sign":
                params[name] = w_init.copy()
                continue
            draw = (std * rng.standard_normal(w_init.size)).reshape(w_init.shape).astype(w_init.dtype)
            params[name] = np.abs(draw) if name == "w_sparse" else draw
        return params

    def latent(self, params) -> S3LatentWeights:
        return S3LatentWeights(**{n: params[n] for n in self.latent_names()})

    def codes(self, params):
        return s3_decode(self.latent(params))

    def weight(self, params):
        return self.codes(params).decode(params["w_sign"].dtype)

    def backward(self, grad_w, params):
        latent = self.latent(params)
        return s3_backward(grad_w, latent, s3_decode(latent)).tensors()

    def regularizer(self, params):
        value, grad = sparse_regularizer(params["w_sparse"])
        return value, {"w_sparse": grad}


INT_BITS = (2, 3, 4, 8, 16)
SHIFT_BITS = (2, 3, 4)


def parse_mode(mode: str) -> tuple[str, int]:
    """'fp32' -> ('fp32', 32); 'q8' -> ('q', 8); 's3' -> ('s', 3)."""
    mode = mode.strip().lower()
    if mode == "fp32":
        return "fp32", 32
    m = re.fullmatch(r"([qds])(\d+)", mode)
    if not m:
        raise ValueError(f"unknown quantization mode {mode!r}")
    kind, bits = m.group(1), int(m.group(2))
    allowed = INT_BITS if kind == "q" else SHIFT_BITS
    if bits not in allowed:
        raise ValueError(f"unsupported bit-width for mode {mode!r}; {kind} accepts {allowed}")
    return kind, bits


def make_quantizer(mode: str) -> WeightQuantizer:
    kind, bits = parse_mode(mode)
    if kind == "fp32":
        return FullPrecision()
    return {"q": IntQuantizer, "d": DeepShiftQuantizer, "s": S3Quantizer}[kind](bits)
