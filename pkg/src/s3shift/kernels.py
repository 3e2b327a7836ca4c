"""Convolution and fully-connected kernels.

Two families live here: float reference kernels that multiply, and integer
kernels that only shift, negate and add.  For integer activations and
power-of-two weights both families give identical results, which is what the
tests check.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quantizers import ShiftWeightCode
from .tensor import round_half_away

MAX_SHIFT = 30
_ACC_LIMIT = 2 ** 62


@dataclass(frozen=True)
class ConvSpec:
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec {self}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kh) // self.stride + 1
        wo = (w + 2 * self.padding - self.kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for {self}")
        return ho, wo


@dataclass
class FixedPointActivation:
    codes: np.ndarray  # int32
    scale: float
    bits: int = 8

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return (self.codes * self.scale).astype(dtype)


class OpCounter:
    """Per-layer tallies of multiplications, shifts and additions.

    Kernel (conv/FC) work goes to ``counts``; folded batch-norm affine work is
    kept apart in ``affine``.
    """

    def __init__(self):
        self.counts: dict[str, dict[str, int]] = defaultdict(lambda: {"mults": 0, "shifts": 0, "adds": 0})
        self.affine: dict[str, dict[str, int]] = defaultdict(lambda: {"mults": 0, "adds": 0})

    def record_affine(self, name: str, mults: int, adds: int) -> None:
        self.affine[name]["mults"] += int(mults)
        self.affine[name]["adds"] += int(adds)

    def record(self, name: str, mults: int = 0, shifts: int = 0, adds: int = 0) -> None:
        c = self.counts[name]
        c["mults"] += int(mults)
        c["shifts"] += int(shifts)
        c["adds"] += int(adds)

    def totals(self) -> dict[str, int]:
        out = {"mults": 0, "shifts": 0, "adds": 0}
        for c in self.counts.values():
            for k in out:
                out[k] += c[k]
        return out


def shift_apply(x: int, p: int) -> int:
    """x * 2**p by shifting; a negative p is an arithmetic (flooring) right shift."""
    if abs(p) > MAX_SHIFT:
        raise ValueError(f"shift exponent {p} outside [-{MAX_SHIFT}, {MAX_SHIFT}]")
    x = int(np.int64(x))
    if p > 0:
        return x << p
    if p < 0:
        return x >> -p
    return x


def im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, tuple[int, int]]:
    """(N, C, H, W) -> (N*Ho*Wo, C*kh*kw) patch matrix, zero padded."""
    n, c, h, w = x.shape
    ho, wo = spec.out_hw(h, w)
    p, s = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (spec.kh, spec.kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * spec.kh * spec.kw)
    return cols, (ho, wo)


def col2im(dcols: np.ndarray, x_shape: tuple[int, ...], spec: ConvSpec) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = spec.out_hw(h, w)
    p, s = spec.padding, spec.stride
    d = dcols.reshape(n, ho, wo, c, spec.kh, spec.kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(spec.kh):
        for j in range(spec.kw):
            dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += d[:, :, i, j]
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx


def _check_conv_shapes(x_shape, w_shape):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"conv expects NCHW input and OIHW weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ValueError(f"input has {x_shape[1]} channels, weight expects {w_shape[1]}")


def conv2d_mul(x: np.ndarray, w: np.ndarray, spec: ConvSpec,
               counter: OpCounter | None = None, name: str = "conv") -> np.ndarray:
    """Cross-correlation with zero padding and no bias."""
    _check_conv_shapes(x.shape, w.shape)
    if (w.shape[2], w.shape[3]) != (spec.kh, spec.kw):
        raise ValueError(f"weight kernel {w.shape[2:]} does not match spec {spec}")
    cols, (ho, wo) = im2col(x, spec)
    out = cols @ w.reshape(w.shape[0], -1).T
    if counter is not None:
        macs = out.size * cols.shape[1]
        counter.record(name, mults=macs, adds=macs)
    return out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)


def fc_mul(x: np.ndarray, w: np.ndarray,
           counter: OpCounter | None = None, name: str = "fc") -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"fc shape mismatch: input {x.shape}, weight {w.shape}")
    out = x @ w.T
    if counter is not None:
        macs = out.size * w.shape[1]
        counter.record(name, mults=macs, adds=macs)
    return out


def _shift_matmul(cols: np.ndarray, codes: ShiftWeightCode, offset: int,
                  counter: OpCounter | None, name: str) -> np.ndarray:
    """acc[r, o] = sum_k ±(cols[r, k] << (e[o, k] + offset)), skipping zero-flag weights.

    No multiplication is performed: each weight slot costs one shift and one add.
    """
    cout = codes.shape[0]
    zero = codes.zero.reshape(cout, -1)
    neg = (codes.sign.reshape(cout, -1) < 0) & ~zero
    pos = ~zero & ~neg
    exps = codes.exponent.reshape(cout, -1).astype(np.int64) + offset
    k = exps.shape[1]
    if k != cols.shape[1]:
        raise ValueError(f"patch width {cols.shape[1]} does not match weight fan-in {k}")
    if exps.size and (exps.min() < 0 or exps.max() > MAX_SHIFT):
        raise ValueError(f"effective shift exponents must lie in [0, {MAX_SHIFT}]")
    if cols.size and exps.size:
        bound = int(np.abs(cols).max()) * (1 << int(exps.max())) * k
        if bound >= _ACC_LIMIT:
            raise OverflowError(f"{name}: accumulator bound {bound} exceeds 64-bit headroom")
    cols = cols.astype(np.int64)
    acc = np.zeros((cols.shape[0], cout), dtype=np.int64)
    for o in range(cout):
        shifted = np.left_shift(cols, exps[o])
        acc[:, o] = shifted[:, pos[o]].sum(axis=1) - shifted[:, neg[o]].sum(axis=1)
    if counter is not None:
        ops = cols.shape[0] * cout * k
        counter.record(name, shifts=ops, adds=ops)
    return acc


def _exponent_offset(codes: ShiftWeightCode) -> int:
    # Negative exponents would need flooring right shifts; lift everything to >= 0.
    live = codes.exponent[~codes.zero]
    return int(max(0, -int(live.min()))) if live.size else 0


def conv2d_shift(x: FixedPointActivation, codes: ShiftWeightCode, spec: ConvSpec,
                 counter: OpCounter | None = None, name: str = "conv") -> tuple[np.ndarray, float]:
    """Multiplication-free convolution; returns (int64 accumulator NCHW, scale)."""
    _check_conv_shapes(x.codes.shape, codes.shape)
    offset = _exponent_offset(codes)
    cols, (ho, wo) = im2col(x.codes.astype(np.int64), spec)
    acc = _shift_matmul(cols, codes, offset, counter, name)
    n = x.codes.shape[0]
    acc = acc.reshape(n, ho, wo, codes.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(acc), float(np.ldexp(x.scale, -offset))


def fc_shift(x: FixedPointActivation, codes: ShiftWeightCode,
             counter: OpCounter | None = None, name: str = "fc") -> tuple[np.ndarray, float]:
    if x.codes.ndim != 2 or len(codes.shape) != 2 or x.codes.shape[1] != codes.shape[1]:
        raise ValueError(f"fc shape mismatch: input {x.codes.shape}, codes {codes.shape}")
    offset = _exponent_offset(codes)
    acc = _shift_matmul(x.codes.astype(np.int64), codes, offset, counter, name)
    return acc, float(np.ldexp(x.scale, -offset))


def quantize_activation(x: np.ndarray, bits: int = 8) -> FixedPointActivation:
    """Dynamic per-tensor symmetric quantization."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("activation contains NaN or Inf")
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    scale = amax / qmax if amax > 0 else 1.0
    codes = np.clip(round_half_away(x.astype(np.float64) / scale), -qmax, qmax).astype(np.int32)
    return FixedPointActivation(codes, scale, bits)
