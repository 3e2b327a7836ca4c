"""Integer inference path and the S3MX shift-model file.

A trained shift-mode ResNet is compiled into a :class:`ShiftEngine`: weight
layers become (zero, sign, exponent) codes run by the shift kernels on 8-bit
activation codes, and each batch norm is folded into a per-channel affine
whose scale is stored as a 16-bit fixed-point integer.  Those affine
multiplies are tallied under ``affine`` so they never mix with kernel counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import (ConvSpec, OpCounter, conv2d_mul, conv2d_shift, fc_mul, fc_shift,
                      quantize_activation)
from .network import BatchNorm2d, Conv2d, Linear, ModelConfig, ResNet
from .quantizers import ShiftWeightCode, parse_mode

EXPORT_MAGIC = b"S3MX"
EXPORT_VERSION = 1
ACTIVATION_BITS = 8
AFFINE_BITS = 16

# weight byte: bits 0-1 exponent magnitude (low), bit 2 sign, bit 3 zero flag,
# bit 4 exponent magnitude bit 2 (DeepShift 4-bit reaches 2**-7), bit 5 reserved.
_SIGN_BIT, _ZERO_BIT, _HIGH_BIT = 0x04, 0x08, 0x10


class ExportError(ValueError):
    pass


def encode_weight_bytes(codes: ShiftWeightCode, exponent_sign: int) -> np.ndarray:
    mag = codes.exponent.astype(np.int16) * exponent_sign
    mag = np.where(codes.zero, 0, mag)
    if mag.min(initial=0) < 0 or mag.max(initial=0) > 7:
        raise ExportError("exponent magnitudes must lie in [0, 7] for byte encoding")
    out = (mag & 0x3) | ((mag & 0x4) << 2)
    out = out | np.where(codes.sign < 0, _SIGN_BIT, 0) | np.where(codes.zero, _ZERO_BIT, 0)
    return out.astype(np.uint8)


def decode_weight_bytes(data: np.ndarray, exponent_sign: int) -> ShiftWeightCode:
    data = data.astype(np.int16)
    mag = (data & 0x3) | ((data & _HIGH_BIT) >> 2)
    zero = (data & _ZERO_BIT) != 0
    return ShiftWeightCode(
        zero=zero,
        sign=np.where(data & _SIGN_BIT, -1, 1).astype(np.int8),
        exponent=np.where(zero, 0, mag * exponent_sign).astype(np.int8),
    )


@dataclass
class FoldedAffine:
    """y = x * scale_codes / 2**frac_bits + shift, per channel."""

    scale_codes: np.ndarray  # int16
    frac_bits: int
    shift: np.ndarray  # float32

    @classmethod
    def from_bn(cls, bn: BatchNorm2d) -> "FoldedAffine":
        scale, shift = (a.astype(np.float64) for a in bn.folded())
        amax = float(np.max(np.abs(scale)))
        limit = 2 ** (AFFINE_BITS - 1) - 1
        frac = int(np.floor(np.log2(limit / amax))) if amax > 0 else AFFINE_BITS - 1
        frac = min(frac, 30)
        codes = np.clip(np.round(scale * 2.0 ** frac), -limit, limit).astype(np.int16)
        return cls(codes, frac, shift.astype(np.float32))

    def apply(self, acc: np.ndarray, in_scale: float, counter: OpCounter | None, name: str) -> np.ndarray:
        mult = in_scale * self.scale_codes.astype(np.float64) * 2.0 ** -self.frac_bits
        out = acc.astype(np.float64) * mult[None, :, None, None] + self.shift[None, :, None, None]
        if counter is not None:
            counter.record_affine(name, mults=acc.size, adds=acc.size)
        return out.astype(np.float32)


@dataclass
class WeightEntry:
    name: str
    kind: str  # "conv" or "linear"
    shape: tuple[int, ...]
    spec: ConvSpec | None
    codes: ShiftWeightCode | None = None
    weight: np.ndarray | None = None  # float path (exempt or non-shift layers)


class ShiftEngine:
    """ResNet inference on integer activations and shift-coded weights."""

    def __init__(self, config: ModelConfig, graph: dict, layers: dict[str, WeightEntry],
                 affines: dict[str, FoldedAffine], fc_bias: np.ndarray, exponent_sign: int):
        self.config = config
        self.graph = graph
        self.layers = layers
        self.affines = affines
        self.fc_bias = fc_bias
        self.exponent_sign = exponent_sign

    @property
    def logical_bits(self) -> int:
        return parse_mode(self.config.mode)[1]

    @classmethod
    def from_model(cls, model: ResNet, allow_float: bool = False) -> "ShiftEngine":
        kind, _ = parse_mode(model.config.mode)
        if kind not in ("s", "d") and not allow_float:
            raise ExportError(f"mode {model.config.mode!r} has no shift weights to export")
        layers = {}
        for m in model.weight_layers():
            if isinstance(m, Conv2d):
                entry = WeightEntry(m.name, "conv", m.effective_weight().shape, m.spec)
            else:
                entry = WeightEntry(m.name, "linear", m.effective_weight().shape, None)
            if m.quantizer.is_shift:
                entry.codes = m.quantizer.codes(m._raw())
            else:
                entry.weight = m.effective_weight().astype(np.float32)
            layers[m.name] = entry
        affines = {m.name: FoldedAffine.from_bn(m) for m in model.modules() if isinstance(m, BatchNorm2d)}
        graph = {
            "maxpool": model.pool is not None,
            "blocks": [{"name": b.name, "downsample": b.down_conv is not None} for b in model.blocks],
        }
        return cls(model.config, graph, layers, affines, model.fc.bias.data.astype(np.float32),
                   -1 if kind == "d" else 1)

    # forward -----------------------------------------------------------------
    def _weight_layer(self, name: str, x: np.ndarray, counter: OpCounter | None):
        """Returns (accumulator or float output, scale applied to it)."""
        e = self.layers[name]
        if e.codes is None:
            if e.kind == "conv":
                return conv2d_mul(x, e.weight, e.spec, counter, name), 1.0
            return fc_mul(x, e.weight, counter, name), 1.0
        xq = quantize_activation(x, ACTIVATION_BITS)
        if e.kind == "conv":
            return conv2d_shift(xq, e.codes, e.spec, counter, name)
        return fc_shift(xq, e.codes, counter, name)

    def _conv_bn(self, conv: str, bn: str, x, counter):
        acc, scale = self._weight_layer(conv, x, counter)
        return self.affines[bn].apply(acc, scale, counter, bn)

    def forward(self, x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input (N, 1, H, W), got {x.shape}")
        h = np.maximum(self._conv_bn("stem.conv", "stem.bn", x, counter), 0)
        if self.graph["maxpool"]:
            h = _maxpool3s2(h)
        for blk in self.graph["blocks"]:
            n = blk["name"]
            y = np.maximum(self._conv_bn(f"{n}.conv1", f"{n}.bn1", h, counter), 0)
            y = self._conv_bn(f"{n}.conv2", f"{n}.bn2", y, counter)
            if blk["downsample"]:
                sc = self._conv_bn(f"{n}.downsample.conv", f"{n}.downsample.bn", h, counter)
            else:
                sc = h
            h = np.maximum(y + sc, 0)
        pooled = h.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)
        acc, scale = self._weight_layer("fc", pooled, counter)
        return (acc.astype(np.float64) * scale + self.fc_bias).astype(np.float32)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    # persistence ---------------------------------------------------------------
    def to_bytes(self) -> bytes:
        if any(e.codes is None for e in self.layers.values()) and parse_mode(self.config.mode)[0] not in ("s", "d"):
            raise ExportError("only shift-mode engines can be exported")
        header = {
            "model_config": self.config.to_dict(), "graph": self.graph,
            "logical_bits_per_weight": self.logical_bits, "exponent_sign": self.exponent_sign,
            "activation_bits": ACTIVATION_BITS, "layers": [], "affines": [],
        }
        blobs: list[bytes] = []
        for e in self.layers.values():
            spec = None if e.spec is None else [e.spec.kh, e.spec.kw, e.spec.stride, e.spec.padding]
            rec = {"name": e.name, "kind": e.kind, "shape": list(e.shape), "spec": spec}
            if e.codes is not None:
                rec["encoding"] = "shift8"
                blobs.append(encode_weight_bytes(e.codes, self.exponent_sign).tobytes())
            else:
                rec["encoding"] = "float32"
                blobs.append(e.weight.astype("<f4").tobytes())
            header["layers"].append(rec)
        for name, a in self.affines.items():
            header["affines"].append({"name": name, "channels": len(a.scale_codes), "frac_bits": a.frac_bits})
            blobs.append(a.scale_codes.astype("<i2").tobytes())
            blobs.append(a.shift.astype("<f4").tobytes())
        header["fc_bias_len"] = len(self.fc_bias)
        blobs.append(self.fc_bias.astype("<f4").tobytes())
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return EXPORT_MAGIC + struct.pack("<IQ", EXPORT_VERSION, len(head)) + head + b"".join(blobs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ShiftEngine":
        if raw[:4] != EXPORT_MAGIC:
            raise ExportError(f"not a shift-model file (magic {raw[:4]!r})")
        version, head_len = struct.unpack_from("<IQ", raw, 4)
        if version != EXPORT_VERSION:
            raise ExportError(f"unsupported shift-model version {version}")
        header = json.loads(raw[16 : 16 + head_len].decode("utf-8"))
        pos = 16 + head_len
        sign = header["exponent_sign"]

        def take(n, dtype):
            nonlocal pos
            nbytes = n * np.dtype(dtype).itemsize
            if pos + nbytes > len(raw):
                raise ExportError("truncated shift-model file")
            arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
            pos += nbytes
            return arr

        layers = {}
        for rec in header["layers"]:
            shape = tuple(rec["shape"])
            spec = None if rec["spec"] is None else ConvSpec(*rec["spec"])
            e = WeightEntry(rec["name"], rec["kind"], shape, spec)
            n = int(np.prod(shape))
            if rec["encoding"] == "shift8":
                e.codes = decode_weight_bytes(take(n, "u1").reshape(shape), sign)
            else:
                e.weight = take(n, "<f4").reshape(shape).astype(np.float32)
            layers[e.name] = e
        affines = {}
        for rec in header["affines"]:
            c = rec["channels"]
            affines[rec["name"]] = FoldedAffine(take(c, "<i2").astype(np.int16), rec["frac_bits"],
                                                take(c, "<f4").astype(np.float32))
        bias = take(header["fc_bias_len"], "<f4").astype(np.float32)
        if pos != len(raw):
            raise ExportError("trailing bytes in shift-model file")
        eng = cls(ModelConfig.from_dict(header["model_config"]), header["graph"], layers, affines, bias, sign)
        eng.header = header
        return eng

    @classmethod
    def load(cls, path) -> "ShiftEngine":
        return cls.from_bytes(Path(path).read_bytes())


def _maxpool3s2(x: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    n, c, h, w = x.shape
    spec = ConvSpec(3, 3, 2, 1)
    ho, wo = spec.out_hw(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, : 2 * (ho - 1) + 1 : 2, : 2 * (wo - 1) + 1 : 2]
    return win.max(axis=(-2, -1))
