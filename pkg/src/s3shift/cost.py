"""Static and observed operation counts, weight-memory accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .engine import ShiftEngine
from .kernels import ConvSpec, OpCounter
from .network import ARCHS, ModelConfig, ResNet, block_plan
from .quantizers import parse_mode


@dataclass
class LayerCost:
    name: str
    mults: int = 0
    shifts: int = 0
    adds: int = 0
    weight_count: int = 0
    bits_per_weight: int = 32

    @property
    def memory_bits(self) -> int:
        return self.weight_count * self.bits_per_weight

    def to_dict(self) -> dict:
        return {"name": self.name, "mults": self.mults, "shifts": self.shifts, "adds": self.adds,
                "weight_count": self.weight_count, "weight_bits": self.bits_per_weight,
                "memory_bits": self.memory_bits}


def _is_shift(mode: str) -> bool:
    return parse_mode(mode)[0] in ("s", "d")


def count_conv(spec: ConvSpec, in_shape: tuple[int, ...], cout: int, mode: str = "fp32",
               name: str = "conv") -> LayerCost:
    """MACs = Cout*Cin*kh*kw*Hout*Wout per sample (times N if a batch dim is given).

    Padded positions are counted: they are part of the fixed loop the kernels execute.
    """
    n, (cin, h, w) = (in_shape[0], in_shape[1:]) if len(in_shape) == 4 else (1, in_shape)
    ho, wo = spec.out_hw(h, w)
    macs = n * cout * cin * spec.kh * spec.kw * ho * wo
    shift = _is_shift(mode)
    return LayerCost(name, mults=0 if shift else macs, shifts=macs if shift else 0, adds=macs,
                     weight_count=cout * cin * spec.kh * spec.kw, bits_per_weight=parse_mode(mode)[1])


def count_fc(in_features: int, out_features: int, mode: str = "fp32", name: str = "fc",
             batch: int = 1) -> LayerCost:
    macs = batch * in_features * out_features
    shift = _is_shift(mode)
    return LayerCost(name, mults=0 if shift else macs, shifts=macs if shift else 0, adds=macs,
                     weight_count=in_features * out_features, bits_per_weight=parse_mode(mode)[1])


def trace_layers(config: ModelConfig, input_hw: tuple[int, int]) -> list[LayerCost]:
    """Per-layer static costs for one input of spatial size ``input_hw``."""
    arch = ARCHS[config.arch]
    mode = config.mode
    first_mode = mode if config.quantize_first else "fp32"
    last_mode = mode if config.quantize_last else "fp32"
    h, w = input_hw
    width0 = arch["widths"][0]
    stem = ConvSpec(arch["stem"][0], arch["stem"][0], arch["stem"][1], arch["stem"][2])
    costs = [count_conv(stem, (config.in_channels, h, w), width0, first_mode, "stem.conv")]
    h, w = stem.out_hw(h, w)
    if arch["maxpool"]:
        h, w = ConvSpec(3, 3, 2, 1).out_hw(h, w)
    for name, cin, cout, stride in block_plan(config.arch):
        c1 = ConvSpec(3, 3, stride, 1)
        costs.append(count_conv(c1, (cin, h, w), cout, mode, f"{name}.conv1"))
        ho, wo = c1.out_hw(h, w)
        costs.append(count_conv(ConvSpec(3, 3, 1, 1), (cout, ho, wo), cout, mode, f"{name}.conv2"))
        if stride != 1 or cin != cout:
            costs.append(count_conv(ConvSpec(1, 1, stride, 0), (cin, h, w), cout, mode,
                                    f"{name}.downsample.conv"))
        h, w = ho, wo
    costs.append(count_fc(arch["widths"][-1], config.n_classes, last_mode, "fc"))
    return costs


@dataclass
class CostReport:
    config: ModelConfig
    input_hw: tuple[int, int]
    layers: list[LayerCost]

    def totals(self) -> dict[str, int]:
        keys = ("mults", "shifts", "adds", "weight_count", "memory_bits")
        return {k: int(sum(getattr(l, k) for l in self.layers)) for k in keys}

    @property
    def compression_ratio(self) -> float:
        fp_bits = sum(32 * l.weight_count for l in self.layers)
        return fp_bits / sum(l.memory_bits for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "model": self.config.to_dict(), "input_hw": list(self.input_hw),
            "layers": [l.to_dict() for l in self.layers], "totals": self.totals(),
            "compression_ratio_vs_fp32": self.compression_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        head = f"{'layer':<28}{'mults':>14}{'shifts':>14}{'adds':>14}{'weights':>11}{'bits':>6}{'mem_bits':>14}"
        lines = [head, "-" * len(head)]
        for l in self.layers:
            lines.append(f"{l.name:<28}{l.mults:>14}{l.shifts:>14}{l.adds:>14}{l.weight_count:>11}"
                         f"{l.bits_per_weight:>6}{l.memory_bits:>14}")
        t = self.totals()
        lines.append("-" * len(head))
        lines.append(f"{'total':<28}{t['mults']:>14}{t['shifts']:>14}{t['adds']:>14}{t['weight_count']:>11}"
                     f"{'':>6}{t['memory_bits']:>14}")
        lines.append(f"weight-memory compression vs fp32: {self.compression_ratio:.4f}x")
        return "\n".join(lines)


def model_report(config: ModelConfig, input_hw: tuple[int, int] = (128, 400)) -> CostReport:
    return CostReport(config, tuple(input_hw), trace_layers(config, input_hw))


def runtime_counters(model: ResNet | ShiftEngine, x: np.ndarray) -> OpCounter:
    """Counts gathered while actually running an inference forward pass."""
    engine = model if isinstance(model, ShiftEngine) else ShiftEngine.from_model(model, allow_float=True)
    counter = OpCounter()
    engine.forward(x, counter)
    return counter
