"""Multiply-accumulate and parameter accounting for plain and aggregation layers.

One MAC is one multiply-accumulate; FLOPs are reported as ``2 * MACs``.  All
MAC figures are per input image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backbone import Model, PlainConv, bn_name, conv_specs
from .io import write_rows_csv
from .layers import AdaAggLayer, gate_hidden_width

CSV_HEADER = (
    "layer", "phase", "base_macs", "align_macs", "gating_macs", "agg_macs",
    "params_sources", "params_align", "params_gates", "params_bn", "params_head",
)
PHASES_PLAIN = ("train", "inference")
PHASES_ZOO = ("train", "inference_full", "inference_lite")


@dataclass(frozen=True)
class LayerDims:
    c_out: int
    c_in: int
    k: int
    h: int
    w: int
    stride: int = 1
    padding: int = 0
    m: int = 1

    def __post_init__(self):
        if min(self.c_out, self.c_in, self.k, self.h, self.w, self.stride, self.m) < 1 or self.padding < 0:
            raise ValueError(f"invalid layer dimensions {self}")

    @property
    def out_hw(self) -> tuple[int, int]:
        ho = (self.h + 2 * self.padding - self.k) // self.stride + 1
        wo = (self.w + 2 * self.padding - self.k) // self.stride + 1
        return ho, wo


def conv_base_macs(d: LayerDims) -> int:
    ho, wo = d.out_hw
    return ho * wo * d.k * d.k * d.c_out * d.c_in


def adaagg_overhead_macs(
    d: LayerDims, phase: str, gate_hidden: int | None = None, *, align: bool = True, gated: bool = True
) -> dict[str, int]:
    """Extra MACs of one aggregation layer on top of its convolution.

    Alignment is input-independent, so it is free at inference (precomputed).
    """
    if phase not in ("train", "inference"):
        raise ValueError(f"phase must be 'train' or 'inference', got {phase!r}")
    hidden = gate_hidden if gate_hidden is not None else gate_hidden_width(d.c_in)
    kk = d.k * d.k
    return {
        "align": d.m * kk * d.c_out * d.c_out * d.c_in if (phase == "train" and align) else 0,
        "gating": d.h * d.w * d.c_in + d.m * (d.c_in * hidden + hidden) if gated else 0,
        "aggregation": d.m * kk * d.c_out * d.c_in,
    }


def gating_envelope_macs(d: LayerDims) -> int:
    """The coarse ``HW*C_in + m*C_in^2`` order term, for comparison with the exact count."""
    return d.h * d.w * d.c_in + d.m * d.c_in * d.c_in


def _gate_params(layer: AdaAggLayer) -> int:
    return sum(arr.size for g in layer.gates for _, arr in g.named_params())


def _head_params(model: Model) -> int:
    return model.head_weight.size + model.head_bias.size


def _bn_params(model: Model, conv: str) -> int:
    bn = model.bns[bn_name(conv)]
    return bn.gamma.size + bn.beta.size


def _layer_params(model: Model, name: str, phase: str) -> dict[str, int]:
    conv = model.convs[name]
    row = {"sources": 0, "align": 0, "gates": 0, "bn": _bn_params(model, name), "head": 0}
    if isinstance(conv, PlainConv):
        row["sources"] = conv.weight.size
        return row
    one = conv.sources[0].size + (conv.biases[0].size if conv.biases is not None else 0)
    if phase == "inference_lite":
        row["sources"] = one
        return row
    row["sources"] = conv.m * one
    if conv.align_enabled and phase == "train":
        row["align"] = sum(t.size for t in conv.alignments)
    if conv.uses_gates():
        row["gates"] = _gate_params(conv)
    return row


def count_params(model: Model, phase: str = "train") -> dict[str, int]:
    """Parameter counts by group; BN counts only the learnable scale and shift."""
    valid = PHASES_ZOO if model.is_zoo else PHASES_PLAIN + PHASES_ZOO
    if phase not in valid:
        raise ValueError(f"unknown phase {phase!r}")
    totals = {"sources": 0, "align": 0, "gates": 0, "bn": 0, "head": _head_params(model)}
    for name in model.convs:
        for k, v in _layer_params(model, name, phase).items():
            totals[k] += v
    totals["total"] = sum(totals.values())
    return totals


@dataclass
class ReportRow:
    layer: str
    phase: str
    base_macs: int = 0
    align_macs: int = 0
    gating_macs: int = 0
    agg_macs: int = 0
    params_sources: int = 0
    params_align: int = 0
    params_gates: int = 0
    params_bn: int = 0
    params_head: int = 0
    gating_envelope_macs: int = 0

    @property
    def macs(self) -> int:
        return self.base_macs + self.align_macs + self.gating_macs + self.agg_macs

    @property
    def params(self) -> int:
        return self.params_sources + self.params_align + self.params_gates + self.params_bn + self.params_head

    def csv_row(self) -> tuple:
        return tuple(getattr(self, k) for k in CSV_HEADER)


@dataclass
class ComplexityReport:
    rows: list[ReportRow] = field(default_factory=list)
    totals: dict[str, ReportRow] = field(default_factory=dict)

    def phase_rows(self, phase: str) -> list[ReportRow]:
        return [r for r in self.rows if r.phase == phase]

    def total_macs(self, phase: str) -> int:
        return self.totals[phase].macs

    def total_params(self, phase: str) -> int:
        return self.totals[phase].params

    def write_csv(self, path) -> None:
        rows = [r.csv_row() for r in self.rows] + [t.csv_row() for t in self.totals.values()]
        write_rows_csv(path, CSV_HEADER, rows)


def _row(model: Model, spec, side_in: int, phase: str) -> ReportRow:
    conv = model.convs[spec.name]
    d = LayerDims(spec.c_out, spec.c_in, spec.k, side_in, side_in, spec.stride, spec.padding,
                  conv.m if isinstance(conv, AdaAggLayer) else 1)
    row = ReportRow(spec.name, phase, base_macs=conv_base_macs(d))
    params = _layer_params(model, spec.name, phase if model.is_zoo else "train")
    row.params_sources, row.params_align, row.params_gates, row.params_bn = (
        params["sources"], params["align"], params["gates"], params["bn"],
    )
    if isinstance(conv, AdaAggLayer) and phase != "inference_lite":
        over = adaagg_overhead_macs(
            d, "train" if phase == "train" else "inference", conv.gates[0].hidden,
            align=conv.align_enabled, gated=conv.uses_gates(),
        )
        row.align_macs, row.gating_macs, row.agg_macs = over["align"], over["gating"], over["aggregation"]
        if conv.uses_gates():
            row.gating_envelope_macs = gating_envelope_macs(d)
    return row


def report(model: Model, side: int | None = None) -> ComplexityReport:
    """Per-layer and total MACs/params for every phase the model supports."""
    config = model.config
    side = side if side is not None else config.side
    scale_cfg = config if side == config.side else type(config)(**{**config.__dict__, "side": side})
    phases = PHASES_ZOO if model.is_zoo else PHASES_PLAIN
    out = ComplexityReport()
    for phase in phases:
        for spec in conv_specs(scale_cfg):
            out.rows.append(_row(model, spec, spec.side_in, phase))
        head = ReportRow("head", phase, base_macs=model.head_weight.size, params_head=_head_params(model))
        out.rows.append(head)
        total = ReportRow("total", phase)
        for r in out.phase_rows(phase):
            for k in CSV_HEADER[2:] + ("gating_envelope_macs",):
                setattr(total, k, getattr(total, k) + getattr(r, k))
        out.totals[phase] = total
    return out
