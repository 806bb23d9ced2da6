"""Analytic parameter and multiply-accumulate accounting.

Conventions (fixed so the totals are comparable across detector reports):
GFLOPs = 2 * MACs / 1e9; convolution MACs = weight count * output cells;
bias adds, activations, pooling and concatenation cost nothing. A
squeeze-excitation gate costs its two projections once per image. A
dynamic 2x upsampler costs its 1x1 offset conv at the input resolution
plus four MACs per output element for the bilinear weighting.

``count_model`` walks the same layer enumeration the builder instantiates,
so the accountant and the model cannot disagree about the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

from .arch import ArchConfig, LayerDecl, graph_spec


def count_conv(c_in: int, c_out: int, k: int, h_out: int, w_out: int,
               bias: bool = True) -> tuple[int, int]:
    """(params, MACs) of a dense convolution at the given output size."""
    if min(c_in, c_out, k, h_out, w_out) < 1:
        raise ValueError("count_conv needs positive dimensions")
    weights = c_out * c_in * k * k
    params = weights + (c_out if bias else 0)
    return params, weights * h_out * w_out


def count_se(c: int, s: int) -> int:
    """Parameter count of a squeeze-excitation gate: 2*C^2/s + C/s + C."""
    if c % s:
        raise ValueError(f"channels {c} not divisible by squeeze ratio {s}")
    squeeze = c // s
    return 2 * c * squeeze + squeeze + c


def se_macs(c: int, s: int) -> int:
    return 2 * c * (c // s)


def count_dysample(c: int, h_in: int, w_in: int, h_out: int, w_out: int) -> tuple[int, int]:
    """(params, MACs) of the dynamic upsampler: offset conv + 4-tap sampling."""
    params, offset_macs = count_conv(c, 8, 1, h_in, w_in)
    return params, offset_macs + 4 * c * h_out * w_out


def pconv_block_savings(c: int, r: int, h: int, w: int) -> tuple[int, int, float]:
    """MACs of a full (3x3 then 1x1) block vs its partial-conv variant.

    full = (9*C^2 + C^2) * H * W; partial applies the 3x3 to C/r channels
    only, so partial = (9*(C/r)^2 + C^2) * H * W. The ratio is resolution
    independent.
    """
    if c % r:
        raise ValueError(f"channels {c} not divisible by ratio {r}")
    full = (9 * c * c + c * c) * h * w
    partial = (9 * (c // r) ** 2 + c * c) * h * w
    return full, partial, partial / full


@dataclass(frozen=True)
class FlopRow:
    name: str
    kind: str
    section: str
    params: int
    macs: int


@dataclass
class FlopReport:
    """Per-layer accounting at a stated input size."""

    input_size: int
    rows: list[FlopRow]

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def gflops(self) -> float:
        return 2.0 * self.macs / 1e9

    def section_totals(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for r in self.rows:
            p, m = out.get(r.section, (0, 0))
            out[r.section] = (p + r.params, m + r.macs)
        return out

    def select(self, kind: str) -> list[FlopRow]:
        return [r for r in self.rows if r.kind == kind]


def count_layer(decl: LayerDecl) -> FlopRow:
    if decl.kind == "conv":
        params, macs = count_conv(decl.c_in, decl.c_out, decl.k, decl.h_out, decl.w_out)
    elif decl.kind == "se":
        params = count_se(decl.c_in, decl.c_in // decl.squeeze)
        macs = se_macs(decl.c_in, decl.c_in // decl.squeeze)
    elif decl.kind == "dysample":
        params, macs = count_dysample(decl.c_in, decl.h_in, decl.w_in,
                                      decl.h_out, decl.w_out)
    else:
        raise ValueError(f"unknown layer kind {decl.kind!r}")
    return FlopRow(name=decl.name, kind=decl.kind, section=decl.section,
                   params=params, macs=macs)


def count_model(cfg: ArchConfig) -> FlopReport:
    """Account every weighted layer of the graph the builder produces."""
    rows = [count_layer(decl) for decl in graph_spec(cfg)]
    return FlopReport(input_size=cfg.input_size, rows=rows)


def dysample_gflops(report: FlopReport) -> float:
    """Summed cost of all dynamic upsamplers, in GFLOPs."""
    return 2.0 * sum(r.macs for r in report.select("dysample")) / 1e9
