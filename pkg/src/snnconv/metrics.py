"""Operation counting, the energy model, and output comparison.

The energy model charges every synaptic event in the spike network as one
accumulate (AC) and every reference-network multiply-accumulate as one MAC,
with the analog first-layer injection counted as MACs on the spike side
too (one per input pixel). Bias additions are excluded on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import ModelGraph
from .engine import RunResult

# float32 op energies, picojoules
E_MAC_PJ = 4.6
E_AC_PJ = 0.9


@dataclass(frozen=True)
class EnergyConstants:
    """Per-op energies in picojoules. Package constants by default; a config
    file may override them, the CLI flags deliberately cannot."""

    mac_pj: float = E_MAC_PJ
    ac_pj: float = E_AC_PJ


def count_ann_flops(graph: ModelGraph) -> dict:
    """MACs per layer for the reference network.

    conv and convtranspose cost out_elems * in_ch * kh * kw; everything else
    (relu, maxpool, concat, batchnorm, output) counts zero.
    """
    per_layer: dict[str, int] = {}
    for l in graph.layers:
        if l.kind in ("conv", "convtranspose"):
            out_c, oh, ow = graph.shapes[l.id]
            _, in_ch, kh, kw = l.weights.shape
            per_layer[l.id] = out_c * oh * ow * in_ch * kh * kw
        else:
            per_layer[l.id] = 0
    return {"per_layer": per_layer, "total_macs": sum(per_layer.values())}


def count_snn_flops(result: RunResult) -> dict:
    """AC and input-MAC totals for one spike run.

    ACs are the summed spike counts of emitting stages (linear and maxpool
    re-encode); concat restacks existing spikes and is not counted again.
    The analog input injection costs one MAC per input pixel.
    """
    per_layer = {s.layer_id: s.spike_total for s in result.stages if s.emitting}
    input_macs = int(np.prod(result.input_shape))
    return {
        "per_layer": per_layer,
        "ac_total": int(sum(per_layer.values())),
        "input_macs": input_macs,
    }


def fanout_weighted_ac(result: RunResult, graph: ModelGraph) -> float:
    """Alternative accounting: spikes weighted by mean synaptic fan-out.

    Each emitting layer's spikes are multiplied by the average number of
    weights a spike feeds downstream (consumer MACs / consumer input elems).
    Not part of the reference energy model; reported for comparison only.
    """
    flops = count_ann_flops(graph)
    sums = {s.layer_id: s.spike_total for s in result.stages}
    total = 0.0
    for l in graph.layers:
        if l.kind not in ("conv", "convtranspose"):
            continue
        src = l.inputs[0]
        # walk back through relu to the emitting layer
        while src in graph.by_id and graph.by_id[src].kind == "relu":
            src = graph.by_id[src].inputs[0]
        if src not in sums:
            continue
        in_elems = int(np.prod(graph.shapes[src]))
        total += sums[src] * (flops["per_layer"][l.id] / in_elems)
    return total


@dataclass(frozen=True)
class EnergyReport:
    ann_macs: int
    snn_ac: int
    input_macs: int
    energy_ann_j: float
    energy_snn_j: float
    ratio: float

    def to_json(self) -> dict:
        return {
            "ann_macs": self.ann_macs,
            "snn_ac": self.snn_ac,
            "input_macs": self.input_macs,
            "energy_ann_j": self.energy_ann_j,
            "energy_snn_j": self.energy_snn_j,
            "ratio": self.ratio,
        }


def energy_report(
    ann_macs: int,
    snn_ac: int,
    input_macs: int,
    constants: EnergyConstants = EnergyConstants(),
) -> EnergyReport:
    """Joule totals for both networks under the per-op energy constants."""
    e_ann = ann_macs * constants.mac_pj * 1e-12
    e_snn = snn_ac * constants.ac_pj * 1e-12 + input_macs * constants.mac_pj * 1e-12
    return EnergyReport(
        ann_macs=int(ann_macs),
        snn_ac=int(snn_ac),
        input_macs=int(input_macs),
        energy_ann_j=e_ann,
        energy_snn_j=e_snn,
        ratio=e_snn / e_ann if e_ann > 0 else float("inf"),
    )


@dataclass(frozen=True)
class ComparisonResult:
    max_abs: float
    mse: float
    argmax_agree: bool

    def to_json(self) -> dict:
        return {"max_abs": self.max_abs, "mse": self.mse, "argmax_agree": self.argmax_agree}


def compare_outputs(reference: np.ndarray, actual: np.ndarray) -> ComparisonResult:
    """Error record between a reference tensor and a decoded tensor."""
    reference = np.asarray(reference, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if reference.shape != actual.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {actual.shape}")
    diff = actual - reference
    return ComparisonResult(
        max_abs=float(np.abs(diff).max()),
        mse=float(np.mean(diff * diff)),
        argmax_agree=bool(int(reference.argmax()) == int(actual.argmax())),
    )
