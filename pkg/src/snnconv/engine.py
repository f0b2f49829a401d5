"""Phased integrate-and-fire engine with temporal separation.

Every layer consumes its whole incoming spike train (accumulate phase)
before emitting any spike of its own (fire phase); there is no interleaving
across layers. Membrane arithmetic runs in float64 even though weights are
stored float32: floor() at unit boundaries is the one numerically brittle
spot, and the wider accumulator keeps the exactness properties testable.

Spike trains are (steps, C, H, W) int64 count arrays. A count k at one
step is a burst carrying k units under rate coding; under the time-weighted
scheme ("stdi") a spike at step t carries (steps - t + 1) units, so early
steps move many units at once.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .convert import INPUT_SOURCE, CodingConfig, SnnPlan, V_THR
from .errors import ValidationError
from .tensor_ops import conv2d, convtranspose2d, maxpool2d


class NeuronLayerState:
    """Membrane state of one layer with one-way phase transitions.

    accumulating -> firing -> fired. Accumulating after firing has begun, or
    firing twice, is a phase violation and raises.
    """

    __slots__ = ("v_mem", "phase")

    def __init__(self, shape):
        self.v_mem = np.zeros(shape, dtype=np.float64)
        self.phase = "accumulating"

    def accumulate(self, delta: np.ndarray) -> None:
        if self.phase != "accumulating":
            raise RuntimeError(f"phase violation: accumulate during '{self.phase}' phase")
        self.v_mem = self.v_mem + np.asarray(delta, dtype=np.float64)

    def begin_firing(self, v_init: float = 0.0) -> None:
        """Close the accumulate phase: clamp negative potential to zero,
        then add the firing-phase membrane offset (linear layers only)."""
        if self.phase != "accumulating":
            raise RuntimeError(f"phase violation: begin_firing during '{self.phase}' phase")
        np.maximum(self.v_mem, 0.0, out=self.v_mem)
        if v_init:
            self.v_mem += v_init
        self.phase = "firing"


def _take_firing(state: NeuronLayerState) -> None:
    if state.phase == "accumulating":
        state.begin_firing(0.0)
    elif state.phase != "firing":
        raise RuntimeError(f"phase violation: fire during '{state.phase}' phase")


def fire_phase_rate(
    state: NeuronLayerState, coding: CodingConfig, v_thr: float = V_THR
) -> np.ndarray:
    """Drain the membrane as capped bursts, one step at a time.

    Per step: k = floor(V / v_thr), burst s = min(k, cap), V -= s * v_thr.
    The cap is the compression factor (optionally lowered by burst_cap).
    Returns the (steps, ...) int64 train; the residual stays in state.v_mem.
    """
    _take_firing(state)
    v = state.v_mem
    cap = float(coding.rate_cap)
    train = np.empty((coding.steps, *v.shape), dtype=np.int64)
    for t in range(coding.steps):
        s = np.minimum(np.floor(v / v_thr), cap).astype(np.int64)
        train[t] = s
        v = v - s * v_thr
    state.v_mem = v
    state.phase = "fired"
    return train


def fire_phase_stdi(
    state: NeuronLayerState, coding: CodingConfig, v_thr: float = V_THR
) -> np.ndarray:
    """Drain the membrane against the step countdown.

    Step t (1-based) fires s = floor(V / tau) with tau = (steps - t + 1) *
    v_thr and subtracts s * tau, so one early spike can move many units.
    Uncapped unless burst_cap is set. After the last step (tau = v_thr) the
    residual is below one unit for every neuron.
    """
    _take_firing(state)
    v = state.v_mem
    train = np.empty((coding.steps, *v.shape), dtype=np.int64)
    for t in range(coding.steps):
        tau = (coding.steps - t) * v_thr
        s = np.floor(v / tau)
        if coding.burst_cap is not None:
            s = np.minimum(s, float(coding.burst_cap))
        s = s.astype(np.int64)
        train[t] = s
        v = v - s * tau
    state.v_mem = v
    state.phase = "fired"
    return train


def fire_phase(state: NeuronLayerState, coding: CodingConfig, v_thr: float = V_THR) -> np.ndarray:
    if coding.scheme == "rate":
        return fire_phase_rate(state, coding, v_thr)
    return fire_phase_stdi(state, coding, v_thr)


@dataclass(frozen=True)
class InjectionPlan:
    """First-layer input drive: analog values, no spikes.

    rate: `values` (compression * x) is injected at each of `steps` steps.
    time-weighted: `values` (timesteps * x) is delivered once up front.
    """

    mode: str  # "per-step" | "one-shot"
    values: np.ndarray
    steps: int


def encode_input(x: np.ndarray, coding: CodingConfig) -> InjectionPlan:
    """Build the injection plan for a [0, 1] input tensor."""
    x = np.asarray(x)
    if not np.isfinite(x).all():
        raise ValidationError("input contains non-finite values")
    if x.size and (float(x.min()) < 0.0 or float(x.max()) > 1.0):
        raise ValidationError(
            f"input values must lie in [0, 1], got range "
            f"[{float(x.min()):g}, {float(x.max()):g}]; rescale before encoding"
        )
    x64 = x.astype(np.float64)
    if coding.scheme == "rate":
        return InjectionPlan("per-step", float(coding.compression) * x64, coding.steps)
    return InjectionPlan("one-shot", float(coding.timesteps) * x64, 1)


def weighted_units(train: np.ndarray, coding: CodingConfig) -> np.ndarray:
    """Total units carried by a train, per neuron: sum of count * step weight."""
    w = coding.step_unit_weights()
    if train.shape[0] != w.shape[0]:
        raise ValidationError(
            f"train has {train.shape[0]} steps, coding expects {w.shape[0]}"
        )
    return np.tensordot(w, train.astype(np.int64), axes=(0, 0))


def decode_output(train: np.ndarray, coding: CodingConfig) -> np.ndarray:
    """Decode a train to firing ratios: weighted units / timesteps."""
    return weighted_units(train, coding).astype(np.float64) / float(coding.timesteps)


def single_neuron_oracle(
    injections,
    coding: CodingConfig,
    v_init: float = 0.0,
    v_thr: float = V_THR,
) -> tuple[list[int], float]:
    """Deliberately naive scalar reference for one neuron.

    Rate coding integrates and fires step by step (inject, then burst if the
    membrane clears threshold). The time-weighted scheme is two-phase by
    construction: injections are integrated with their step weights first,
    negatives are cleared, then the countdown drain runs. Returns (per-step
    spike counts, residual membrane).
    """
    steps = coding.steps
    if len(injections) != steps:
        raise ValidationError(f"need {steps} per-step injections, got {len(injections)}")
    counts: list[int] = []
    if coding.scheme == "rate":
        v = float(v_init)
        cap = coding.rate_cap
        for t in range(steps):
            v += float(injections[t])
            s = 0
            if v >= v_thr:
                s = min(math.floor(v / v_thr), cap)
            counts.append(s)
            v -= s * v_thr
        return counts, v
    v = float(v_init)
    for t in range(steps):
        v += float(injections[t]) * (steps - t)
    v = max(v, 0.0)
    for t in range(steps):
        tau = (steps - t) * v_thr
        s = math.floor(v / tau)
        if coding.burst_cap is not None:
            s = min(s, coding.burst_cap)
        counts.append(s)
        v -= s * tau
    return counts, v


def _pooled_units(
    unit_sums: np.ndarray,
    m_in: np.ndarray,
    m_out: np.ndarray,
    kernel: int,
    stride: int | None,
    padding: int,
) -> np.ndarray:
    """Phases 1-4 of spike maxpooling on already-summed units.

    Restore to activation scale by max_in, take window maxima, rescale into
    the consumer's units by max_out. When max_in == max_out channel-wise the
    two scalings cancel exactly and are skipped, keeping integer unit flows
    integral (max commutes with positive per-channel scaling).
    """
    m_in = np.asarray(m_in, dtype=np.float64)
    m_out = np.asarray(m_out, dtype=np.float64)
    u = unit_sums.astype(np.float64)
    if m_in.shape != (u.shape[0],) or m_out.shape != (u.shape[0],):
        raise ValidationError(
            f"maxpool stats must have {u.shape[0]} channels, "
            f"got {m_in.shape} and {m_out.shape}"
        )
    if np.array_equal(m_in, m_out):
        return maxpool2d(u, kernel, stride, padding)
    restored = u * m_in[:, None, None]
    pooled = maxpool2d(restored, kernel, stride, padding)
    return pooled / m_out[:, None, None]


def spike_maxpool(
    train: np.ndarray,
    coding: CodingConfig,
    m_in: np.ndarray,
    m_out: np.ndarray,
    kernel: int,
    stride: int | None = None,
    padding: int = 0,
    v_thr: float = V_THR,
) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool a spike train via decoded membrane potentials.

    Decode the incoming train to raw units, restore by max_in, pool, rescale
    by max_out, then re-fire through the active scheme. The re-fire gets no
    membrane offset: these are decoded potentials, not accumulating neurons.
    Returns (outgoing train, residual potential).
    """
    u_in = weighted_units(train, coding)
    pooled = _pooled_units(u_in, m_in, m_out, kernel, stride, padding)
    state = NeuronLayerState(pooled.shape)
    state.accumulate(pooled)
    state.begin_firing(0.0)
    out = fire_phase(state, coding, v_thr)
    return out, state.v_mem


@dataclass
class StageReport:
    """Telemetry for one executed stage."""

    layer_id: str
    kind: str
    spike_total: int
    emitting: bool
    residual_min: float
    residual_mean: float
    residual_max: float
    decoded_channel_max: list[float]
    wall_accumulate_ms: float
    wall_fire_ms: float


@dataclass
class RunResult:
    """Everything one spike run produced."""

    coding: CodingConfig
    input_shape: tuple[int, int, int]
    outputs: dict[str, np.ndarray]
    stages: list[StageReport]
    total_spikes: int
    trains: dict[str, np.ndarray] | None = None
    decoded: dict[str, np.ndarray] = field(default_factory=dict)

    def stage_report(self, layer_id: str) -> StageReport:
        for s in self.stages:
            if s.layer_id == layer_id:
                return s
        raise KeyError(f"no stage report for layer '{layer_id}'")

    def to_json(self) -> dict:
        return {
            "coding": {
                "scheme": self.coding.scheme,
                "timesteps": self.coding.timesteps,
                "compression": self.coding.compression,
                "burst_cap": self.coding.burst_cap,
            },
            "input_shape": list(self.input_shape),
            "total_spikes": self.total_spikes,
            "stages": [
                {
                    "layer_id": s.layer_id,
                    "kind": s.kind,
                    "emitting": s.emitting,
                    "spike_total": s.spike_total,
                    "residual": {
                        "min": s.residual_min,
                        "mean": s.residual_mean,
                        "max": s.residual_max,
                    },
                    "decoded_channel_max": s.decoded_channel_max,
                    "wall_ms": {
                        "accumulate": s.wall_accumulate_ms,
                        "fire": s.wall_fire_ms,
                    },
                }
                for s in self.stages
            ],
            "outputs": {
                lid: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
                for lid, v in self.outputs.items()
            },
        }


def _residual_stats(v: np.ndarray) -> tuple[float, float, float]:
    return float(v.min()), float(v.mean()), float(v.max())


def run_snn(plan: SnnPlan, x: np.ndarray, collect_trains: bool = False) -> RunResult:
    """Execute a stage schedule on one input tensor.

    Stages run in topological order; each finishes its accumulate phase
    (consuming complete predecessor trains) before firing. Because of that
    separation a predecessor's train is fully summarized by its per-neuron
    unit totals, which is what flows between stages here; full trains are
    kept only when collect_trains is set.
    """
    x = np.asarray(x)
    if x.shape != plan.input_shape:
        raise ValidationError(f"input shape {x.shape} does not match plan {plan.input_shape}")
    coding = plan.coding
    inj = encode_input(x, coding)
    t_total = float(coding.timesteps)
    unit_sums: dict[str, np.ndarray] = {}
    trains: dict[str, np.ndarray] = {}
    outputs: dict[str, np.ndarray] = {}
    decoded: dict[str, np.ndarray] = {}
    reports: list[StageReport] = []
    total_spikes = 0
    for stage in plan.stages:
        if stage.kind == "spike-linear":
            t0 = time.perf_counter()
            lin = conv2d if stage.op == "conv" else convtranspose2d
            if stage.inputs[0] == INPUT_SOURCE:
                contrib = lin(inj.values, stage.weights, stride=stage.stride, padding=stage.padding)
                if inj.mode == "per-step":
                    contrib = contrib * float(inj.steps)
            else:
                incoming = unit_sums[stage.inputs[0]].astype(np.float64)
                contrib = lin(incoming, stage.weights, stride=stage.stride, padding=stage.padding)
            state = NeuronLayerState(stage.out_shape)
            state.accumulate(contrib + float(coding.steps) * stage.bias_step[:, None, None])
            t1 = time.perf_counter()
            state.begin_firing(plan.v_init * plan.v_thr)
            train = fire_phase(state, coding, plan.v_thr)
            t2 = time.perf_counter()
            units = weighted_units(train, coding)
            unit_sums[stage.layer_id] = units
            spike_total = int(train.sum())
            total_spikes += spike_total
            if collect_trains:
                trains[stage.layer_id] = train
            res = _residual_stats(state.v_mem)
            dec = units.astype(np.float64) / t_total
            decoded[stage.layer_id] = dec
            reports.append(
                StageReport(
                    stage.layer_id, stage.kind, spike_total, True, *res,
                    [float(v) for v in dec.max(axis=(1, 2))],
                    (t1 - t0) * 1e3, (t2 - t1) * 1e3,
                )
            )
        elif stage.kind == "spike-maxpool":
            t0 = time.perf_counter()
            pooled = _pooled_units(
                unit_sums[stage.inputs[0]],
                stage.m_in,
                stage.m_out,
                stage.kernel,
                stage.stride,
                stage.padding,
            )
            t1 = time.perf_counter()
            state = NeuronLayerState(pooled.shape)
            state.accumulate(pooled)
            state.begin_firing(0.0)
            train = fire_phase(state, coding, plan.v_thr)
            t2 = time.perf_counter()
            units = weighted_units(train, coding)
            unit_sums[stage.layer_id] = units
            spike_total = int(train.sum())
            total_spikes += spike_total
            if collect_trains:
                trains[stage.layer_id] = train
            res = _residual_stats(state.v_mem)
            dec = units.astype(np.float64) / t_total
            decoded[stage.layer_id] = dec
            reports.append(
                StageReport(
                    stage.layer_id, stage.kind, spike_total, True, *res,
                    [float(v) for v in dec.max(axis=(1, 2))],
                    (t1 - t0) * 1e3, (t2 - t1) * 1e3,
                )
            )
        elif stage.kind == "spike-concat":
            t0 = time.perf_counter()
            units = np.concatenate([unit_sums[i] for i in stage.inputs], axis=0)
            unit_sums[stage.layer_id] = units
            if collect_trains:
                trains[stage.layer_id] = np.concatenate(
                    [trains[i] for i in stage.inputs], axis=1
                )
            t1 = time.perf_counter()
            dec = units.astype(np.float64) / t_total
            decoded[stage.layer_id] = dec
            reports.append(
                StageReport(
                    stage.layer_id, stage.kind, 0, False, 0.0, 0.0, 0.0,
                    [float(v) for v in dec.max(axis=(1, 2))],
                    (t1 - t0) * 1e3, 0.0,
                )
            )
        elif stage.kind == "output-decode":
            t0 = time.perf_counter()
            units = unit_sums[stage.inputs[0]]
            out = units.astype(np.float64) / t_total
            outputs[stage.layer_id] = out
            t1 = time.perf_counter()
            reports.append(
                StageReport(
                    stage.layer_id, stage.kind, 0, False, 0.0, 0.0, 0.0,
                    [float(v) for v in out.max(axis=(1, 2))],
                    (t1 - t0) * 1e3, 0.0,
                )
            )
        else:
            raise ValidationError(f"unknown stage kind '{stage.kind}'")
    return RunResult(
        coding=coding,
        input_shape=plan.input_shape,
        outputs=outputs,
        stages=reports,
        total_spikes=total_spikes,
        trains=trains if collect_trains else None,
        decoded=decoded,
    )
