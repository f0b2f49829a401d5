"""Weight normalization and execution planning for the spike engine.

Normalization rescales each linear layer so activations become firing
ratios in [0, 1] whenever they stay under the sampled maxima:

    w'[j, i] = w[j, i] * max_in[i] / max_out[j]
    b'[j]    = b[j] / max_out[j]                  (bias_rule "max_out")

max_in is the predecessor layer's per-channel maxima (1.0 at the input by
convention), max_out the layer's own. The alternative bias_rule
"max_in_max_out" scales b by max(max_in) / max_out instead; it breaks the
normalized-forward equivalence whenever predecessor maxima differ from 1 and
exists so that failure can be demonstrated, not for use.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .graph import LayerSpec, ModelGraph, ann_forward
from .model_io import load_model, save_model
from .stats import NormStats
from .tensor_ops import concat_channels, conv2d, convtranspose2d, maxpool2d, relu

V_THR = 1.0
V_INIT_FRACTION = 0.5
BIAS_RULES = ("max_out", "max_in_max_out")
SCHEMES = ("rate", "stdi")

# sentinel stage-input id meaning "the encoded network input"
INPUT_SOURCE = "<input>"


@dataclass(frozen=True)
class CodingConfig:
    """Spike-coding parameters for one run.

    timesteps is the uncompressed step budget T; compression packs it into
    timesteps/compression simulated steps whose bursts carry up to
    `compression` units each (rate scheme). burst_cap optionally limits the
    per-step burst magnitude; rate defaults to `compression`, the
    time-weighted scheme defaults to unbounded.
    """

    scheme: str
    timesteps: int
    compression: int = 1
    burst_cap: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown coding scheme '{self.scheme}', expected one of {SCHEMES}")
        if self.timesteps < 1:
            raise ValidationError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.compression < 1:
            raise ValidationError(f"compression must be >= 1, got {self.compression}")
        if self.timesteps % self.compression != 0:
            raise ValidationError(
                f"compression {self.compression} must divide timesteps {self.timesteps}"
            )
        if self.burst_cap is not None and self.burst_cap < 1:
            raise ValidationError(f"burst_cap must be >= 1, got {self.burst_cap}")

    @property
    def steps(self) -> int:
        """Simulated step count per layer phase."""
        return self.timesteps // self.compression

    @property
    def rate_cap(self) -> int:
        cap = self.compression
        if self.burst_cap is not None:
            cap = min(cap, self.burst_cap)
        return cap

    def step_unit_weights(self) -> np.ndarray:
        """Units carried by one spike at each step: 1 under rate, step
        countdown (steps, steps-1, ..., 1) under the time-weighted scheme."""
        if self.scheme == "rate":
            return np.ones(self.steps, dtype=np.int64)
        return np.arange(self.steps, 0, -1, dtype=np.int64)


@dataclass(frozen=True)
class ConvertedModel:
    """A normalized graph plus the stats that produced it."""

    graph: ModelGraph
    stats: NormStats
    bias_rule: str = "max_out"
    v_thr: float = V_THR
    v_init: float = V_INIT_FRACTION  # fraction of v_thr, linear spike layers only


def _check_convertible(graph: ModelGraph) -> None:
    if graph.has_batchnorm():
        raise ValidationError("model still contains batchnorm layers; fold them before converting")
    for l in graph.layers:
        if l.kind in ("conv", "convtranspose"):
            cons = graph.consumers(l.id)
            if len(cons) != 1 or graph.by_id[cons[0]].kind != "relu":
                raise ValidationError(
                    f"layer '{l.id}': {l.kind} must feed exactly one relu to be "
                    f"convertible, found consumers {list(cons)}"
                )
        elif l.kind == "relu":
            pred = graph.predecessor(l.id)
            if pred.kind not in ("conv", "convtranspose"):
                raise ValidationError(
                    f"layer '{l.id}': relu must directly follow conv/convtranspose, "
                    f"found '{pred.kind}'"
                )


def normalize_weights(
    graph: ModelGraph, stats: NormStats, bias_rule: str = "max_out"
) -> ConvertedModel:
    """Rescale all linear layers by activation maxima; see module docstring."""
    if bias_rule not in BIAS_RULES:
        raise ValidationError(f"unknown bias_rule '{bias_rule}', expected one of {BIAS_RULES}")
    _check_convertible(graph)
    stats.check_against(graph)
    out: list[LayerSpec] = []
    for l in graph.layers:
        if l.kind not in ("conv", "convtranspose"):
            out.append(l)
            continue
        m_in = stats.max_in(graph, l.id)
        m_out = stats.for_layer(l.id)
        w = l.weights.astype(np.float64) * m_in[None, :, None, None] / m_out[:, None, None, None]
        if bias_rule == "max_out":
            b = l.bias.astype(np.float64) / m_out
        else:
            b = l.bias.astype(np.float64) * m_in.max() / m_out
        out.append(
            replace(l, weights=w.astype(np.float32), bias=b.astype(np.float32))
        )
    return ConvertedModel(graph.replace_layers(out), stats, bias_rule=bias_rule)


def denormalize_weights(converted: ConvertedModel) -> ModelGraph:
    """Invert normalize_weights; recovers the original weights up to float32
    rounding."""
    graph, stats = converted.graph, converted.stats
    out: list[LayerSpec] = []
    for l in graph.layers:
        if l.kind not in ("conv", "convtranspose"):
            out.append(l)
            continue
        m_in = stats.max_in(graph, l.id)
        m_out = stats.for_layer(l.id)
        w = l.weights.astype(np.float64) * m_out[:, None, None, None] / m_in[None, :, None, None]
        if converted.bias_rule == "max_out":
            b = l.bias.astype(np.float64) * m_out
        else:
            b = l.bias.astype(np.float64) * m_out / m_in.max()
        out.append(replace(l, weights=w.astype(np.float32), bias=b.astype(np.float32)))
    return graph.replace_layers(out)


def normalized_forward(
    converted: ConvertedModel, x: np.ndarray, dtype=np.float64
) -> dict[str, np.ndarray]:
    """Reference forward pass through the normalized graph.

    Equals the original network's activations divided channel-wise by each
    layer's max_out, for inputs whose activations stay under the sampled
    maxima. Maxpool layers rescale by max_in/max_out after pooling, which is
    what keeps their output in the units the next layer's weights expect.
    """
    graph, stats = converted.graph, converted.stats
    x = np.asarray(x, dtype=dtype)
    if x.shape != graph.input_shape:
        raise ValidationError(
            f"input shape {x.shape} does not match model input {graph.input_shape}"
        )
    acts: dict[str, np.ndarray] = {}
    for l in graph.layers:
        if l.kind == "input":
            acts[l.id] = x
        elif l.kind == "conv":
            acts[l.id] = conv2d(
                acts[l.inputs[0]], l.weights, l.bias.astype(dtype), stride=l.stride, padding=l.padding
            )
        elif l.kind == "convtranspose":
            acts[l.id] = convtranspose2d(
                acts[l.inputs[0]], l.weights, l.bias.astype(dtype), stride=l.stride, padding=l.padding
            )
        elif l.kind == "relu":
            acts[l.id] = relu(acts[l.inputs[0]])
        elif l.kind == "maxpool":
            pooled = maxpool2d(acts[l.inputs[0]], l.kernel, l.stride, l.padding)
            m_in = stats.max_in(graph, l.id)
            m_out = stats.for_layer(l.id)
            if not np.array_equal(m_in, m_out):
                pooled = pooled * (m_in / m_out)[:, None, None]
            acts[l.id] = pooled
        elif l.kind == "concat":
            acts[l.id] = concat_channels([acts[i] for i in l.inputs])
        elif l.kind == "output":
            acts[l.id] = acts[l.inputs[0]]
        else:
            raise ValidationError(f"layer '{l.id}': unsupported kind '{l.kind}' in converted model")
    return acts


@dataclass(frozen=True)
class Stage:
    """One schedulable unit of the spike network."""

    kind: str  # spike-linear | spike-maxpool | spike-concat | output-decode
    layer_id: str
    inputs: tuple[str, ...]
    out_shape: tuple[int, int, int]
    op: str | None = None
    weights: np.ndarray | None = None
    bias_step: np.ndarray | None = None  # per-timestep bias injection, float64
    stride: int = 1
    padding: int = 0
    kernel: int | None = None
    m_in: np.ndarray | None = None
    m_out: np.ndarray | None = None


@dataclass(frozen=True)
class SnnPlan:
    """Topologically ordered stage schedule for one coding config."""

    stages: tuple[Stage, ...]
    coding: CodingConfig
    input_shape: tuple[int, int, int]
    v_thr: float
    v_init: float

    def stage(self, layer_id: str) -> Stage:
        for s in self.stages:
            if s.layer_id == layer_id:
                return s
        raise KeyError(f"no stage for layer '{layer_id}'")


def build_snn(converted: ConvertedModel, coding: CodingConfig) -> SnnPlan:
    """Lower a converted model to an executable stage schedule.

    Each conv/convtranspose fuses with its relu into one spike-linear stage
    (integrate-and-fire output is nonnegative, which is the relu). Maxpool
    becomes a decode-pool-reencode stage carrying both stat vectors; concat
    restacks predecessor trains; each output layer becomes a decode stage.
    The per-timestep bias injection is compression * b'.
    """
    graph, stats = converted.graph, converted.stats
    _check_convertible(graph)
    stats.check_against(graph)
    emitter: dict[str, str] = {graph.input_id: INPUT_SOURCE}
    stages: list[Stage] = []
    for l in graph.layers:
        if l.kind == "input":
            continue
        if l.kind in ("conv", "convtranspose"):
            stages.append(
                Stage(
                    kind="spike-linear",
                    layer_id=l.id,
                    inputs=(emitter[l.inputs[0]],),
                    out_shape=graph.shapes[l.id],
                    op=l.kind,
                    weights=l.weights,
                    bias_step=coding.compression * l.bias.astype(np.float64),
                    stride=l.stride,
                    padding=l.padding,
                )
            )
            emitter[l.id] = l.id
        elif l.kind == "relu":
            # fused into the preceding linear stage
            emitter[l.id] = emitter[l.inputs[0]]
        elif l.kind == "maxpool":
            pred = graph.predecessor(l.id)
            stages.append(
                Stage(
                    kind="spike-maxpool",
                    layer_id=l.id,
                    inputs=(emitter[l.inputs[0]],),
                    out_shape=graph.shapes[l.id],
                    kernel=l.kernel,
                    stride=l.stride,
                    padding=l.padding,
                    m_in=stats.for_layer(pred.id),
                    m_out=stats.for_layer(l.id),
                )
            )
            emitter[l.id] = l.id
        elif l.kind == "concat":
            stages.append(
                Stage(
                    kind="spike-concat",
                    layer_id=l.id,
                    inputs=tuple(emitter[i] for i in l.inputs),
                    out_shape=graph.shapes[l.id],
                )
            )
            emitter[l.id] = l.id
        elif l.kind == "output":
            stages.append(
                Stage(
                    kind="output-decode",
                    layer_id=l.id,
                    inputs=(emitter[l.inputs[0]],),
                    out_shape=graph.shapes[l.id],
                )
            )
        else:
            raise ValidationError(f"layer '{l.id}': unsupported kind '{l.kind}' in spike plan")
    return SnnPlan(
        stages=tuple(stages),
        coding=coding,
        input_shape=graph.input_shape,
        v_thr=converted.v_thr,
        v_init=converted.v_init,
    )


def save_converted(converted: ConvertedModel, manifest_path, blob_path=None):
    """Serialize a converted model: same manifest format, converted: true,
    stats embedded."""
    meta = {
        "converted": True,
        "bias_rule": converted.bias_rule,
        "v_thr": converted.v_thr,
        "v_init": converted.v_init,
        "stats": {lid: [float(v) for v in vec] for lid, vec in converted.stats.max_out.items()},
    }
    return save_model(converted.graph, manifest_path, blob_path, meta=meta)


def load_converted(manifest_path, blob_path=None) -> ConvertedModel:
    graph, meta = load_model(manifest_path, blob_path)
    if not meta.get("converted"):
        raise ValidationError(
            f"{manifest_path} is not a converted model; run the convert step first"
        )
    if "stats" not in meta:
        raise ValidationError(f"{manifest_path}: converted model without embedded stats")
    stats = NormStats({lid: np.asarray(v, dtype=np.float64) for lid, v in meta["stats"].items()})
    stats.check_against(graph)
    return ConvertedModel(
        graph,
        stats,
        bias_rule=meta.get("bias_rule", "max_out"),
        v_thr=float(meta.get("v_thr", V_THR)),
        v_init=float(meta.get("v_init", V_INIT_FRACTION)),
    )
