"""Layer-graph model: specs, validation, shape inference, forward pass.

A model is a DAG of named layers over (C, H, W) tensors with exactly one
input layer. concat is the only multi-input layer kind. Graphs are held in a
canonical deterministic topological order (ready layers picked by id), so two
equivalent layer lists produce identical serialized output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ValidationError
from .tensor_ops import (
    concat_channels,
    conv2d,
    conv_output_hw,
    convtranspose2d,
    convtranspose_output_hw,
    maxpool2d,
    relu,
)

LAYER_KINDS = (
    "input",
    "conv",
    "batchnorm",
    "relu",
    "maxpool",
    "convtranspose",
    "concat",
    "output",
)

BN_EPSILON_DEFAULT = 1e-5


def _ro(arr: np.ndarray | None, dtype=np.float32) -> np.ndarray | None:
    """Copy to a read-only contiguous array of the storage dtype."""
    if arr is None:
        return None
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out is arr:
        out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model graph.

    Field use by kind:
      conv / convtranspose: weights (out_ch, in_ch, kh, kw), bias (out_ch,),
        stride, padding. A missing bias is materialized as zeros.
      maxpool: kernel, stride, padding.
      batchnorm: gamma, beta, mean, var (per channel), epsilon.
      input / relu / concat / output: wiring only.
    """

    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    stride: int = 1
    padding: int = 0
    kernel: int | None = None
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    epsilon: float = BN_EPSILON_DEFAULT

    def __post_init__(self):
        if not self.id:
            raise ValidationError("layer id must be a non-empty string")
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"layer '{self.id}': unknown kind '{self.kind}'")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        for name in ("weights", "bias", "gamma", "beta", "mean", "var"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        if self.kind in ("conv", "convtranspose"):
            if self.weights is None or self.weights.ndim != 4:
                raise ValidationError(
                    f"layer '{self.id}': {self.kind} needs 4-d weights (out, in, kh, kw)"
                )
            if self.bias is None:
                object.__setattr__(
                    self, "bias", _ro(np.zeros(self.weights.shape[0], dtype=np.float32))
                )
            if self.bias.shape != (self.weights.shape[0],):
                raise ValidationError(
                    f"layer '{self.id}': bias shape {self.bias.shape} does not match "
                    f"{self.weights.shape[0]} output channels"
                )
        if self.kind == "maxpool" and (self.kernel is None or self.kernel < 1):
            raise ValidationError(f"layer '{self.id}': maxpool needs kernel >= 1")
        if self.kind == "batchnorm":
            for name in ("gamma", "beta", "mean", "var"):
                v = getattr(self, name)
                if v is None or v.ndim != 1:
                    raise ValidationError(
                        f"layer '{self.id}': batchnorm needs per-channel '{name}'"
                    )
            if self.epsilon <= 0:
                raise ValidationError(f"layer '{self.id}': batchnorm epsilon must be > 0")

    @property
    def out_channels(self) -> int | None:
        if self.weights is not None:
            return int(self.weights.shape[0])
        return None


class ModelGraph:
    """Validated layer DAG in canonical topological order."""

    def __init__(self, layers: list[LayerSpec], input_shape: tuple[int, int, int]):
        if len(input_shape) != 3 or any(int(d) < 1 for d in input_shape):
            raise ValidationError(f"input_shape must be (C, H, W) positive, got {input_shape}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = _canonical_topo_order(layers)
        self.by_id = {l.id: l for l in self.layers}
        inputs = [l for l in self.layers if l.kind == "input"]
        if len(inputs) != 1:
            raise ValidationError(f"model must have exactly one input layer, found {len(inputs)}")
        self.input_id = inputs[0].id
        self.output_ids = tuple(l.id for l in self.layers if l.kind == "output")
        if not self.output_ids:
            raise ValidationError("model must have at least one output layer")
        self._consumers: dict[str, list[str]] = {l.id: [] for l in self.layers}
        for l in self.layers:
            for src in l.inputs:
                self._consumers[src].append(l.id)
        self.shapes = self._infer_shapes()

    def consumers(self, layer_id: str) -> tuple[str, ...]:
        return tuple(self._consumers[layer_id])

    def predecessor(self, layer_id: str) -> LayerSpec:
        """Sole predecessor of a single-input layer."""
        layer = self.by_id[layer_id]
        if len(layer.inputs) != 1:
            raise ValidationError(f"layer '{layer_id}' does not have exactly one input")
        return self.by_id[layer.inputs[0]]

    def has_batchnorm(self) -> bool:
        return any(l.kind == "batchnorm" for l in self.layers)

    def _infer_shapes(self) -> dict[str, tuple[int, int, int]]:
        shapes: dict[str, tuple[int, int, int]] = {}
        for l in self.layers:
            in_shapes = [shapes[i] for i in l.inputs]
            shapes[l.id] = _infer_layer_shape(l, in_shapes, self.input_shape)
        return shapes

    def replace_layers(self, layers: list[LayerSpec]) -> "ModelGraph":
        return ModelGraph(layers, self.input_shape)


def _canonical_topo_order(layers: list[LayerSpec]) -> list[LayerSpec]:
    seen: set[str] = set()
    for l in layers:
        if l.id in seen:
            raise ValidationError(f"duplicate layer id '{l.id}'")
        seen.add(l.id)
    by_id = {l.id: l for l in layers}
    for l in layers:
        if l.kind == "input" and l.inputs:
            raise ValidationError(f"layer '{l.id}': input layer takes no inputs")
        if l.kind != "input" and not l.inputs:
            raise ValidationError(f"layer '{l.id}': non-input layer needs at least one input")
        if l.kind == "concat" and len(l.inputs) < 2:
            raise ValidationError(f"layer '{l.id}': concat needs two or more inputs")
        if l.kind not in ("concat", "input") and len(l.inputs) != 1:
            raise ValidationError(
                f"layer '{l.id}': kind '{l.kind}' takes exactly one input, got {len(l.inputs)}"
            )
        for src in l.inputs:
            if src not in by_id:
                raise ValidationError(f"layer '{l.id}': unknown input layer '{src}'")
    # Kahn's algorithm; ties broken by id so equivalent orderings canonicalize
    pending = {l.id: len(l.inputs) for l in layers}
    ready = sorted(lid for lid, n in pending.items() if n == 0)
    order: list[LayerSpec] = []
    while ready:
        lid = ready.pop(0)
        order.append(by_id[lid])
        changed = False
        for l in layers:
            if lid in l.inputs:
                pending[l.id] -= l.inputs.count(lid)
                if pending[l.id] == 0:
                    ready.append(l.id)
                    changed = True
        if changed:
            ready.sort()
    if len(order) != len(layers):
        stuck = sorted(lid for lid, n in pending.items() if n > 0)
        raise ValidationError(f"model graph has a cycle involving: {', '.join(stuck)}")
    return order


def _infer_layer_shape(
    l: LayerSpec,
    in_shapes: list[tuple[int, int, int]],
    input_shape: tuple[int, int, int],
) -> tuple[int, int, int]:
    if l.kind == "input":
        return input_shape
    if l.kind == "conv":
        c, h, w = in_shapes[0]
        out_ch, in_ch, kh, kw = l.weights.shape
        if in_ch != c:
            raise ValidationError(
                f"layer '{l.id}': weights expect {in_ch} input channels, got {c}"
            )
        oh, ow = conv_output_hw(h, w, kh, kw, l.stride, l.padding)
        if oh < 1 or ow < 1:
            raise ValidationError(f"layer '{l.id}': kernel larger than padded input")
        return (out_ch, oh, ow)
    if l.kind == "convtranspose":
        c, h, w = in_shapes[0]
        out_ch, in_ch, kh, kw = l.weights.shape
        if in_ch != c:
            raise ValidationError(
                f"layer '{l.id}': weights expect {in_ch} input channels, got {c}"
            )
        if l.padding > kh - 1 or l.padding > kw - 1:
            raise ValidationError(f"layer '{l.id}': padding must be <= kernel - 1")
        oh, ow = convtranspose_output_hw(h, w, kh, kw, l.stride, l.padding)
        if oh < 1 or ow < 1:
            raise ValidationError(f"layer '{l.id}': empty output shape")
        return (out_ch, oh, ow)
    if l.kind == "batchnorm":
        c, h, w = in_shapes[0]
        for name in ("gamma", "beta", "mean", "var"):
            if getattr(l, name).shape != (c,):
                raise ValidationError(
                    f"layer '{l.id}': batchnorm '{name}' must have {c} channels"
                )
        return (c, h, w)
    if l.kind == "relu":
        return in_shapes[0]
    if l.kind == "maxpool":
        c, h, w = in_shapes[0]
        if l.padding >= l.kernel:
            raise ValidationError(f"layer '{l.id}': maxpool padding must be < kernel")
        oh, ow = conv_output_hw(h, w, l.kernel, l.kernel, l.stride, l.padding)
        if oh < 1 or ow < 1:
            raise ValidationError(f"layer '{l.id}': kernel larger than padded input")
        return (c, oh, ow)
    if l.kind == "concat":
        h, w = in_shapes[0][1:]
        for i, s in enumerate(in_shapes):
            if s[1:] != (h, w):
                raise ValidationError(
                    f"layer '{l.id}': concat input {i} has spatial {s[1:]}, expected {(h, w)}"
                )
        return (sum(s[0] for s in in_shapes), h, w)
    if l.kind == "output":
        return in_shapes[0]
    raise ValidationError(f"layer '{l.id}': unsupported kind '{l.kind}'")


def _layer_apply(l: LayerSpec, ins: list[np.ndarray], dtype) -> np.ndarray:
    if l.kind == "conv":
        return conv2d(ins[0], l.weights, l.bias, stride=l.stride, padding=l.padding)
    if l.kind == "convtranspose":
        return convtranspose2d(ins[0], l.weights, l.bias, stride=l.stride, padding=l.padding)
    if l.kind == "batchnorm":
        scale = (l.gamma.astype(dtype) / np.sqrt(l.var.astype(dtype) + dtype(l.epsilon)))
        shift = l.beta.astype(dtype) - l.mean.astype(dtype) * scale
        return (ins[0] * scale[:, None, None] + shift[:, None, None]).astype(dtype)
    if l.kind == "relu":
        return relu(ins[0])
    if l.kind == "maxpool":
        return maxpool2d(ins[0], l.kernel, l.stride, l.padding)
    if l.kind == "concat":
        return concat_channels(ins)
    if l.kind == "output":
        return ins[0]
    raise ValidationError(f"layer '{l.id}': unsupported kind '{l.kind}'")


def ann_forward(
    graph: ModelGraph, x: np.ndarray, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Run the reference network, returning every layer's activation by id.

    Args:
        graph: the model.
        x: input tensor matching graph.input_shape.
        dtype: compute precision; float32 is the storage-faithful reference
            path, float64 is used by numerical oracles.

    Returns:
        Mapping layer id -> activation array of that layer's output.
    """
    x = np.asarray(x)
    if x.shape != graph.input_shape:
        raise ValidationError(
            f"input shape {x.shape} does not match model input {graph.input_shape}"
        )
    if not np.isfinite(x).all():
        raise ValidationError("input contains non-finite values")
    acts: dict[str, np.ndarray] = {}
    for l in graph.layers:
        if l.kind == "input":
            acts[l.id] = x.astype(dtype)
            continue
        ins = [acts[i] for i in l.inputs]
        try:
            acts[l.id] = _layer_apply(l, ins, dtype)
        except ValidationError as e:
            raise ValidationError(f"layer '{l.id}': {e}") from e
    return acts


def fold_batchnorm(graph: ModelGraph) -> ModelGraph:
    """Fold every batchnorm into its preceding conv/convtranspose.

    With scale = gamma / sqrt(var + epsilon), the folded layer computes
    w' = w * scale (per output channel) and b' = (b - mean) * scale + beta,
    which reproduces conv-then-batchnorm in one linear layer. Requires each
    batchnorm's sole predecessor to be a conv/convtranspose that feeds only
    that batchnorm; consumers of the batchnorm are rewired to the conv.
    """
    folded: dict[str, LayerSpec] = {}
    rename: dict[str, str] = {}
    for l in graph.layers:
        if l.kind != "batchnorm":
            continue
        pred = graph.predecessor(l.id)
        if pred.kind not in ("conv", "convtranspose"):
            raise ValidationError(
                f"layer '{l.id}': batchnorm must follow conv/convtranspose, "
                f"found '{pred.kind}'"
            )
        if graph.consumers(pred.id) != (l.id,):
            raise ValidationError(
                f"layer '{l.id}': cannot fold, conv '{pred.id}' has other consumers"
            )
        scale = l.gamma.astype(np.float64) / np.sqrt(l.var.astype(np.float64) + l.epsilon)
        w = pred.weights.astype(np.float64) * scale[:, None, None, None]
        b = (pred.bias.astype(np.float64) - l.mean.astype(np.float64)) * scale + l.beta.astype(
            np.float64
        )
        folded[pred.id] = LayerSpec(
            id=pred.id,
            kind=pred.kind,
            inputs=pred.inputs,
            stride=pred.stride,
            padding=pred.padding,
            weights=w.astype(np.float32),
            bias=b.astype(np.float32),
        )
        rename[l.id] = pred.id
    out: list[LayerSpec] = []
    for l in graph.layers:
        if l.kind == "batchnorm":
            continue
        base = folded.get(l.id, l)
        new_inputs = tuple(rename.get(i, i) for i in base.inputs)
        if new_inputs != base.inputs:
            base = LayerSpec(
                id=base.id,
                kind=base.kind,
                inputs=new_inputs,
                stride=base.stride,
                padding=base.padding,
                kernel=base.kernel,
                weights=base.weights,
                bias=base.bias,
                gamma=base.gamma,
                beta=base.beta,
                mean=base.mean,
                var=base.var,
                epsilon=base.epsilon,
            )
        out.append(base)
    return graph.replace_layers(out)
