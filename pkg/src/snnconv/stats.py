"""Per-channel activation maxima used to normalize weights for conversion.

Each layer gets one max per output channel, taken over all samples and all
spatial positions of the nonnegative part of its activation. Using the
positive part means a conv's entry already equals its post-relu ceiling, so
conv and the relu that follows it share one value, and a channel that never
goes positive is floored instead of producing a zero divisor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph import ModelGraph, ann_forward

EPSILON_STAT = 1e-5


@dataclass(frozen=True)
class NormStats:
    """Per-layer, per-output-channel activation maxima.

    max_in of a layer is its predecessor's max_out; the input layer's entry
    is fixed at 1.0 per channel by convention (inputs are pre-scaled to
    [0, 1]), so first-layer weights are scaled by output maxima alone.
    """

    max_out: dict[str, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for lid, v in self.max_out.items():
            arr = np.ascontiguousarray(v, dtype=np.float64)
            if arr.ndim != 1 or arr.size < 1:
                raise ValidationError(f"stats for layer '{lid}' must be a 1-d channel vector")
            if not np.isfinite(arr).all() or (arr <= 0).any():
                raise ValidationError(f"stats for layer '{lid}' must be positive and finite")
            arr.setflags(write=False)
            frozen[lid] = arr
        object.__setattr__(self, "max_out", frozen)

    def for_layer(self, layer_id: str) -> np.ndarray:
        if layer_id not in self.max_out:
            raise ValidationError(f"no activation stats recorded for layer '{layer_id}'")
        return self.max_out[layer_id]

    def max_in(self, graph: ModelGraph, layer_id: str) -> np.ndarray:
        """Input-side maxima of a layer: its sole predecessor's max_out."""
        pred = graph.predecessor(layer_id)
        return self.for_layer(pred.id)

    def check_against(self, graph: ModelGraph) -> None:
        """Every layer must have stats with the right channel count."""
        for l in graph.layers:
            v = self.for_layer(l.id)
            want = graph.shapes[l.id][0]
            if v.shape != (want,):
                raise ValidationError(
                    f"stats for layer '{l.id}' have {v.shape[0]} channels, expected {want}"
                )


def sample_activation_stats(
    graph: ModelGraph,
    samples: np.ndarray,
    epsilon: float = EPSILON_STAT,
) -> NormStats:
    """Record per-channel activation maxima over a sample set.

    Args:
        graph: model to profile (fold batchnorm first if any is present).
        samples: (N, C, H, W) stack of inputs in [0, 1].
        epsilon: floor applied to every recorded max so later divisions are
            safe even for channels that never activate.

    Returns:
        NormStats with one per-channel vector per layer. The input layer's
        vector is fixed at 1.0 regardless of the samples.
    """
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 3:
        samples = samples[None]
    if samples.ndim != 4 or samples.shape[0] < 1:
        raise ValidationError(f"samples must be (N, C, H, W), got shape {samples.shape}")
    if samples.shape[1:] != graph.input_shape:
        raise ValidationError(
            f"sample shape {samples.shape[1:]} does not match model input {graph.input_shape}"
        )
    maxima: dict[str, np.ndarray] = {}
    for n in range(samples.shape[0]):
        acts = ann_forward(graph, samples[n])
        for lid, a in acts.items():
            cur = np.maximum(a, 0.0).max(axis=(1, 2)).astype(np.float64)
            if lid in maxima:
                np.maximum(maxima[lid], cur, out=maxima[lid])
            else:
                maxima[lid] = cur
    for lid in maxima:
        np.maximum(maxima[lid], epsilon, out=maxima[lid])
    maxima[graph.input_id] = np.ones(graph.input_shape[0], dtype=np.float64)
    return NormStats(maxima)
