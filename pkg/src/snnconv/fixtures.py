"""Seeded test fixtures: small nets, sample sets, and eval inputs.

Three built-ins:
  f1: eight conv/convtranspose blocks (conv + batchnorm + relu) around a
      spatial-pyramid block (three stride-1 kernel-5 maxpools feeding a
      concat) and an upsampling convtranspose stage.
  f2: f1 plus an adversarial eval input tuned so one designated first-layer
      channel reaches 1.5x its sampled maximum. The adversarial input is
      never part of the stats sample set.
  f3: minimal two-conv single-channel net for exactness and hand counting.

Everything is drawn from one seeded generator in a fixed order, so a given
(name, seed, samples, bias_scale) regenerates byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .graph import LayerSpec, ModelGraph, ann_forward, fold_batchnorm
from .model_io import save_model, save_tensors
from .stats import sample_activation_stats
from .tensor_ops import conv2d, convtranspose2d, maxpool2d, relu

DEFAULT_SEED = 7021
DEFAULT_SAMPLE_COUNT = 16
FIXTURE_NAMES = ("f1", "f2", "f3")

_F1_WIDTH = 32
_F1_GAIN = 1.7
_F1_SHIFT = 0.45
ADVERSARIAL_TARGET = 1.5


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    seed: int = DEFAULT_SEED
    samples: int = DEFAULT_SAMPLE_COUNT
    bias_scale: float = 1.0

    def __post_init__(self):
        if self.name not in FIXTURE_NAMES:
            raise ValidationError(f"unknown fixture '{self.name}', expected one of {FIXTURE_NAMES}")
        if self.samples < 1:
            raise ValidationError(f"fixture needs at least 1 sample, got {self.samples}")


@dataclass(frozen=True)
class Fixture:
    spec: FixtureSpec
    graph: ModelGraph
    samples: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    eval_input: np.ndarray  # (C, H, W) float32 in [0, 1]
    meta: dict


def _conv_weights(
    rng: np.random.Generator, out_ch: int, in_ch: int, k: int, gain: float, shift: float = 0.0
):
    # shift > 0 mixes in a coherent positive component, like the mostly
    # excitatory filters of a trained net; pure zero-mean noise is the worst
    # case for quantization error growth through deep stacks
    bound = gain / np.sqrt(in_ch * k * k)
    w = rng.uniform(-bound, bound, (out_ch, in_ch, k, k)) + shift * bound
    return w.astype(np.float32)


def _bias(rng: np.random.Generator, n: int, scale: float, lo=0.01, hi=0.05):
    return (scale * rng.uniform(lo, hi, n)).astype(np.float32)


def _bn_params(rng: np.random.Generator, preact: np.ndarray):
    """Batchnorm parameters tracking the empirical pre-activation moments,
    the way a trained net's running stats would, plus a little drift."""
    mu = preact.mean(axis=(0, 2, 3))
    sigma = preact.std(axis=(0, 2, 3))
    n = mu.shape[0]
    return dict(
        gamma=rng.uniform(0.8, 1.25, n).astype(np.float32),
        beta=rng.uniform(0.0, 0.08, n).astype(np.float32),
        mean=(mu + sigma * rng.uniform(-0.05, 0.05, n)).astype(np.float32),
        var=(sigma**2 * rng.uniform(0.85, 1.2, n)).astype(np.float32),
    )


def _apply_bn_relu(acts: np.ndarray, bn: LayerSpec) -> np.ndarray:
    scale = bn.gamma / np.sqrt(bn.var + bn.epsilon)
    return relu((acts - bn.mean[:, None, None]) * scale[:, None, None] + bn.beta[:, None, None])


class _F1Builder:
    """Grows the f1 layer list while tracking the sample activations, so
    each batchnorm can be calibrated against what actually flows into it."""

    def __init__(self, rng, samples, bias_scale):
        self.rng = rng
        self.bias_scale = bias_scale
        self.layers: list[LayerSpec] = [LayerSpec("in", "input")]
        self.acts: dict[str, np.ndarray] = {"in": samples.astype(np.float32)}

    def _linear(self, lid, kind, src, weights, bias, stride, padding):
        op = conv2d if kind == "conv" else convtranspose2d
        self.layers.append(
            LayerSpec(lid, kind, (src,), stride=stride, padding=padding,
                      weights=weights, bias=bias)
        )
        pre = np.stack([op(a, weights, bias, stride=stride, padding=padding)
                        for a in self.acts[src]])
        bn = LayerSpec(f"{lid}_bn", "batchnorm", (lid,), **_bn_params(self.rng, pre))
        self.layers.append(bn)
        self.layers.append(LayerSpec(f"{lid}_r", "relu", (f"{lid}_bn",)))
        self.acts[f"{lid}_r"] = np.stack([_apply_bn_relu(p, bn) for p in pre])
        return f"{lid}_r"

    def cbr(self, lid, src, out_ch, k, stride=1, padding=0):
        in_ch = self.acts[src].shape[1]
        return self._linear(
            lid, "conv", src,
            _conv_weights(self.rng, out_ch, in_ch, k, _F1_GAIN, _F1_SHIFT),
            _bias(self.rng, out_ch, self.bias_scale), stride, padding,
        )

    def up(self, lid, src, out_ch, k, stride):
        in_ch = self.acts[src].shape[1]
        return self._linear(
            lid, "convtranspose", src,
            _conv_weights(self.rng, out_ch, in_ch, k, _F1_GAIN, _F1_SHIFT),
            _bias(self.rng, out_ch, self.bias_scale), stride, 0,
        )

    def pool(self, lid, src, kernel, stride, padding):
        self.layers.append(
            LayerSpec(lid, "maxpool", (src,), kernel=kernel, stride=stride, padding=padding)
        )
        self.acts[lid] = np.stack(
            [maxpool2d(a, kernel, stride, padding) for a in self.acts[src]]
        )
        return lid

    def concat(self, lid, srcs):
        self.layers.append(LayerSpec(lid, "concat", tuple(srcs)))
        self.acts[lid] = np.concatenate([self.acts[s] for s in srcs], axis=1)
        return lid


def _build_f1_graph(rng, samples: np.ndarray, bias_scale: float) -> ModelGraph:
    w = _F1_WIDTH
    b = _F1Builder(rng, samples, bias_scale)
    src = b.cbr("c1", "in", w, 3, padding=1)
    src = b.cbr("c2", src, w, 3, stride=2, padding=1)
    src = b.cbr("c3", src, w, 3, padding=1)
    src = b.cbr("c4", src, w, 3, padding=1)
    # spatial pyramid: stacked stride-1 kernel-5 pools over one 1x1 reduction
    src = b.cbr("c5", src, w, 1)
    p1 = b.pool("sp1", src, 5, 1, 2)
    p2 = b.pool("sp2", p1, 5, 1, 2)
    p3 = b.pool("sp3", p2, 5, 1, 2)
    cat = b.concat("sp_cat", (src, p1, p2, p3))
    src = b.cbr("c6", cat, w, 1)
    # upsample back to input resolution, then the head
    src = b.up("u7", src, w, 2, 2)
    src = b.cbr("c8", src, 8, 3, padding=1)
    b.layers.append(LayerSpec("out", "output", (src,)))
    return ModelGraph(b.layers, (3, 16, 16))


def _build_f3_graph(rng: np.random.Generator, bias_scale: float) -> ModelGraph:
    # single-channel throughout; chunky biases so normalization effects are
    # visible, and a nearly-bias-dominated second layer so the whole net
    # quantizes like a single stage (see _f3_eval_input)
    layers = [
        LayerSpec("in", "input"),
        LayerSpec(
            "c1", "conv", ("in",), padding=1,
            weights=_conv_weights(rng, 1, 1, 3, 3.4),
            bias=_bias(rng, 1, bias_scale, 0.05, 0.15),
        ),
        LayerSpec("c1_r", "relu", ("c1",)),
        LayerSpec(
            "c2", "conv", ("c1_r",), padding=1,
            weights=_conv_weights(rng, 1, 1, 3, 0.12),
            bias=_bias(rng, 1, bias_scale, 0.10, 0.20),
        ),
        LayerSpec("c2_r", "relu", ("c2",)),
        LayerSpec("out", "output", ("c2_r",)),
    ]
    return ModelGraph(layers, (1, 4, 4))


def _draw_samples(rng: np.random.Generator, n: int, c: int, h: int, w: int) -> np.ndarray:
    """Noise under a smooth bright blob on a dark floor. Flat noise makes
    every activation map sit at its channel ceiling, which is nothing like
    real feature maps; a spatial envelope restores some dynamic range."""
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.empty((n, c, h, w))
    for i in range(n):
        cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
        sigma = rng.uniform(0.15, 0.35) * (h + w) / 2
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        envelope = 0.15 + 0.85 * blob
        out[i] = envelope * rng.uniform(0.0, 0.5, (c, h, w))
    return out.astype(np.float32)


def _adversarial_input(graph: ModelGraph, samples: np.ndarray) -> tuple[np.ndarray, dict]:
    """Scale a stats sample until the designated first-layer channel hits
    ADVERSARIAL_TARGET times its sampled max. Deterministic bisection."""
    folded = fold_batchnorm(graph)
    stats = sample_activation_stats(folded, samples)
    c1 = folded.by_id["c1"]
    m = stats.for_layer("c1")
    channel = int(np.argmax(m))

    def peak(x):
        a = relu(conv2d(x.astype(np.float64), c1.weights, c1.bias, stride=c1.stride, padding=c1.padding))
        return float(a[channel].max())

    base_idx = int(np.argmax([peak(s) for s in samples]))
    x_base = samples[base_idx].astype(np.float64)
    target = ADVERSARIAL_TARGET * float(m[channel])
    hi = 0.999 / float(x_base.max())
    if peak(hi * x_base) < target:
        raise ValidationError(
            "adversarial fixture cannot reach its target within the [0, 1] input range"
        )
    lo = 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if peak(mid * x_base) < target:
            lo = mid
        else:
            hi = mid
    x_adv = (hi * x_base).astype(np.float32)
    achieved = peak(x_adv) / float(m[channel])
    return x_adv, {
        "layer": "c1",
        "channel": channel,
        "target_ratio": ADVERSARIAL_TARGET,
        "achieved_ratio": achieved,
        "base_sample": base_idx,
    }


def _f3_eval_input(graph: ModelGraph, samples: np.ndarray, timesteps: int = 64):
    """Pick the sample scaling under which the second stage's potentials,
    fed the first stage's quantized output, stay inside the rounding cells
    of the exact potentials with room to spare. The net's end-to-end error
    then sits at the single-stage quantization bound by construction."""
    stats = sample_activation_stats(graph, samples)
    c1, c2 = graph.by_id["c1"], graph.by_id["c2"]
    m1 = float(stats.for_layer("c1")[0])
    m2 = float(stats.for_layer("c2")[0])
    x0 = samples[0].astype(np.float64)
    T = timesteps

    def cell_margin(scale):
        a1 = relu(conv2d(scale * x0, c1.weights, c1.bias, padding=c1.padding))
        q1 = a1 / m1 * T + 0.5
        if np.abs(q1 - np.round(q1)).min() < 1e-4:
            return -1.0  # first-stage rounding itself rides a boundary
        r1 = np.clip(np.floor(q1), 0, T) / T  # its exact rate decode
        q2 = conv2d(a1, c2.weights, c2.bias, padding=c2.padding) / m2 * T + 0.5
        q2_fed = conv2d(r1 * m1, c2.weights, c2.bias, padding=c2.padding) / m2 * T + 0.5
        cell = np.floor(q2)
        if not np.array_equal(np.floor(q2_fed), cell):
            return -1.0  # a rounding flipped; error would exceed the bound
        walls = [q2 - cell, cell + 1 - q2, q2_fed - cell, cell + 1 - q2_fed]
        return float(min(w.min() for w in walls))

    best_scale, best_margin = 0.9, -1.0
    for scale in np.linspace(0.80, 0.98, 181):
        margin = cell_margin(float(scale))
        if margin > best_margin:
            best_scale, best_margin = float(scale), margin
    if best_margin < 1e-3:
        raise ValidationError(
            "f3 eval search found no scaling clear of rounding boundaries"
        )
    x = (best_scale * x0).astype(np.float32)
    return x, {"eval_scale": best_scale, "cell_margin": best_margin}


def build_fixture(spec: FixtureSpec) -> Fixture:
    """Construct a fixture in memory; see gen_fixture for the on-disk form."""
    rng = np.random.default_rng(spec.seed)
    if spec.name in ("f1", "f2"):
        samples = _draw_samples(rng, spec.samples, 3, 16, 16)
        graph = _build_f1_graph(rng, samples, spec.bias_scale)
    else:
        samples = _draw_samples(rng, spec.samples, 1, 4, 4)
        graph = _build_f3_graph(rng, spec.bias_scale)
    meta: dict = {
        "name": spec.name,
        "seed": spec.seed,
        "samples": spec.samples,
        "bias_scale": spec.bias_scale,
    }
    if spec.name == "f2":
        eval_input, adv = _adversarial_input(graph, samples)
        meta["adversarial"] = adv
    elif spec.name == "f3" and spec.bias_scale > 0:
        eval_input, chosen = _f3_eval_input(graph, samples)
        meta["quantization_probe"] = chosen
    else:
        eval_input = (0.9 * samples[0]).astype(np.float32)
    return Fixture(spec, graph, samples, eval_input, meta)


def gen_fixture(spec: FixtureSpec, out_dir: str | Path) -> dict[str, str]:
    """Write a fixture to disk: model.json/model.bin, samples.ten, eval.ten,
    fixture.json. Same spec, same bytes."""
    fx = build_fixture(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(fx.graph, out / "model.json")
    save_tensors(out / "samples.ten", fx.samples)
    save_tensors(out / "eval.ten", fx.eval_input)
    meta = dict(fx.meta)
    meta["files"] = {
        "model": "model.json",
        "blob": "model.bin",
        "samples": "samples.ten",
        "eval": "eval.ten",
    }
    (out / "fixture.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {k: str(out / v) for k, v in meta["files"].items()} | {
        "fixture": str(out / "fixture.json")
    }
