"""On-disk formats: model manifest + weight blob, tensor files, stats JSON.

See FORMAT.md at the repo root for the field-by-field layout. Serialization
is canonical: layers are written in the graph's canonical topological order,
JSON keys are sorted, floats use shortest round-trip decimals, and the blob
packs arrays little-endian float32 in layer order. save(load(m)) therefore
reproduces both files byte-identically.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .graph import LayerSpec, ModelGraph

MODEL_FORMAT = "snn-model/1"
TENSOR_MAGIC = b"SNNT"
_F4 = np.dtype("<f4")

# blob-backed arrays per kind, in pack order
_ARRAY_FIELDS = {
    "conv": ("weights", "bias"),
    "convtranspose": ("weights", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
}


def _layer_entry(l: LayerSpec, blob: bytearray) -> dict:
    entry: dict = {"id": l.id, "kind": l.kind, "inputs": list(l.inputs)}
    if l.kind in ("conv", "convtranspose"):
        entry["stride"] = l.stride
        entry["padding"] = l.padding
    if l.kind == "maxpool":
        entry["kernel"] = l.kernel
        entry["stride"] = l.stride
        entry["padding"] = l.padding
    if l.kind == "batchnorm":
        entry["epsilon"] = float(l.epsilon)
    for field in _ARRAY_FIELDS.get(l.kind, ()):
        arr = np.ascontiguousarray(getattr(l, field), dtype=_F4)
        raw = arr.tobytes()
        entry[field] = {
            "offset": len(blob),
            "length": len(raw),
            "shape": list(arr.shape),
        }
        blob.extend(raw)
    return entry


def save_model(
    graph: ModelGraph,
    manifest_path: str | Path,
    blob_path: str | Path | None = None,
    meta: dict | None = None,
) -> tuple[Path, Path]:
    """Write manifest JSON and weight blob; returns the two paths.

    meta, if given, is merged into the manifest root (used for converted
    models: converted flag, stats table, thresholds).
    """
    manifest_path = Path(manifest_path)
    if blob_path is None:
        blob_path = manifest_path.with_suffix(".bin")
    blob_path = Path(blob_path)
    blob = bytearray()
    layers = [_layer_entry(l, blob) for l in graph.layers]
    manifest = {
        "format": MODEL_FORMAT,
        "blob": blob_path.name,
        "input_shape": list(graph.input_shape),
        "converted": False,
        "layers": layers,
    }
    if meta:
        manifest.update(meta)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    blob_path.write_bytes(bytes(blob))
    return manifest_path, blob_path


def _read_ref(entry: dict, field: str, blob: bytes, lid: str) -> np.ndarray:
    ref = entry.get(field)
    if not isinstance(ref, dict):
        raise ValidationError(f"layer '{lid}': missing array reference '{field}'")
    try:
        offset, length, shape = int(ref["offset"]), int(ref["length"]), list(ref["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"layer '{lid}': malformed reference '{field}': {e}") from e
    if offset < 0 or length < 0 or offset + length > len(blob):
        raise ValidationError(
            f"layer '{lid}': reference '{field}' ({offset}+{length}) outside blob "
            f"of {len(blob)} bytes"
        )
    count = int(np.prod(shape)) if shape else 1
    if length != count * 4:
        raise ValidationError(
            f"layer '{lid}': reference '{field}' length {length} does not match "
            f"shape {shape} (expected {count * 4})"
        )
    return np.frombuffer(blob, dtype=_F4, count=count, offset=offset).reshape(shape)


def load_model(
    manifest_path: str | Path,
    blob_path: str | Path | None = None,
) -> tuple[ModelGraph, dict]:
    """Load a manifest + blob pair; returns (graph, meta).

    meta carries the manifest fields beyond the graph itself, notably
    'converted' and, for converted models, 'stats', 'v_thr', 'v_init',
    'bias_rule'.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ValidationError(f"model manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"model manifest is not valid JSON: {e}") from e
    if manifest.get("format") != MODEL_FORMAT:
        raise ValidationError(
            f"unsupported model format {manifest.get('format')!r}, expected {MODEL_FORMAT!r}"
        )
    if blob_path is None:
        name = manifest.get("blob")
        if not isinstance(name, str):
            raise ValidationError("model manifest has no 'blob' filename")
        blob_path = manifest_path.parent / name
    blob_path = Path(blob_path)
    if not blob_path.is_file():
        raise ValidationError(f"weight blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    if "input_shape" not in manifest or "layers" not in manifest:
        raise ValidationError("model manifest needs 'input_shape' and 'layers'")
    layers = []
    for entry in manifest["layers"]:
        lid = entry.get("id")
        if not isinstance(lid, str) or not lid:
            raise ValidationError(f"layer entry without a valid id: {entry!r}")
        kind = entry.get("kind")
        kwargs: dict = {
            "id": lid,
            "kind": kind,
            "inputs": tuple(entry.get("inputs", ())),
            "stride": int(entry.get("stride", 1)),
            "padding": int(entry.get("padding", 0)),
        }
        if kind == "maxpool":
            if "kernel" not in entry:
                raise ValidationError(f"layer '{lid}': maxpool entry needs 'kernel'")
            kwargs["kernel"] = int(entry["kernel"])
        if kind == "batchnorm":
            kwargs["epsilon"] = float(entry.get("epsilon", 1e-5))
        for field in _ARRAY_FIELDS.get(kind, ()):
            kwargs[field] = _read_ref(entry, field, blob, lid)
        try:
            layers.append(LayerSpec(**kwargs))
        except TypeError as e:
            raise ValidationError(f"layer '{lid}': malformed entry: {e}") from e
    graph = ModelGraph(layers, tuple(manifest["input_shape"]))
    meta = {
        k: v
        for k, v in manifest.items()
        if k not in ("format", "blob", "input_shape", "layers")
    }
    meta.setdefault("converted", False)
    return graph, meta


def save_tensors(path: str | Path, arr: np.ndarray) -> Path:
    """Write a (N, C, H, W) or (C, H, W) float32 stack to the tensor blob format."""
    arr = np.asarray(arr, dtype=_F4)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValidationError(f"tensor file needs (N, C, H, W) data, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("tensor data contains non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = TENSOR_MAGIC + np.array([1, *arr.shape], dtype="<u4").tobytes()
    path.write_bytes(header + np.ascontiguousarray(arr).tobytes())
    return path


def load_tensors(path: str | Path) -> np.ndarray:
    """Read a tensor file back as (N, C, H, W) float32."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"tensor file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 24 or raw[:4] != TENSOR_MAGIC:
        raise ValidationError(f"{path} is not a tensor file (bad magic)")
    version, n, c, h, w = np.frombuffer(raw, dtype="<u4", count=5, offset=4)
    if version != 1:
        raise ValidationError(f"{path}: unsupported tensor file version {version}")
    count = int(n) * int(c) * int(h) * int(w)
    if len(raw) != 24 + count * 4:
        raise ValidationError(
            f"{path}: payload is {len(raw) - 24} bytes, header promises {count * 4}"
        )
    return np.frombuffer(raw, dtype=_F4, count=count, offset=24).reshape(
        int(n), int(c), int(h), int(w)
    ).copy()


def load_input(path: str | Path) -> np.ndarray:
    """Read a single-tensor file as (C, H, W)."""
    arr = load_tensors(path)
    if arr.shape[0] != 1:
        raise ValidationError(f"{path} holds {arr.shape[0]} tensors, expected exactly 1")
    return arr[0]


def save_stats(path: str | Path, stats) -> Path:
    """Write a stats table as JSON mapping layer id -> per-channel maxima."""
    payload = {lid: [float(v) for v in vec] for lid, vec in stats.max_out.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_stats(path: str | Path):
    from .stats import NormStats

    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"stats file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"stats file is not valid JSON: {e}") from e
    if not isinstance(payload, dict) or not payload:
        raise ValidationError("stats file must map layer ids to channel maxima")
    return NormStats({lid: np.asarray(v, dtype=np.float64) for lid, v in payload.items()})
