"""Tensor-archive I/O: a directory with manifest.json plus raw blobs.

Tensor blobs are little-endian float32, row-major, no header ("f32le").
Integer labels use "i64le".  Quantizer step/zero-point blobs are stored at
their in-memory float64 resolution ("f64le").  The manifest keeps the node
list in topological order; no order inference happens at load time.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .graph import CalibrationSet, GraphError, LayerNode, ModelGraph
from .quantizer import QuantParams
from .tensor_core import ConvSpec, PoolSpec

FORMAT = "tensor-archive-v1"
_DTYPES = {"f32le": "<f4", "f64le": "<f8", "i64le": "<i8"}


class ArchiveError(ValueError):
    pass


def _write_blob(path: Path, arr: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())


def _blob_ref(name: str, arr: np.ndarray, dtype: str) -> dict:
    return {"shape": [int(s) for s in arr.shape], "dtype": dtype, "blob": name}


def _read_blob(root: Path, ref: dict, check_finite: bool = True) -> np.ndarray:
    dtype = ref.get("dtype", "f32le")
    if dtype not in _DTYPES:
        raise ArchiveError(f"unknown dtype tag {dtype!r}")
    blob = root / ref["blob"]
    if not blob.is_file():
        raise ArchiveError(f"missing tensor blob: {ref['blob']}")
    shape = tuple(int(s) for s in ref["shape"])
    raw = blob.read_bytes()
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    expected = int(np.prod(shape)) * itemsize if shape else itemsize
    if len(raw) != expected:
        raise ArchiveError(
            f"size mismatch for blob {ref['blob']}: {len(raw)} bytes, expected {expected}"
        )
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
    arr = arr.astype(np.dtype(_DTYPES[dtype]).newbyteorder("="))
    if check_finite and arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ArchiveError(f"non-finite values in blob {ref['blob']}")
    return arr


def _quant_to_manifest(prefix: str, q: QuantParams, blobs: dict) -> dict:
    step_name = f"{prefix}.step.bin"
    zero_name = f"{prefix}.zero.bin"
    blobs[step_name] = (q.step, "f64le")
    blobs[zero_name] = (q.zero_point, "f64le")
    return {
        "bits": q.bits,
        "granularity": q.granularity,
        "axis": q.axis,
        "step": _blob_ref(step_name, q.step, "f64le"),
        "zero_point": _blob_ref(zero_name, q.zero_point, "f64le"),
    }


def _quant_from_manifest(root: Path, entry: dict) -> QuantParams:
    return QuantParams(
        bits=int(entry["bits"]),
        step=_read_blob(root, entry["step"]),
        zero_point=_read_blob(root, entry["zero_point"]),
        granularity=entry["granularity"],
        axis=entry["axis"],
    )


def _spec_to_manifest(spec) -> dict | None:
    if spec is None:
        return None
    if isinstance(spec, ConvSpec):
        return {
            "type": "conv",
            "in_channels": spec.in_channels,
            "out_channels": spec.out_channels,
            "kernel": spec.kernel,
            "stride": spec.stride,
            "padding": spec.padding,
        }
    if isinstance(spec, PoolSpec):
        return {"type": "pool", "kernel": spec.kernel}
    raise ArchiveError(f"unknown spec type {type(spec)!r}")


def _spec_from_manifest(entry) -> ConvSpec | PoolSpec | None:
    if entry is None:
        return None
    if entry["type"] == "conv":
        return ConvSpec(
            in_channels=int(entry["in_channels"]),
            out_channels=int(entry["out_channels"]),
            kernel=int(entry["kernel"]),
            stride=int(entry["stride"]),
            padding=int(entry["padding"]),
        )
    if entry["type"] == "pool":
        return PoolSpec(kernel=int(entry["kernel"]))
    raise ArchiveError(f"unknown spec type {entry['type']!r}")


def save_archive(obj, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, tuple[np.ndarray, str]] = {}
    if isinstance(obj, ModelGraph):
        manifest = _model_manifest(obj, blobs)
    elif isinstance(obj, CalibrationSet):
        manifest = _calib_manifest(obj, blobs)
    else:
        raise ArchiveError(f"cannot archive object of type {type(obj)!r}")
    for name, (arr, dtype) in blobs.items():
        _write_blob(root / name, arr, dtype)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _model_manifest(g: ModelGraph, blobs: dict) -> dict:
    nodes = []
    for node in g.nodes:
        params = {}
        for pname, arr in node.params.items():
            blob_name = f"{node.id}.{pname}.bin"
            blobs[blob_name] = (arr, "f32le")
            params[pname] = _blob_ref(blob_name, arr, "f32le")
        entry = {
            "id": node.id,
            "kind": node.kind,
            "inputs": list(node.inputs),
            "spec": _spec_to_manifest(node.spec),
            "params": params,
        }
        quant = {}
        if node.weight_q is not None:
            quant["weight"] = _quant_to_manifest(f"{node.id}.wq", node.weight_q, blobs)
        if node.act_q is not None:
            quant["act"] = _quant_to_manifest(f"{node.id}.aq", node.act_q, blobs)
        if quant:
            entry["quant"] = quant
        if "bn_origin" in node.meta:
            origin = node.meta["bn_origin"]
            gname = f"{node.id}.bn_origin.gamma.bin"
            bname = f"{node.id}.bn_origin.beta.bin"
            blobs[gname] = (origin["gamma"], "f32le")
            blobs[bname] = (origin["beta"], "f32le")
            entry["bn_origin"] = {
                "gamma": _blob_ref(gname, origin["gamma"], "f32le"),
                "beta": _blob_ref(bname, origin["beta"], "f32le"),
                "eps": float(origin["eps"]),
            }
        nodes.append(entry)
    return {
        "format": FORMAT,
        "kind": "model",
        "input_shape": [int(s) for s in g.input_shape],
        "output": g.output_id,
        "nodes": nodes,
    }


def _calib_manifest(c: CalibrationSet, blobs: dict) -> dict:
    tensors = {"inputs": _blob_ref("inputs.bin", c.inputs, "f32le")}
    blobs["inputs.bin"] = (c.inputs, "f32le")
    if c.labels is not None:
        tensors["labels"] = _blob_ref("labels.bin", c.labels, "i64le")
        blobs["labels.bin"] = (c.labels, "i64le")
    for name, arr in c.extras.items():
        blob_name = f"{name}.bin"
        tensors[name] = _blob_ref(blob_name, arr, "f32le")
        blobs[blob_name] = (arr, "f32le")
    return {"format": FORMAT, "kind": "calibration", "tensors": tensors}


def load_archive(path):
    """Load a model or calibration archive; full validation on the way in."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ArchiveError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise ArchiveError(f"unknown archive format {manifest.get('format')!r}")
    if manifest["kind"] == "model":
        return _load_model(root, manifest)
    if manifest["kind"] == "calibration":
        return _load_calibration(root, manifest)
    raise ArchiveError(f"unknown archive kind {manifest['kind']!r}")


def _load_model(root: Path, manifest: dict) -> ModelGraph:
    nodes = []
    for entry in manifest["nodes"]:
        params = {
            name: np.array(_read_blob(root, ref), dtype=np.float32)
            for name, ref in entry["params"].items()
        }
        node = LayerNode(
            id=entry["id"],
            kind=entry["kind"],
            params=params,
            spec=_spec_from_manifest(entry.get("spec")),
            inputs=list(entry["inputs"]),
        )
        quant = entry.get("quant", {})
        if "weight" in quant:
            node.weight_q = _quant_from_manifest(root, quant["weight"])
        if "act" in quant:
            node.act_q = _quant_from_manifest(root, quant["act"])
        if "bn_origin" in entry:
            origin = entry["bn_origin"]
            node.meta["bn_origin"] = {
                "gamma": np.array(_read_blob(root, origin["gamma"]), dtype=np.float32),
                "beta": np.array(_read_blob(root, origin["beta"]), dtype=np.float32),
                "eps": float(origin["eps"]),
            }
        nodes.append(node)
    try:
        g = ModelGraph(nodes, tuple(int(s) for s in manifest["input_shape"]), manifest["output"])
    except GraphError as exc:  # re-tag structural problems as archive errors
        raise ArchiveError(str(exc)) from exc
    g.infer_shapes()
    return g


def _load_calibration(root: Path, manifest: dict) -> CalibrationSet:
    tensors = manifest["tensors"]
    if "inputs" not in tensors:
        raise ArchiveError("calibration archive lacks an 'inputs' tensor")
    inputs = np.array(_read_blob(root, tensors["inputs"]), dtype=np.float32)
    labels = None
    if "labels" in tensors:
        labels = np.array(_read_blob(root, tensors["labels"]), dtype=np.int64)
    extras = {
        name: np.array(_read_blob(root, ref), dtype=np.float32)
        for name, ref in tensors.items()
        if name not in ("inputs", "labels")
    }
    return CalibrationSet(inputs=inputs, labels=labels, extras=extras)
