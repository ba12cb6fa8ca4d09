"""Model files: a JSON manifest plus a raw float32 payload.

``save_model(model, "runs/dnn.json")`` writes ``runs/dnn.json`` and ``runs/dnn.bin``.
The payload holds every tensor as little-endian IEEE-754 float32, row-major, in the
order listed by the manifest's ``tensors`` entry.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..dnn import DnnModel
from ..sdbn.network import SdbnModel
from ..sdbn.neuron import NeuronParams

FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


class ModelFileError(ValueError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class PayloadLengthError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class StructureError(ModelFileError):
    pass


def _names(kind: str) -> list:
    if kind == "dnn":
        return [f"{p}{i}" for i in (1, 2, 3) for p in ("W", "b")]
    return [f"rbm{i}.{p}" for i in (1, 2, 3) for p in ("W", "b_v", "b_h")]


def model_kind(model) -> str:
    if isinstance(model, DnnModel):
        return "dnn"
    if isinstance(model, SdbnModel):
        return "sdbn"
    raise TypeError(f"cannot persist {type(model).__name__}")


def payload_path(path) -> Path:
    return Path(path).with_suffix(".bin")


def save_model(model, path, training: dict | None = None, seeds: dict | None = None) -> Path:
    path = Path(path)
    kind = model_kind(model)
    tensors = model.tensors()
    payload = b"".join(np.ascontiguousarray(t, dtype=PAYLOAD_DTYPE).tobytes() for t in tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "topology": list(model.topology),
        "neuron": model.neuron.to_dict() if kind == "sdbn" else None,
        "training": training or {},
        "seeds": seeds or {},
        "dtype": "float32-le",
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in zip(_names(kind), tensors)],
        "element_count": int(sum(t.size for t in tensors)),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    payload_path(path).write_bytes(payload)
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: manifest is not valid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version!r}, this build reads {FORMAT_VERSION}")
    return manifest


def load_model(path):
    path = Path(path)
    manifest = read_manifest(path)
    payload = payload_path(path).read_bytes()
    expected = int(manifest["element_count"]) * PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise PayloadLengthError(f"{payload_path(path)}: {len(payload)} bytes, manifest declares {expected}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ChecksumError(f"{payload_path(path)}: payload checksum mismatch")
    specs = manifest["tensors"]
    if sum(int(np.prod(s["shape"])) for s in specs) != manifest["element_count"]:
        raise StructureError(f"{path}: tensor shapes do not add up to the declared element count")
    flat = np.frombuffer(payload, dtype=PAYLOAD_DTYPE)
    tensors, offset = [], 0
    for s in specs:
        n = int(np.prod(s["shape"]))
        tensors.append(flat[offset : offset + n].reshape(s["shape"]).astype(np.float32))
        offset += n
    kind = manifest["kind"]
    try:
        if kind == "dnn":
            model = DnnModel.from_tensors(tensors)
        elif kind == "sdbn":
            model = SdbnModel.from_tensors(tensors, NeuronParams(**manifest["neuron"]))
        else:
            raise StructureError(f"{path}: unknown network kind {kind!r}")
    except (ValueError, TypeError, IndexError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise StructureError(f"{path}: payload does not form a valid {kind} model ({exc})") from exc
    if list(model.topology) != list(manifest["topology"]):
        raise StructureError(f"{path}: manifest topology {manifest['topology']} does not match the payload")
    return model
