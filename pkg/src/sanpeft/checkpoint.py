"""Checkpoint format: a JSON manifest plus one raw little-endian float64 blob.

Manifest (``<prefix>.json``)::

    schema   "sanpeft.checkpoint/1"
    dtype    runtime dtype of the model ("float64" or "float32")
    blob     file name of the binary blob, relative to the manifest
    header   provenance (config hash, seed)
    model    model spec (kind, meta, layers)
    adapter  null, or {"method": {...}} for an adapted model
    tensors  [{"name", "shape", "offset", "nbytes"}] in blob order

Tensor names are ``model/<param>`` for base weights and the adapter's
qualified names (``base/<param>``, ``adapter/<param>``) for adapter state.
"""
import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .methods import Method
from .models import ModelSpec, ModelState

SCHEMA = "sanpeft.checkpoint/1"


def _paths(prefix):
    p = Path(prefix)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_checkpoint(prefix, state, adapter=None, header=None):
    manifest_path, blob_path = _paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    items = [(f"model/{n}", a) for n, a in state.weights.items()]
    if adapter is not None:
        items += list(adapter.state_dict().items())
    tensors, chunks, offset = [], [], 0
    for name, arr in items:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "schema": SCHEMA,
        "dtype": state.dtype.name,
        "blob": blob_path.name,
        "header": header or {},
        "model": state.spec.to_dict(),
        "adapter": None if adapter is None else {"method": adapter.method.to_dict()},
        "tensors": tensors,
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def load_checkpoint(path):
    """Returns ``(state, adapter_or_None, manifest)``."""
    from .adapters import make_adapter

    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{manifest_path}: {exc}") from None
    if manifest.get("schema") != SCHEMA:
        raise FormatError(f"{manifest_path}: unsupported schema {manifest.get('schema')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    values = {}
    for t in manifest["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(blob) or t["nbytes"] != 8 * int(np.prod(t["shape"], dtype=np.int64)):
            raise FormatError(f"{manifest_path}: tensor {t['name']} out of blob bounds or size mismatch")
        values[t["name"]] = np.frombuffer(blob, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"]).reshape(
            t["shape"]
        )
    spec = ModelSpec.from_dict(manifest["model"])
    weights = {k[len("model/"):]: v for k, v in values.items() if k.startswith("model/")}
    state = ModelState(spec, weights, dtype=np.dtype(manifest.get("dtype", "float64")))
    adapter = None
    if manifest.get("adapter"):
        adapter = make_adapter(state, Method.from_dict(manifest["adapter"]["method"]))
        adapter.load_state_dict({k: v for k, v in values.items() if not k.startswith("model/")})
    return state, adapter, manifest
