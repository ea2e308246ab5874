"""Checkpoint container: a deterministic zip of config JSON + .npy arrays.

Zip entries use a fixed 1980 timestamp and sorted names so that saving the
same model twice yields byte-identical files; loading rebuilds the model and
reproduces forward outputs bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile

import numpy as np

from .errors import CheckpointError
from .model import Backbone, ModelConfig, lora_apply
from .tensor import Tensor

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0),
                              allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, backbone: Backbone, head=None, extra: dict | None = None) -> None:
    """Write backbone (+ optional embedding head) to a deterministic container."""
    adapters = None
    if backbone.adapters:
        keys = sorted(backbone.adapters)
        slots = sorted({k.split(".", 1)[1] for k in keys})
        first = backbone.adapters[keys[0]]
        adapters = {"targets": slots, "r": first.r, "alpha": first.alpha}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": {
            "vocab_size": backbone.config.vocab_size,
            "d_model": backbone.config.d_model,
            "n_layers": backbone.config.n_layers,
            "n_heads": backbone.config.n_heads,
            "d_ff": backbone.config.d_ff,
            "max_seq_len": backbone.config.max_seq_len,
            "seed": backbone.config.seed,
        },
        "pinned_rows": list(backbone.pinned_rows),
        "adapters": adapters,
        "head": head.describe() if head is not None else None,
        "extra": extra or {},
    }
    entries: list[tuple[str, bytes]] = [
        ("manifest.json", canonical_json(manifest).encode())
    ]
    for name, t in backbone.named_parameters():
        entries.append((f"params/{name}.npy", _npy_bytes(t.data)))
    if head is not None:
        for name, t in head.named_parameters():
            entries.append((f"head_params/{name}.npy", _npy_bytes(t.data)))
    entries.sort(key=lambda e: e[0])

    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in entries:
            _write_entry(zf, name, payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    """-> (backbone, head or None, extra dict)."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as e:
            raise CheckpointError("checkpoint missing manifest.json") from e
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {manifest.get('format_version')}"
            )
        backbone = Backbone(ModelConfig(**manifest["model"]))
        backbone.pin_embedding_rows(manifest.get("pinned_rows", []))
        ad = manifest.get("adapters")
        if ad:
            lora_apply(backbone, targets=tuple(ad["targets"]), r=ad["r"], alpha=ad["alpha"])

        def read_array(entry):
            try:
                raw = zf.read(entry)
            except KeyError as e:
                raise CheckpointError(f"checkpoint missing entry {entry}") from e
            return np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False)

        for name, t in backbone.named_parameters():
            arr = read_array(f"params/{name}.npy")
            if arr.shape != t.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            t.data = np.asarray(arr, dtype=np.float64)

        head = None
        if manifest.get("head") is not None:
            from .heads import head_from_description
            head = head_from_description(manifest["head"], backbone.config)
            for name, t in head.named_parameters():
                arr = read_array(f"head_params/{name}.npy")
                if arr.shape != t.data.shape:
                    raise CheckpointError(f"shape mismatch for head param {name}")
                t.data = np.asarray(arr, dtype=np.float64)
        return backbone, head, manifest.get("extra", {})


def model_hash(backbone: Backbone, head=None) -> str:
    """sha256 over config and every parameter buffer, stable across processes."""
    h = hashlib.sha256()
    h.update(canonical_json({
        "model": backbone.config.__dict__,
        "pinned_rows": list(backbone.pinned_rows),
        "head": head.describe() if head is not None else None,
    }).encode())
    named: list[tuple[str, Tensor]] = list(backbone.named_parameters())
    if head is not None:
        named += [(f"head.{n}", t) for n, t in head.named_parameters()]
    for name, t in sorted(named, key=lambda e: e[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
