"""Versioned binary checkpoint: magic "REPV1", JSON header, float64 LE blobs.

Layout: 5-byte magic, u32 little-endian header length, UTF-8 JSON header
(configs plus an ordered parameter manifest), then raw parameter data in
manifest order. Prompt-pool blobs share the format under a module tag.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .backbone import ViT, ViTConfig

MAGIC = b"REPV1"


class CheckpointError(RuntimeError):
    pass


def _manifest(tagged_params) -> list[dict]:
    return [{"module": tag, "name": p.name, "shape": list(p.data.shape),
             "trainable": p.trainable}
            for tag, p in tagged_params]


def save_bundle(path, main: ViT, surrogate: ViT, extra_params=None,
                meta: dict | None = None) -> str:
    """Write both models (and optional module-tagged extras); returns sha256."""
    tagged = [("main", p) for p in main.parameters()]
    tagged += [("surrogate", p) for p in surrogate.parameters()]
    for tag, params in (extra_params or {}).items():
        tagged += [(tag, p) for p in params]
    header = {
        "main_config": main.cfg.to_dict(),
        "surrogate_config": surrogate.cfg.to_dict(),
        "meta": meta or {},
        "params": _manifest(tagged),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in tagged:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return file_hash(path)


def load_bundle(path):
    """Returns (main ViT, surrogate ViT, extras dict name->array, meta)."""
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a REPV1 checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        main = ViT(ViTConfig.from_dict(header["main_config"]))
        surrogate = ViT(ViTConfig.from_dict(header["surrogate_config"]))
        by_module = {"main": {p.name: p for p in main.parameters()},
                     "surrogate": {p.name: p for p in surrogate.parameters()}}
        extras: dict[str, dict[str, np.ndarray]] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            mod = entry["module"]
            if mod in by_module:
                p = by_module[mod][entry["name"]]
                p.tensor.data = arr
                if not entry["trainable"]:
                    p.freeze()
            else:
                extras.setdefault(mod, {})[entry["name"]] = arr
    return main, surrogate, extras, header["meta"]


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
