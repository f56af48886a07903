"""On-disk formats: raw tensors with JSON headers, named tensor archives, JSON helpers."""

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

ARCHIVE_VERSION = 1
OUT_ROOT_ENV = "KSVQE_OUT"


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "ksvqe_out"))


def write_json(path, obj, sort_keys=True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=sort_keys) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_tensor(path, array, **meta) -> dict:
    """Write ``<path>.bin`` (raw C-order bytes) and ``<path>.json`` (shape, dtype, extra metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array)
    header = {"shape": list(array.shape), "dtype": array.dtype.str, **meta}
    path.with_suffix(".bin").write_bytes(array.tobytes())
    write_json(path.with_suffix(".json"), header)
    return header


def load_tensor(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = read_json(path.with_suffix(".json"))
    raw = path.with_suffix(".bin").read_bytes()
    arr = np.frombuffer(raw, dtype=np.dtype(header["dtype"])).reshape(header["shape"])
    return arr.copy(), header


def save_archive(path, tensors: dict, header: dict):
    """Named tensor archive: an ``.npz`` whose ``__header__`` entry is UTF-8 JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": ARCHIVE_VERSION, **header}
    payload = {k: np.asarray(v) for k, v in tensors.items()}
    payload["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.write_bytes(buf.getvalue())


def load_archive(path) -> tuple[dict, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != ARCHIVE_VERSION:
            raise ValueError(f"unsupported archive version {header.get('format_version')}")
        tensors = {k: data[k].copy() for k in data.files if k != "__header__"}
    return tensors, header
