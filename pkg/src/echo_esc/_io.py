"""Small file helpers shared by the caches, checkpoints and run ledger."""
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    # temp file in the target directory so os.replace stays on one filesystem
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj, indent=2) -> None:
    text = json.dumps(obj, indent=indent, sort_keys=False, ensure_ascii=False)
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def _sibling(stem: Path, ext: str) -> Path:
    # not with_suffix: clip ids may themselves contain dots
    return stem.parent / (stem.name + ext)


def write_f32_blob(stem, array: np.ndarray, meta: dict) -> None:
    """Write ``<stem>.f32`` (little-endian float32) and ``<stem>.json``.

    The blob goes first so a sidecar is never visible without its data.
    """
    stem = Path(stem)
    arr = np.ascontiguousarray(array, dtype="<f4")
    atomic_write_bytes(_sibling(stem, ".f32"), arr.tobytes())
    atomic_write_json(_sibling(stem, ".json"), {**meta, "shape": list(arr.shape)})


def read_f32_blob(stem, expect_meta: dict | None = None):
    """Return the cached array, or None on a miss or a stale/corrupt entry."""
    stem = Path(stem)
    blob, side = _sibling(stem, ".f32"), _sibling(stem, ".json")
    if not (blob.exists() and side.exists()):
        return None
    try:
        meta = json.loads(side.read_text())
        shape = tuple(meta["shape"])
        raw = blob.read_bytes()
    except (OSError, ValueError, KeyError):
        return None
    if expect_meta and any(meta.get(k) != v for k, v in expect_meta.items()):
        return None
    if len(raw) != 4 * int(np.prod(shape)):
        return None
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
