"""Byte-reproducible checkpoint archives.

An archive is a zip holding ``meta.json`` plus one ``.npy`` member per
parameter array. Member timestamps are pinned so identical models produce
identical files.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from glss.errors import CheckpointError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def write_archive(path, fmt: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "meta.json", json.dumps({"format": fmt, **meta}, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _member(zf, f"arrays/{name}.npy", buf.getvalue())


def read_archive(path, fmt: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != fmt:
            raise CheckpointError(f"{path}: expected format {fmt!r}, found {meta.get('format')!r}")
        arrays = {}
        for name in zf.namelist():
            if name.startswith("arrays/"):
                arrays[name[len("arrays/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, arrays
