"""Flat checkpoint archive: JSON header + one little-endian float32 blob per
parameter. Round-trips are bit-exact; archive bytes are reproducible (fixed
entry timestamps, stored uncompressed in sorted order)."""

from __future__ import annotations

import json
import zipfile
from typing import Iterable

import numpy as np

from ..errors import FormatError
from .nn import Parameter

_EPOCH = (1980, 1, 1, 0, 0, 0)
FORMAT_NAME = "weedvision-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, params: Iterable[Parameter], config: dict) -> None:
    """Write parameters and a model-config header to a zip archive."""
    entries = {}
    shapes = {}
    for p in params:
        if not p.name:
            raise FormatError("cannot checkpoint an unnamed parameter")
        if p.name in entries:
            raise FormatError(f"duplicate parameter name: {p.name}")
        entries[p.name] = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        shapes[p.name] = list(p.shape)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config,
        "params": shapes,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(entries):
            info = zipfile.ZipInfo(f"params/{name}.bin", date_time=_EPOCH)
            zf.writestr(info, entries[name])


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (config, {name: float32 array}) from an archive."""
    with zipfile.ZipFile(path, "r") as zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError:
            raise FormatError(f"{path}: missing header.json") from None
        if header.get("format") != FORMAT_NAME:
            raise FormatError(f"{path}: not a {FORMAT_NAME} archive")
        arrays = {}
        for name, shape in header["params"].items():
            raw = zf.read(f"params/{name}.bin")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            arrays[name] = arr.astype(np.float32)
    return header["config"], arrays


def load_into(params: Iterable[Parameter], arrays: dict[str, np.ndarray]) -> None:
    """Assign loaded arrays onto live parameters by name; shapes must match."""
    params = list(params)
    missing = [p.name for p in params if p.name not in arrays]
    if missing:
        raise FormatError(f"checkpoint missing parameters: {missing[:5]}")
    for p in params:
        arr = arrays[p.name]
        if tuple(arr.shape) != p.shape:
            raise FormatError(
                f"shape mismatch for {p.name}: checkpoint {arr.shape}, model {p.shape}")
        p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
