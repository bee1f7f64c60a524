"""Tensor file I/O: raw little-endian f32 binary with a shape sidecar.

`name.bin` holds the flat row-major f32 data; `name.shape` holds one line
of space-separated extents. A small CSV form (first line extents, remaining
lines comma-separated values) is accepted for hand-written fixtures.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping

import numpy as np


def save_tensor(base: Path | str, arr: np.ndarray) -> None:
    base = Path(base)
    a = np.ascontiguousarray(arr, dtype="<f4")
    base.with_suffix(".bin").write_bytes(a.tobytes())
    base.with_suffix(".shape").write_text(" ".join(str(s) for s in a.shape) + "\n")


def load_tensor(base: Path | str) -> np.ndarray:
    base = Path(base)
    shape = tuple(int(s) for s in base.with_suffix(".shape").read_text().split())
    data = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f4")
    n = math.prod(shape) if shape else 1
    if len(data) != n:
        raise ValueError(f"{base}: {len(data)} values for shape {shape}")
    return data.reshape(shape).astype(np.float32)


def load_csv_tensor(path: Path | str) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    shape = tuple(int(s) for s in lines[0].split())
    vals = []
    for ln in lines[1:]:
        vals.extend(float(v) for v in ln.split(","))
    arr = np.asarray(vals, dtype=np.float32)
    n = math.prod(shape) if shape else 1
    if len(arr) != n:
        raise ValueError(f"{path}: {len(arr)} values for shape {shape}")
    return arr.reshape(shape)


def load_dir(directory: Path | str, names: list[str]) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out: dict[str, np.ndarray] = {}
    for name in names:
        if (directory / f"{name}.bin").exists():
            out[name] = load_tensor(directory / name)
        elif (directory / f"{name}.csv").exists():
            out[name] = load_csv_tensor(directory / f"{name}.csv")
        else:
            raise FileNotFoundError(f"no tensor file for {name!r} in {directory}")
    return out


def save_dir(directory: Path | str, tensors: Mapping[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in sorted(tensors):
        save_tensor(directory / name, tensors[name])
