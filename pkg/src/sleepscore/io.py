"""On-disk containers for raw and preprocessed recordings.

A recording is a directory holding `meta.json` (shape, dtype, channel order,
frame rate, landmarks, dark-frame range, recording id), `frames.bin`
(row-major little-endian u16 or f32, dark frames first when present), and
`mask.bin` (u8). Preprocessed output uses the same scheme with a single
channel plus `provenance.json`.
"""

from __future__ import annotations

import json
import os
from typing import Dict, List

import numpy as np

from .errors import DataError
from .preprocess import PreprocessedStack, RecordingStack

_DTYPES = {"f4": "<f4", "u2": "<u2"}


def _load_meta(path: str) -> dict:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{path}: missing meta.json")
    with open(meta_path) as f:
        return json.load(f)


def write_recording(path: str, stack: RecordingStack,
                    dtype: str = "f4") -> None:
    if dtype not in _DTYPES:
        raise DataError(f"unsupported container dtype {dtype!r}")
    os.makedirs(path, exist_ok=True)
    n_dark = 0 if stack.dark_frames is None else stack.dark_frames.shape[0]
    frames = stack.frames
    if n_dark:
        frames = np.concatenate([stack.dark_frames, stack.frames], axis=0)
    meta = {
        "kind": "raw",
        "shape": list(frames.shape),
        "dtype": dtype,
        "channels": list(stack.channels),
        "frame_rate_hz": stack.frame_rate_hz,
        "landmarks": {k: list(map(float, v))
                      for k, v in stack.landmarks.items()},
        "dark_range": [0, n_dark],
        "recording_id": stack.recording_id,
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    frames.astype(_DTYPES[dtype]).tofile(os.path.join(path, "frames.bin"))
    stack.mask.astype(np.uint8).tofile(os.path.join(path, "mask.bin"))


def read_recording(path: str) -> RecordingStack:
    meta = _load_meta(path)
    if meta.get("kind") != "raw":
        raise DataError(f"{path}: not a raw recording container")
    shape = tuple(meta["shape"])
    dtype = _DTYPES.get(meta["dtype"])
    if dtype is None:
        raise DataError(f"{path}: unknown dtype {meta['dtype']!r}")
    frames = np.fromfile(os.path.join(path, "frames.bin"), dtype=dtype)
    if frames.size != int(np.prod(shape)):
        raise DataError(f"{path}: frames.bin holds {frames.size} values, "
                        f"meta declares {np.prod(shape)}")
    frames = frames.reshape(shape).astype(np.float32)
    mask = np.fromfile(os.path.join(path, "mask.bin"), dtype=np.uint8)
    if mask.size != shape[2] * shape[3]:
        raise DataError(f"{path}: mask.bin size does not match frame shape")
    mask = mask.reshape(shape[2], shape[3]).astype(bool)
    d0, d1 = meta.get("dark_range", [0, 0])
    dark = frames[d0:d1] if d1 > d0 else None
    data = np.concatenate([frames[:d0], frames[d1:]], axis=0)
    return RecordingStack(
        frames=data, channels=tuple(meta["channels"]),
        frame_rate_hz=float(meta["frame_rate_hz"]),
        landmarks={k: tuple(v) for k, v in meta["landmarks"].items()},
        mask=mask, recording_id=meta["recording_id"], dark_frames=dark)


def write_preprocessed(path: str, stack: PreprocessedStack) -> None:
    os.makedirs(path, exist_ok=True)
    meta = {
        "kind": "preprocessed",
        "shape": list(stack.frames.shape),
        "dtype": "f4",
        "frame_rate_hz": stack.frame_rate_hz,
        "recording_id": stack.recording_id,
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    stack.frames.astype("<f4").tofile(os.path.join(path, "frames.bin"))
    stack.mask.astype(np.uint8).tofile(os.path.join(path, "mask.bin"))
    with open(os.path.join(path, "provenance.json"), "w") as f:
        json.dump(stack.provenance, f, indent=2, sort_keys=True)
        f.write("\n")


def read_preprocessed(path: str) -> PreprocessedStack:
    meta = _load_meta(path)
    if meta.get("kind") != "preprocessed":
        raise DataError(f"{path}: not a preprocessed container")
    shape = tuple(meta["shape"])
    frames = np.fromfile(os.path.join(path, "frames.bin"), dtype="<f4")
    if frames.size != int(np.prod(shape)):
        raise DataError(f"{path}: frames.bin size mismatch")
    frames = frames.reshape(shape).astype(np.float32)
    mask = np.fromfile(os.path.join(path, "mask.bin"),
                       dtype=np.uint8).reshape(shape[1], shape[2]).astype(bool)
    prov_path = os.path.join(path, "provenance.json")
    provenance: List[dict] = []
    if os.path.exists(prov_path):
        with open(prov_path) as f:
            provenance = json.load(f)
    return PreprocessedStack(frames=frames, mask=mask,
                             frame_rate_hz=float(meta["frame_rate_hz"]),
                             recording_id=meta["recording_id"],
                             provenance=provenance)


def list_recordings(root: str, kind: str = "raw") -> List[str]:
    """Paths of all containers of the given kind directly under `root`."""
    if not os.path.isdir(root):
        raise DataError(f"{root}: no such data directory")
    if os.path.exists(os.path.join(root, "meta.json")):
        candidates = [root]
    else:
        candidates = [os.path.join(root, d) for d in sorted(os.listdir(root))
                      if os.path.isdir(os.path.join(root, d))]
    out = []
    for c in candidates:
        meta_path = os.path.join(c, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as f:
                if json.load(f).get("kind") == kind:
                    out.append(c)
    if not out:
        raise DataError(f"{root}: no {kind} recording containers found")
    return out


def write_truth(path: str, truth: Dict[str, dict]) -> None:
    """Planted ground-truth components; arrays are stored as lists."""
    def convert(obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [convert(v) for v in obj]
        return obj

    with open(path, "w") as f:
        json.dump(convert(truth), f, sort_keys=True)
        f.write("\n")
