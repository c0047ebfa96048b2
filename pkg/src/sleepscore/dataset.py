"""Epoching, labeling, splitting, and batching of preprocessed recordings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .preprocess import PreprocessedStack


class SleepState(IntEnum):
    WAKE = 0
    NREM = 1
    REM = 2

    @property
    def letter(self) -> str:
        return {"WAKE": "W", "NREM": "N", "REM": "R"}[self.name]

    @classmethod
    def from_letter(cls, letter: str) -> "SleepState":
        table = {"W": cls.WAKE, "N": cls.NREM, "R": cls.REM}
        key = letter.strip().upper()
        if key not in table:
            raise DataError(f"unknown state label {letter!r} (expected W/N/R)")
        return table[key]


@dataclass
class Epoch:
    """A fixed-duration window of one recording with an optional state label."""
    frames: np.ndarray  # [T, 1, H, W] float32
    label: Optional[SleepState]
    recording_id: str
    epoch_index: int
    duration_s: float


@dataclass
class LabelFile:
    """Reference labels keyed by (recording_id, epoch_index)."""
    states: Dict[Tuple[str, int], SleepState] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def read(cls, path) -> "LabelFile":
        out = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            for row in reader:
                if not row or row[0] == "recording_id":
                    continue
                if len(row) != 3:
                    raise DataError(f"{path}: malformed label row {row!r}")
                rec, idx, letter = row
                out.states[(rec, int(idx))] = SleepState.from_letter(letter)
        return out

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["recording_id", "epoch_index", "label"])
            for (rec, idx), state in sorted(self.states.items()):
                writer.writerow([rec, idx, state.letter])


def frames_per_epoch(duration_s: float, frame_rate_hz: float) -> int:
    n = round(duration_s * frame_rate_hz)
    if n < 1:
        raise ConfigError(f"duration_s: epoch of {duration_s}s at "
                          f"{frame_rate_hz}Hz holds no frames")
    return n


def epoch_stack(stack: PreprocessedStack, duration_s: float,
                labels: Optional[LabelFile] = None,
                require_labels: bool = True) -> List[Epoch]:
    """Cut a recording into consecutive non-overlapping epochs.

    The trailing partial window is dropped. Labels are joined on
    (recording_id, epoch_index); a count mismatch raises with a diff of the
    missing/extra keys unless require_labels is False.
    """
    t_epoch = frames_per_epoch(duration_s, stack.frame_rate_hz)
    t_total = stack.frames.shape[0]
    n = t_total // t_epoch
    if n < 1:
        raise DataError(f"recording {stack.recording_id!r} has {t_total} "
                        f"frames, shorter than one {t_epoch}-frame epoch")
    epochs: List[Epoch] = []
    missing = []
    for i in range(n):
        window = stack.frames[i * t_epoch:(i + 1) * t_epoch]
        label = None
        if labels is not None:
            label = labels.states.get((stack.recording_id, i))
        if label is None:
            missing.append((stack.recording_id, i))
        epochs.append(Epoch(frames=window[:, None].astype(np.float32),
                            label=label, recording_id=stack.recording_id,
                            epoch_index=i, duration_s=duration_s))
    if require_labels and labels is not None and missing:
        extra = [k for k in labels.states
                 if k[0] == stack.recording_id and k[1] >= n]
        raise DataError(
            f"label mismatch for recording {stack.recording_id!r}: "
            f"{len(missing)} epochs unlabeled (first: {missing[:3]}), "
            f"{len(extra)} labels beyond the {n} epochs (first: {extra[:3]})")
    return epochs


@dataclass
class SplitSpec:
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    mode: str = "epoch_shuffle"  # or "by_recording"

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions: must sum to 1, got {self.fractions}")
        if self.mode not in ("epoch_shuffle", "by_recording"):
            raise ConfigError(f"mode: unknown split mode {self.mode!r}")


def split(epochs: Sequence[Epoch], spec: SplitSpec):
    """Partition epochs into train/val/test.

    epoch_shuffle draws val/test as floor(N*f) epochs each after a seeded
    shuffle, remainder to train. by_recording assigns whole recordings,
    filling test then val to at least their floor(N*f) epoch counts.
    """
    n = len(epochs)
    if n < 10:
        raise DataError(f"need at least 10 epochs to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    n_val = int(math.floor(n * spec.fractions[1] + 1e-9))
    n_test = int(math.floor(n * spec.fractions[2] + 1e-9))

    if spec.mode == "epoch_shuffle":
        order = rng.permutation(n)
        test_idx = order[:n_test]
        val_idx = order[n_test:n_test + n_val]
        train_idx = order[n_test + n_val:]
        return ([epochs[i] for i in sorted(train_idx)],
                [epochs[i] for i in sorted(val_idx)],
                [epochs[i] for i in sorted(test_idx)])

    by_rec: Dict[str, List[Epoch]] = {}
    for e in epochs:
        by_rec.setdefault(e.recording_id, []).append(e)
    rec_ids = sorted(by_rec)
    rng.shuffle(rec_ids)
    test: List[Epoch] = []
    val: List[Epoch] = []
    train: List[Epoch] = []
    for rec in rec_ids:
        if len(test) < n_test:
            test.extend(by_rec[rec])
        elif len(val) < n_val:
            val.extend(by_rec[rec])
        else:
            train.extend(by_rec[rec])
    return train, val, test


def class_histogram(epochs: Iterable[Epoch]) -> Tuple[int, int, int]:
    """Labeled-epoch counts per class (Wake, NREM, REM)."""
    counts = [0, 0, 0]
    for e in epochs:
        if e.label is not None:
            counts[int(e.label)] += 1
    return tuple(counts)


def context_window(epochs: Sequence[Epoch], center_index: int,
                   context_s: float, frame_rate_hz: float) -> Optional[Epoch]:
    """Widen one epoch symmetrically using its neighbors' frames.

    `epochs` must be the chronological epochs of a single recording. The
    returned window keeps the center epoch's label and index; None when a
    needed neighbor is missing.
    """
    center = epochs[center_index]
    pad_frames = round((context_s - center.duration_s) / 2 * frame_rate_hz)
    if pad_frames < 0:
        raise ConfigError(f"context_s: window {context_s}s shorter than the "
                          f"epoch duration {center.duration_s}s")
    if pad_frames == 0:
        return center
    if center_index == 0 or center_index == len(epochs) - 1:
        return None
    prev, nxt = epochs[center_index - 1], epochs[center_index + 1]
    if prev.epoch_index != center.epoch_index - 1 or \
            nxt.epoch_index != center.epoch_index + 1 or \
            prev.recording_id != center.recording_id or \
            nxt.recording_id != center.recording_id:
        return None
    t = center.frames.shape[0]
    if pad_frames > t:
        return None
    frames = np.concatenate([prev.frames[t - pad_frames:], center.frames,
                             nxt.frames[:pad_frames]], axis=0)
    return Epoch(frames=frames, label=center.label,
                 recording_id=center.recording_id,
                 epoch_index=center.epoch_index, duration_s=context_s)


def context_windows(epochs: Sequence[Epoch], context_s: float,
                    frame_rate_hz: float):
    """Context windows for every epoch of one recording; returns
    (windows, skipped_count)."""
    ordered = sorted(epochs, key=lambda e: e.epoch_index)
    windows = []
    skipped = 0
    for i in range(len(ordered)):
        w = context_window(ordered, i, context_s, frame_rate_hz)
        if w is None:
            skipped += 1
        else:
            windows.append(w)
    return windows, skipped


def minibatches(epochs: Sequence[Epoch], batch_size: int,
                rng: Optional[np.random.Generator] = None):
    """Yield (frames [B,T,1,H,W] float32, labels [B] int64) batches."""
    order = np.arange(len(epochs))
    if rng is not None:
        rng.shuffle(order)
    for s in range(0, len(order), batch_size):
        chunk = [epochs[i] for i in order[s:s + batch_size]]
        frames = np.stack([e.frames for e in chunk])
        labels = np.array([-1 if e.label is None else int(e.label)
                           for e in chunk], dtype=np.int64)
        yield frames, labels
