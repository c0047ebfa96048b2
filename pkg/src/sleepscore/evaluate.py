"""Quantitative comparison of predicted and reference sleep scoring.

Covers the confusion matrix and derived rates, Cohen's kappa, hypnogram
fragmentation statistics, spectral band power of the global calcium trace
per state, agreement scoring between two label files, and the epoch-duration
sweep harness.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import (Epoch, LabelFile, SleepState, SplitSpec, epoch_stack,
                      frames_per_epoch, split)
from .errors import ConfigError, DataError
from .preprocess import PreprocessedStack

CLASS_NAMES = ("Wake", "NREM", "REM")

DELTA_BAND = (0.4, 4.0)
THETA_BAND = (6.0, 8.0)
DEFAULT_BANDS = {"delta": DELTA_BAND, "theta": THETA_BAND}


# -- confusion matrix and rates ---------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Rows are the reference labels, columns the predictions."""
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list:
        return self.counts.astype(int).tolist()


def _as_int_labels(labels, n_classes: int) -> np.ndarray:
    arr = np.asarray([int(x) for x in labels], dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes - 1}]")
    return arr


def confusion(ref, pred, n_classes: int = 3) -> ConfusionMatrix:
    r = _as_int_labels(ref, n_classes)
    p = _as_int_labels(pred, n_classes)
    if r.shape != p.shape:
        raise DataError(f"reference ({r.size}) and prediction ({p.size}) "
                        "label counts differ")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (r, p), 1)
    return ConfusionMatrix(counts=counts)


def classification_metrics(cm: ConfusionMatrix) -> dict:
    """Per-class precision/recall/F1 plus accuracy and weighted/macro F1.

    Classes with a zero denominator report 0 and are listed under
    `zero_division`.
    """
    counts = cm.counts
    n = counts.sum()
    if n == 0:
        raise DataError("empty confusion matrix")
    n_classes = counts.shape[0]
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    flags = []
    per_class = {}
    f1s = np.zeros(n_classes)
    for c in range(n_classes):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        tp = counts[c, c]
        precision = tp / cols[c] if cols[c] else 0.0
        recall = tp / rows[c] if rows[c] else 0.0
        if not cols[c] or not rows[c]:
            flags.append(name)
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        f1s[c] = f1
        per_class[name] = {"precision": float(precision),
                           "recall": float(recall), "f1": float(f1),
                           "support": int(rows[c])}
    return {
        "per_class": per_class,
        "accuracy": float(np.trace(counts) / n),
        "weighted_f1": float((f1s * rows).sum() / n),
        "macro_f1": float(f1s.mean()),
        "zero_division": flags,
    }


def kappa_from_counts(cm: ConfusionMatrix) -> Tuple[float, bool]:
    """Cohen's kappa and a flag marking the degenerate p_e == 1 case."""
    counts = cm.counts
    n = counts.sum()
    if n == 0:
        raise DataError("cannot compute kappa on zero labels")
    p_o = np.trace(counts) / n
    p_e = float((counts.sum(axis=1) / n) @ (counts.sum(axis=0) / n))
    if p_e >= 1.0:
        return (1.0 if p_o == 1.0 else 0.0), True
    return float((p_o - p_e) / (1.0 - p_e)), False


def cohens_kappa(ref, pred, n_classes: int = 3) -> float:
    value, _ = kappa_from_counts(confusion(ref, pred, n_classes))
    return value


# -- hypnograms and fragmentation ----------------------------------------------------


@dataclass
class Hypnogram:
    """Chronological (epoch_index, state) sequence of one recording."""
    recording_id: str
    duration_s: float
    entries: List[Tuple[int, SleepState]] = field(default_factory=list)

    def __post_init__(self):
        idx = [i for i, _ in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataError("hypnogram epoch indices must strictly increase")

    def states(self) -> List[SleepState]:
        return [s for _, s in self.entries]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch_index", "state"])
            for i, s in self.entries:
                w.writerow([i, s.letter])

    @classmethod
    def read_csv(cls, path, recording_id: str = "",
                 duration_s: float = 10.0) -> "Hypnogram":
        entries = []
        with open(path, newline="") as f:
            for row in csv.reader(f):
                if not row or row[0] == "epoch_index":
                    continue
                entries.append((int(row[0]), SleepState.from_letter(row[1])))
        return cls(recording_id=recording_id, duration_s=duration_s,
                   entries=entries)


def hypnogram_to_png(hyp: Hypnogram, path, row_height: int = 24,
                     col_width: int = 3) -> None:
    """Render a hypnogram as a step-trace PNG (Wake on top, REM at bottom)."""
    from PIL import Image

    states = hyp.states()
    n = len(states)
    h = row_height * 3 + 2
    img = np.full((h, max(1, n * col_width), 3), 255, dtype=np.uint8)
    colors = {SleepState.WAKE: (60, 60, 60), SleepState.NREM: (30, 80, 200),
              SleepState.REM: (200, 40, 40)}
    for i, s in enumerate(states):
        y = int(s) * row_height
        x = i * col_width
        img[y:y + row_height, x:x + col_width] = colors[s]
    Image.fromarray(img, mode="RGB").save(path)


@dataclass
class FragmentationStats:
    mean_bout_s: Dict[str, Optional[float]]
    transitions: int
    bouts: int

    def to_dict(self) -> dict:
        return {"mean_bout_s": self.mean_bout_s,
                "transitions": self.transitions, "bouts": self.bouts}


def fragmentation(hyp: Hypnogram) -> FragmentationStats:
    """Run-length statistics: a bout is a maximal run of one state."""
    states = hyp.states()
    if not states:
        raise DataError("empty hypnogram")
    run_lengths: Dict[SleepState, List[int]] = {s: [] for s in SleepState}
    start = 0
    for i in range(1, len(states) + 1):
        if i == len(states) or states[i] != states[start]:
            run_lengths[states[start]].append(i - start)
            start = i
    n_bouts = sum(len(v) for v in run_lengths.values())
    transitions = sum(1 for a, b in zip(states, states[1:]) if a != b)
    mean_bout = {}
    for s in SleepState:
        runs = run_lengths[s]
        mean_bout[CLASS_NAMES[int(s)]] = (
            float(np.mean(runs) * hyp.duration_s) if runs else None)
    return FragmentationStats(mean_bout_s=mean_bout, transitions=transitions,
                              bouts=n_bouts)


def pooled_fragmentation(hyps: Sequence[Hypnogram]) -> FragmentationStats:
    """Fragmentation over several recordings; runs never cross recordings."""
    if not hyps:
        raise DataError("no hypnograms")
    all_runs: Dict[SleepState, List[int]] = {s: [] for s in SleepState}
    transitions = 0
    duration = hyps[0].duration_s
    for hyp in hyps:
        states = hyp.states()
        start = 0
        for i in range(1, len(states) + 1):
            if i == len(states) or states[i] != states[start]:
                all_runs[states[start]].append(i - start)
                start = i
        transitions += sum(1 for a, b in zip(states, states[1:]) if a != b)
    mean_bout = {}
    n_bouts = 0
    for s in SleepState:
        runs = all_runs[s]
        n_bouts += len(runs)
        mean_bout[CLASS_NAMES[int(s)]] = (
            float(np.mean(runs) * duration) if runs else None)
    return FragmentationStats(mean_bout_s=mean_bout, transitions=transitions,
                              bouts=n_bouts)


# -- spectra ---------------------------------------------------------------------


def global_trace(stack: PreprocessedStack) -> np.ndarray:
    """Mean over brain pixels of each frame."""
    return stack.frames[:, stack.mask].mean(axis=1)


def segment_psd(segments: np.ndarray, fs: float):
    """Hann-windowed one-sided power spectral density per segment, averaged.

    segments: [n_segments, T]. Returns (freqs, psd) with density scaling so
    that sum(psd) * df equals the windowed mean-square signal power.
    """
    segments = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    n = segments.shape[1]
    if n < 2:
        raise DataError("segments must hold at least 2 samples")
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)  # periodic Hann
    spec = np.fft.rfft(segments * window, axis=1)
    scale = 1.0 / (fs * (window * window).sum())
    psd = (spec.real ** 2 + spec.imag ** 2) * scale
    psd[:, 1:] *= 2.0
    if n % 2 == 0:
        psd[:, -1] /= 2.0
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    return freqs, psd.mean(axis=0)


def band_integral(freqs: np.ndarray, psd: np.ndarray,
                  band: Tuple[float, float]) -> float:
    """Integral of the PSD over the closed frequency band."""
    lo, hi = band
    df = freqs[1] - freqs[0]
    sel = (freqs >= lo) & (freqs <= hi)
    return float(psd[sel].sum() * df)


def band_power_by_state(trace: np.ndarray, fs: float,
                        states: Sequence[SleepState], t_epoch: int,
                        bands: Dict[str, Tuple[float, float]] = None) -> dict:
    """Per-state average spectrum of the global trace, one Hann-windowed
    segment per epoch, plus the integrals over the requested bands."""
    bands = DEFAULT_BANDS if bands is None else bands
    n_epochs = len(states)
    if trace.shape[0] < n_epochs * t_epoch:
        raise DataError(f"trace has {trace.shape[0]} samples, needs "
                        f"{n_epochs * t_epoch}")
    segments = trace[:n_epochs * t_epoch].reshape(n_epochs, t_epoch)
    out = {}
    for s in SleepState:
        sel = np.array([st == s for st in states])
        if not sel.any():
            continue
        freqs, psd = segment_psd(segments[sel], fs)
        out[CLASS_NAMES[int(s)]] = {
            "n_epochs": int(sel.sum()),
            "freqs_hz": freqs.tolist(),
            "psd": psd.tolist(),
            "band_power": {name: band_integral(freqs, psd, band)
                           for name, band in bands.items()},
        }
    return out


def pooled_band_power(per_recording: Sequence[Tuple[np.ndarray, float,
                                                    Sequence[SleepState],
                                                    int]],
                      bands: Dict[str, Tuple[float, float]] = None) -> dict:
    """Band powers with epoch segments pooled across recordings per state.

    `per_recording` holds (global trace, frame rate, predicted states per
    epoch, frames per epoch) tuples; all must share rate and epoch length.
    """
    bands = DEFAULT_BANDS if bands is None else bands
    grouped: Dict[SleepState, List[np.ndarray]] = {s: [] for s in SleepState}
    fs = None
    for trace, rate, states, t_epoch in per_recording:
        if fs is None:
            fs = rate
        elif fs != rate:
            raise DataError("recordings disagree on frame rate")
        n = len(states)
        segments = trace[:n * t_epoch].reshape(n, t_epoch)
        for i, s in enumerate(states):
            grouped[SleepState(int(s))].append(segments[i])
    out = {}
    for s, segs in grouped.items():
        if not segs:
            continue
        freqs, psd = segment_psd(np.stack(segs), fs)
        out[CLASS_NAMES[int(s)]] = {
            "n_epochs": len(segs),
            "freqs_hz": freqs.tolist(),
            "psd": psd.tolist(),
            "band_power": {name: band_integral(freqs, psd, band)
                           for name, band in bands.items()},
        }
    return out


# -- the aggregate report -------------------------------------------------------------


@dataclass
class MetricsReport:
    n: int
    confusion: ConfusionMatrix
    accuracy: float
    weighted_f1: float
    macro_f1: float
    kappa: float
    kappa_degenerate: bool
    per_class: dict
    zero_division: list
    fragmentation_pred: Optional[FragmentationStats] = None
    fragmentation_ref: Optional[FragmentationStats] = None
    band_powers: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "confusion": self.confusion.to_list(),
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
            "kappa_degenerate": self.kappa_degenerate,
            "per_class": self.per_class,
            "zero_division": self.zero_division,
        }
        if self.fragmentation_pred is not None:
            out["fragmentation_pred"] = self.fragmentation_pred.to_dict()
        if self.fragmentation_ref is not None:
            out["fragmentation_ref"] = self.fragmentation_ref.to_dict()
        if self.band_powers is not None:
            out["band_powers"] = self.band_powers
        return out

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def summary(self) -> str:
        return (f"n={self.n} acc={self.accuracy:.4f} "
                f"wF1={self.weighted_f1:.4f} mF1={self.macro_f1:.4f} "
                f"kappa={self.kappa:.4f}")


def evaluate_labels(ref, pred, duration_s: float = 10.0,
                    groups: Optional[Sequence[str]] = None) -> MetricsReport:
    """Full agreement report between two label sequences.

    `groups` (one recording id per entry, chronological within a recording)
    enables fragmentation of both labelings.
    """
    cm = confusion(ref, pred)
    metrics = classification_metrics(cm)
    kappa, degenerate = kappa_from_counts(cm)
    report = MetricsReport(
        n=cm.total, confusion=cm, accuracy=metrics["accuracy"],
        weighted_f1=metrics["weighted_f1"], macro_f1=metrics["macro_f1"],
        kappa=kappa, kappa_degenerate=degenerate,
        per_class=metrics["per_class"],
        zero_division=metrics["zero_division"])
    if groups is not None:
        groups = list(groups)
        if len(groups) != cm.total:
            raise DataError("groups length must match label count")
        report.fragmentation_pred = _fragmentation_of(pred, groups, duration_s)
        report.fragmentation_ref = _fragmentation_of(ref, groups, duration_s)
    return report


def _fragmentation_of(labels, groups, duration_s) -> FragmentationStats:
    hyps = []
    by_rec: Dict[str, List[SleepState]] = {}
    for lab, rec in zip(labels, groups):
        by_rec.setdefault(rec, []).append(SleepState(int(lab)))
    for rec in sorted(by_rec):
        hyps.append(Hypnogram(
            recording_id=rec, duration_s=duration_s,
            entries=list(enumerate(by_rec[rec]))))
    return pooled_fragmentation(hyps)


def score_agreement(labels_a: LabelFile, labels_b: LabelFile,
                    duration_s: float = 10.0) -> MetricsReport:
    """Agreement between two label files joined on (recording, epoch)."""
    keys = sorted(set(labels_a.states) & set(labels_b.states))
    if not keys:
        raise DataError("label files share no (recording_id, epoch_index) keys")
    a = [labels_a.states[k] for k in keys]
    b = [labels_b.states[k] for k in keys]
    return evaluate_labels(a, b, duration_s=duration_s,
                           groups=[k[0] for k in keys])


# -- epoch-duration sweep ---------------------------------------------------------


def derive_labels_for_duration(base: LabelFile, base_duration_s: float,
                               new_duration_s: float, frame_rate_hz: float,
                               recording_frames: Dict[str, int]) -> LabelFile:
    """Re-key labels onto a new epoch grid.

    Each new epoch takes the base label at its center time: sub-epochs
    inherit their parent's label, longer epochs the label of their central
    stretch.
    """
    t_base = frames_per_epoch(base_duration_s, frame_rate_hz)
    t_new = frames_per_epoch(new_duration_s, frame_rate_hz)
    out = LabelFile()
    for rec, n_frames in recording_frames.items():
        for j in range(n_frames // t_new):
            center = j * t_new + t_new // 2
            parent = center // t_base
            state = base.states.get((rec, parent))
            if state is not None:
                out.states[(rec, j)] = state
    return out


def duration_sweep(stacks: Sequence[PreprocessedStack], base_labels: LabelFile,
                   base_duration_s: float, durations: Sequence[float],
                   split_spec: SplitSpec, train_config=None, arch=None,
                   params=None) -> List[dict]:
    """Re-epoch, (re)train, and evaluate at each epoch duration.

    With `params` given the trained model is reused across durations
    (the network is sequence-length agnostic); otherwise `train_config` and
    `arch` drive a fresh training run per duration. Returns one row per
    duration.
    """
    from .train import evaluate_split, train  # local import; train uses eval

    if params is None and (train_config is None or arch is None):
        raise ConfigError("duration_sweep needs either trained params or "
                          "a train_config plus arch to retrain")
    rate = stacks[0].frame_rate_hz
    rec_frames = {s.recording_id: s.frames.shape[0] for s in stacks}
    rows = []
    for duration in durations:
        labels = derive_labels_for_duration(base_labels, base_duration_s,
                                            duration, rate, rec_frames)
        epochs: List[Epoch] = []
        for s in stacks:
            epochs.extend(epoch_stack(s, duration, labels,
                                      require_labels=False))
        epochs = [e for e in epochs if e.label is not None]
        train_set, val_set, test_set = split(epochs, split_spec)
        if params is None:
            t_epoch = frames_per_epoch(duration, rate)
            arch_d = replace(arch, frames_per_epoch=t_epoch)
            run_params, _ = train(arch_d, train_set, val_set, train_config)
        else:
            run_params = params
        report = evaluate_split(run_params, test_set,
                                duration_s=duration)
        rows.append({
            "duration_s": duration,
            "n_train": len(train_set), "n_val": len(val_set),
            "n_test": len(test_set),
            "accuracy": report.accuracy,
            "weighted_f1": report.weighted_f1,
            "macro_f1": report.macro_f1,
            "kappa": report.kappa,
        })
    return rows


def write_sweep_csv(rows: List[dict], path) -> None:
    cols = ["duration_s", "n_train", "n_val", "n_test", "accuracy",
            "weighted_f1", "macro_f1", "kappa"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] for c in cols])
