"""Deterministic synthetic recordings with known state-dependent dynamics.

Each recording follows a Markov state sequence over the three classes. The
planted neural signal is a state-specific oscillation confined to a
state-specific cortical region: wakefulness is broadband (1-8 Hz) and
posterior, NREM is a delta-range burst in the center of each epoch and
anterior, REM is a theta-range oscillation that stays phase-coherent across
a whole bout and posterior. Blue and green channels share an identical
multiplicative hemodynamic confound, the blue channel additionally carries a
linear bleaching trend, white noise, and a dark offset, so every
preprocessing step has something real to remove. All planted components are
returned alongside the frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dataset import LabelFile, SleepState, frames_per_epoch
from .errors import ConfigError
from .preprocess import RecordingStack, default_atlas_landmarks, smooth

REGIONS = ("full", "anterior", "posterior", "anterior_left", "anterior_right",
           "posterior_left", "posterior_right")


@dataclass
class StateSignature:
    """Spectral band, cortical region, and temporal extent of one state.

    `region` is a named area or an explicit ("box", y0, y1, x0, x1) tuple of
    fractional image coordinates.
    """
    band: Tuple[float, float]
    region: object
    burst_frac: float = 1.0  # fraction of the epoch carrying signal (centered)
    n_components: int = 1    # >1 draws several sines across the band
    coherent_bouts: bool = False  # one phase per bout instead of per epoch

    def __post_init__(self):
        if isinstance(self.region, (tuple, list)):
            if len(self.region) != 5 or self.region[0] != "box":
                raise ConfigError(f"region: box spec must be "
                                  f"('box', y0, y1, x0, x1), got {self.region}")
        elif self.region not in REGIONS:
            raise ConfigError(f"region: unknown region {self.region!r}")
        if not 0.0 < self.burst_frac <= 1.0:
            raise ConfigError(f"burst_frac: must be in (0, 1], got "
                              f"{self.burst_frac}")


def default_signatures() -> Dict[SleepState, StateSignature]:
    return {
        SleepState.WAKE: StateSignature(band=(1.0, 8.0), region="posterior",
                                        n_components=4),
        SleepState.NREM: StateSignature(band=(1.0, 3.0), region="anterior",
                                        burst_frac=0.5),
        SleepState.REM: StateSignature(band=(6.2, 7.6), region="posterior",
                                       coherent_bouts=True),
    }


@dataclass
class SynthSpec:
    seed: int = 0
    image_hw: Tuple[int, int] = (32, 32)
    frame_rate_hz: float = 16.8
    n_recordings: int = 8
    epochs_per_recording: int = 20
    epoch_duration_s: float = 2.0
    n_dark_frames: int = 5
    dark_level: float = 100.0
    baseline_blue: float = 1000.0
    baseline_green: float = 800.0
    modulation: float = 0.25
    snr: Optional[float] = 5.0  # modulation amplitude / noise std; None = clean
    hemo_amplitude: float = 0.10
    trend_total: float = -0.05  # fractional drift over the full recording
    phase_gradient_s: float = 0.12  # oscillation lag across the region
    dwell_epochs: Dict[SleepState, float] = field(
        default_factory=lambda: {SleepState.WAKE: 3.0, SleepState.NREM: 4.0,
                                 SleepState.REM: 3.0})
    signatures: Dict[SleepState, StateSignature] = field(
        default_factory=default_signatures)
    keep_truth_frames: bool = False

    def __post_init__(self):
        if self.n_recordings < 1 or self.epochs_per_recording < 1:
            raise ConfigError("n_recordings / epochs_per_recording must be >= 1")
        if self.snr is not None and self.snr <= 0:
            raise ConfigError(f"snr: must be positive or None, got {self.snr}")
        for state, sig in self.signatures.items():
            lo, hi = sig.band
            if not 0 < lo < hi < self.frame_rate_hz / 2:
                raise ConfigError(f"band: {state.name} band {sig.band} must "
                                  f"lie below Nyquist")


@dataclass
class SynthResult:
    recordings: List[RecordingStack]
    labels: LabelFile
    truth: Dict[str, dict]


def brain_mask(hw: Tuple[int, int]) -> np.ndarray:
    """Elliptical brain footprint inscribed in the frame."""
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    return ((ys - cy) / (0.46 * h)) ** 2 + ((xs - cx) / (0.46 * w)) ** 2 <= 1.0


def region_pattern(region, hw: Tuple[int, int],
                   mask: np.ndarray) -> np.ndarray:
    """Smooth [0, 1] spatial weighting of a region, zero off-brain.

    Anterior means small row indices (top of the frame). `region` may also
    be a ("box", y0, y1, x0, x1) tuple of fractional coordinates.
    """
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w]
    ramp = np.ones((h, w))

    def soft_edge(coord, edge, keep_below):
        width = max(2.0, 0.08 * h)
        d = (edge - coord) if keep_below else (coord - edge)
        return np.clip(0.5 + d / width, 0.0, 1.0)

    if isinstance(region, (tuple, list)):
        _, y0, y1, x0, x1 = region
        ramp = (soft_edge(ys, y0 * h, keep_below=False)
                * soft_edge(ys, y1 * h, keep_below=True)
                * soft_edge(xs, x0 * w, keep_below=False)
                * soft_edge(xs, x1 * w, keep_below=True))
        return ramp * mask
    if "anterior" in region:
        ramp = ramp * soft_edge(ys, 0.45 * h, keep_below=True)
    if "posterior" in region:
        ramp = ramp * soft_edge(ys, 0.55 * h, keep_below=False)
    if "left" in region:
        ramp = ramp * soft_edge(xs, 0.48 * w, keep_below=True)
    if "right" in region:
        ramp = ramp * soft_edge(xs, 0.52 * w, keep_below=False)
    return ramp * mask


def markov_states(n: int, dwell: Dict[SleepState, float],
                  rng: np.random.Generator) -> List[SleepState]:
    """Sleep-like chain: Wake -> NREM, NREM -> Wake or REM, REM -> Wake."""
    leave = {s: 1.0 / max(d, 1.0) for s, d in dwell.items()}
    state = rng.choice([SleepState.WAKE, SleepState.NREM, SleepState.REM],
                       p=[0.4, 0.4, 0.2])
    out = []
    for _ in range(n):
        out.append(SleepState(int(state)))
        if rng.random() < leave[SleepState(int(state))]:
            if state == SleepState.WAKE:
                state = SleepState.NREM
            elif state == SleepState.NREM:
                state = SleepState.REM if rng.random() < 0.65 else SleepState.WAKE
            else:
                state = SleepState.WAKE
    return out


def _bouts(states: List[SleepState]):
    runs = []
    start = 0
    for i in range(1, len(states) + 1):
        if i == len(states) or states[i] != states[start]:
            runs.append((start, i, states[start]))
            start = i
    return runs


def _burst_window(t_epoch: int, frac: float) -> np.ndarray:
    """Raised-cosine window over the central `frac` of an epoch."""
    if frac >= 1.0:
        return np.ones(t_epoch)
    n = max(2, int(round(frac * t_epoch)))
    start = (t_epoch - n) // 2
    win = np.zeros(t_epoch)
    win[start:start + n] = 0.5 - 0.5 * np.cos(
        2 * np.pi * np.arange(n) / (n - 1))
    return win


def _stratified_freqs(lo: float, hi: float, n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One frequency per equal sub-band, so broadband activity always
    actually spans its band."""
    edges = np.linspace(lo, hi, n + 1)
    return np.array([rng.uniform(edges[i], edges[i + 1]) for i in range(n)])


def _neural_field(states: List[SleepState], t_epoch: int, rate: float,
                  sigs: Dict[SleepState, StateSignature],
                  patterns: Dict[SleepState, np.ndarray],
                  phase_gradient_s: float, rng: np.random.Generator):
    """Planted fractional activity field [T, H, W] of unit peak scale.

    Oscillations propagate across the active region with a fixed lag
    gradient (`phase_gradient_s` seconds corner to corner), which keeps the
    spatiotemporal signal full-rank so global signal regression cannot
    cancel it outright. Returns (field, per-epoch base frequency list,
    zero-lag reference trace).
    """
    n_frames = len(states) * t_epoch
    hw = next(iter(patterns.values())).shape
    gy, gx = np.mgrid[0:hw[0], 0:hw[1]]
    tau = phase_gradient_s * (0.7 * gy / max(hw[0] - 1, 1)
                              + 0.3 * gx / max(hw[1] - 1, 1))
    field = np.zeros((n_frames, *hw))
    reference = np.zeros(n_frames)
    freqs = np.zeros(len(states))
    t_all = np.arange(n_frames) / rate

    def add_component(seg: slice, f: float, phase: float, amp: float,
                      window: np.ndarray, pattern: np.ndarray):
        w = 2 * np.pi * f
        sin_t = np.sin(w * t_all[seg] + phase) * window
        cos_t = np.cos(w * t_all[seg] + phase) * window
        cos_lag = pattern * np.cos(w * tau)
        sin_lag = pattern * np.sin(w * tau)
        field[seg] += amp * (sin_t[:, None, None] * cos_lag
                             - cos_t[:, None, None] * sin_lag)
        reference[seg] += amp * sin_t

    for start, stop, state in _bouts(states):
        sig = sigs[state]
        lo, hi = sig.band
        pattern = patterns[state]
        if sig.coherent_bouts:
            seg = slice(start * t_epoch, stop * t_epoch)
            f = rng.uniform(lo, hi)
            window = np.tile(_burst_window(t_epoch, sig.burst_frac),
                             stop - start)
            add_component(seg, f, rng.uniform(0, 2 * np.pi), 1.0, window,
                          pattern)
            freqs[start:stop] = f
            continue
        for e in range(start, stop):
            seg = slice(e * t_epoch, (e + 1) * t_epoch)
            window = _burst_window(t_epoch, sig.burst_frac)
            if sig.n_components > 1:
                comp = _stratified_freqs(lo, hi, sig.n_components, rng)
                amp = 1.0 / np.sqrt(sig.n_components)
                for f in comp:
                    add_component(seg, f, rng.uniform(0, 2 * np.pi), amp,
                                  window, pattern)
                freqs[e] = comp[0]
            else:
                f = rng.uniform(lo, hi)
                add_component(seg, f, rng.uniform(0, 2 * np.pi), 1.0, window,
                              pattern)
                freqs[e] = f
    return field, freqs.tolist(), reference


def _smooth_field(hw: Tuple[int, int], rng: np.random.Generator,
                  lo: float = 0.3, hi: float = 1.0) -> np.ndarray:
    field_ = smooth(rng.standard_normal((1, *hw)), size=5, sigma=2.0)[0]
    span = field_.max() - field_.min()
    if span == 0:
        return np.full(hw, (lo + hi) / 2)
    return lo + (hi - lo) * (field_ - field_.min()) / span


def generate(spec: SynthSpec) -> SynthResult:
    """Produce `n_recordings` raw stacks, their labels, and the planted truth."""
    t_epoch = frames_per_epoch(spec.epoch_duration_s, spec.frame_rate_hz)
    hw = spec.image_hw
    mask = brain_mask(hw)
    patterns = {s: region_pattern(sig.region, hw, mask)
                for s, sig in spec.signatures.items()}
    landmarks = default_atlas_landmarks(hw)
    noise_std = 0.0 if spec.snr is None else \
        spec.modulation / spec.snr

    recordings = []
    labels = LabelFile()
    truth: Dict[str, dict] = {
        "__spec__": {"seed": spec.seed, "image_hw": list(hw),
                     "frame_rate_hz": spec.frame_rate_hz,
                     "epoch_duration_s": spec.epoch_duration_s,
                     "frames_per_epoch": t_epoch,
                     "regions": {s.name: spec.signatures[s].region
                                 for s in spec.signatures}},
    }

    for r in range(spec.n_recordings):
        rec_id = f"rec{r:03d}"
        rng = np.random.default_rng([spec.seed, r])
        states = markov_states(spec.epochs_per_recording, spec.dwell_epochs,
                               rng)
        n_frames = spec.epochs_per_recording * t_epoch
        t_idx = np.arange(n_frames)

        field_, freqs, reference = _neural_field(
            states, t_epoch, spec.frame_rate_hz, spec.signatures, patterns,
            spec.phase_gradient_s, rng)
        neural = spec.modulation * field_

        # rank-2 hemodynamics, identical (as a fraction) in both channels
        amp1 = _smooth_field(hw, rng) * spec.hemo_amplitude
        amp2 = _smooth_field(hw, rng) * spec.hemo_amplitude * 0.6
        tt = t_idx / spec.frame_rate_hz
        hemo = (amp1 * np.sin(2 * np.pi * 0.30 * tt
                              + rng.uniform(0, 2 * np.pi))[:, None, None]
                + amp2 * np.sin(2 * np.pi * 0.12 * tt
                                + rng.uniform(0, 2 * np.pi))[:, None, None])

        trend = spec.baseline_blue * spec.trend_total * (t_idx / max(n_frames - 1, 1))
        blue = (spec.baseline_blue * (1.0 + neural) * (1.0 + hemo)
                + trend[:, None, None]
                + spec.dark_level)
        green = (spec.baseline_green * (1.0 + hemo) + spec.dark_level)
        green = np.broadcast_to(green, blue.shape).copy()
        if noise_std > 0:
            blue += rng.normal(0, spec.baseline_blue * noise_std, blue.shape)
            green += rng.normal(0, spec.baseline_green * noise_std, green.shape)

        dark = np.full((spec.n_dark_frames, 2, *hw), spec.dark_level)
        if noise_std > 0:
            dark += rng.normal(0, 0.005 * spec.dark_level, dark.shape)

        frames = np.stack([blue, green], axis=1).astype(np.float32)
        recordings.append(RecordingStack(
            frames=frames, channels=("blue", "green"),
            frame_rate_hz=spec.frame_rate_hz, landmarks=landmarks,
            mask=mask, recording_id=rec_id,
            dark_frames=dark.astype(np.float32)))

        for i, s in enumerate(states):
            labels.states[(rec_id, i)] = s

        entry = {
            "states": [s.name for s in states],
            "freqs_hz": freqs,
            "reference_trace": spec.modulation * reference,
            "region_traces": {
                s.name: spec.modulation
                * field_[:, patterns[s] > 0.5].mean(axis=1)
                for s in spec.signatures},
        }
        if spec.keep_truth_frames:
            # the dF/F that exact pipeline arithmetic recovers on clean data
            nbar = neural.mean(axis=0)
            entry["dff_frames"] = ((1.0 + neural) / (1.0 + nbar) - 1.0) * mask
        truth[rec_id] = entry

    return SynthResult(recordings=recordings, labels=labels, truth=truth)
