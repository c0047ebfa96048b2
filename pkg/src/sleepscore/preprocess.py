"""Fluorescence preprocessing: raw multi-channel stacks to masked dF/F.

Step order is fixed: dark-frame subtraction, per-pixel linear detrend,
global signal regression, ratiometric hemodynamic correction against the
green reflectance channel, spatial smoothing, landmark registration to the
atlas grid, brain masking. Dark/detrend/GSR run on both the blue and green
channels so any multiplicative component common to the two survives intact
until the ratio cancels it. All arithmetic is float64 internally.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError, ShapeError

CHANNEL_NAMES = ("blue", "green", "yellow", "red")


@dataclass
class RecordingStack:
    """Raw frames [T, C, H, W] plus acquisition metadata."""
    frames: np.ndarray
    channels: Tuple[str, ...]
    frame_rate_hz: float
    landmarks: Dict[str, Tuple[float, float]]  # pixel (x, y) of bregma/lambda
    mask: np.ndarray
    recording_id: str
    dark_frames: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be [T,C,H,W], got {self.frames.shape}")
        if len(self.channels) != self.frames.shape[1]:
            raise DataError(f"{len(self.channels)} channel names for "
                            f"{self.frames.shape[1]} channels")
        if self.frame_rate_hz <= 0:
            raise DataError(f"frame rate must be positive, got {self.frame_rate_hz}")
        if self.mask.shape != self.frames.shape[2:]:
            raise ShapeError(f"mask {self.mask.shape} does not match frames "
                             f"{self.frames.shape[2:]}")
        if not self.mask.any():
            raise DataError("mask has no brain pixels")
        b, l = self.landmarks.get("bregma"), self.landmarks.get("lambda")
        if b is None or l is None:
            raise DataError("landmarks must include bregma and lambda")
        if tuple(b) == tuple(l):
            raise DataError("bregma and lambda landmarks coincide")

    def channel(self, name: str) -> np.ndarray:
        try:
            idx = self.channels.index(name)
        except ValueError:
            raise DataError(f"recording {self.recording_id!r} has no "
                            f"{name!r} channel (has {self.channels})")
        return self.frames[:, idx]


@dataclass
class PreprocessedStack:
    """Corrected single-channel fluorescence [T, H, W] with provenance."""
    frames: np.ndarray
    mask: np.ndarray
    frame_rate_hz: float
    recording_id: str
    provenance: List[dict] = field(default_factory=list)


@dataclass
class PipelineConfig:
    subtract_dark: bool = True
    detrend: bool = True
    global_signal_regression: bool = True
    ratiometric: bool = True
    smooth: bool = True
    register: bool = True
    smooth_kernel_size: int = 5
    smooth_sigma: float = 1.2
    smooth_kind: str = "gaussian"  # or "box"
    atlas_bregma: Optional[Tuple[float, float]] = None  # defaults from size
    atlas_lambda: Optional[Tuple[float, float]] = None
    output_dtype: str = "float32"

    def __post_init__(self):
        if self.smooth_kind not in ("gaussian", "box"):
            raise ConfigError(f"smooth_kind: must be 'gaussian' or 'box', "
                              f"got {self.smooth_kind!r}")
        if self.smooth_kernel_size % 2 == 0 or self.smooth_kernel_size < 1:
            raise ConfigError(f"smooth_kernel_size: must be odd, got "
                              f"{self.smooth_kernel_size}")
        if self.output_dtype not in ("float32", "float64"):
            raise ConfigError(f"output_dtype: must be float32 or float64, "
                              f"got {self.output_dtype!r}")


def default_atlas_landmarks(hw: Tuple[int, int]) -> Dict[str, Tuple[float, float]]:
    """Canonical bregma/lambda pixel positions on a given grid: both on the
    midline, bregma anterior (top) of lambda."""
    h, w = hw
    return {"bregma": (0.5 * w, 0.25 * h), "lambda": (0.5 * w, 0.75 * h)}


# -- individual steps -----------------------------------------------------------


def subtract_dark(frames: np.ndarray,
                  dark_frames: Optional[np.ndarray]) -> np.ndarray:
    """Subtract the temporal mean of the non-illuminated frames."""
    if dark_frames is None:
        warnings.warn("no dark frames available; dark subtraction skipped")
        return frames
    if dark_frames.shape[1:] != frames.shape[1:]:
        raise ShapeError(f"dark frames {dark_frames.shape[1:]} do not match "
                         f"data frames {frames.shape[1:]}")
    return frames - dark_frames.mean(axis=0)


def detrend(frames: np.ndarray) -> np.ndarray:
    """Remove each pixel's least-squares linear trend, keeping its mean.

    frames: [T, ...]; requires T >= 3.
    """
    t_total = frames.shape[0]
    if t_total < 3:
        raise DataError(f"detrend requires >= 3 frames, got {t_total}")
    t = np.arange(t_total, dtype=frames.dtype)
    tc = t - t.mean()
    denom = np.dot(tc, tc)
    mean = frames.mean(axis=0)
    slope = np.tensordot(tc, frames - mean, axes=(0, 0)) / denom
    return frames - tc.reshape(-1, *([1] * (frames.ndim - 1))) * slope


def global_signal_regress(frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Regress the brain-wide mean trace out of every pixel trace.

    Traces are mean-centered first and pixel means are restored afterwards,
    so only temporal structure shared with the global signal is removed.
    """
    if not mask.any():
        raise DataError("mask has no brain pixels")
    mean = frames.mean(axis=0)
    centered = frames - mean
    g = centered[:, mask].mean(axis=1)
    gg = np.dot(g, g)
    if gg == 0.0:
        warnings.warn("global signal is constant; regression skipped")
        return frames.copy()
    beta = np.tensordot(g, centered, axes=(0, 0)) / gg
    return centered - g.reshape(-1, *([1] * (frames.ndim - 1))) * beta + mean


def ratiometric_correct(blue: np.ndarray, green: np.ndarray,
                        mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """Hemodynamic correction: (F_b/mean F_b) / (F_g/mean F_g) - 1.

    Brain pixels whose temporal mean is not positive in either channel are
    zeroed; the count of such pixels is returned.
    """
    if blue.shape != green.shape:
        raise ShapeError(f"blue {blue.shape} and green {green.shape} stacks "
                         "must be co-registered and equal shape")
    mb = blue.mean(axis=0)
    mg = green.mean(axis=0)
    bad = mask & ((mb <= 0) | (mg <= 0))
    safe_mb = np.where(mb == 0, 1.0, mb)
    safe_mg = np.where(mg == 0, 1.0, mg)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (blue / safe_mb) / (green / safe_mg) - 1.0
    out[~np.isfinite(out)] = 0.0
    out[:, bad] = 0.0
    return out, int(bad.sum())


def smoothing_kernel(size: int = 5, sigma: float = 1.2,
                     kind: str = "gaussian") -> np.ndarray:
    """1-D smoothing tap vector, normalized to unit sum."""
    if kind == "box":
        return np.full(size, 1.0 / size)
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(frames: np.ndarray, size: int = 5, sigma: float = 1.2,
           kind: str = "gaussian") -> np.ndarray:
    """Per-frame 2-D smoothing with a separable normalized kernel and
    half-sample symmetric reflection at the borders (conserves frame sums)."""
    k = smoothing_kernel(size, sigma, kind).astype(frames.dtype)
    half = size // 2

    def along(x, axis):
        pad = [(0, 0)] * x.ndim
        pad[axis] = (half, half)
        xp = np.pad(x, pad, mode="symmetric")
        out = np.zeros_like(x)
        n = x.shape[axis]
        sl = [slice(None)] * x.ndim
        for j in range(size):
            sl[axis] = slice(j, j + n)
            out += k[j] * xp[tuple(sl)]
        return out

    return along(along(frames, frames.ndim - 2), frames.ndim - 1)


def similarity_from_landmarks(src: Dict[str, Tuple[float, float]],
                              dst: Dict[str, Tuple[float, float]]):
    """Similarity transform (rotation + isotropic scale + translation) mapping
    the two source landmarks onto the two destination landmarks.

    Returned as complex coefficients (a, b) with w = a*z + b acting on
    x + i*y points.
    """
    z1 = complex(*src["bregma"])
    z2 = complex(*src["lambda"])
    w1 = complex(*dst["bregma"])
    w2 = complex(*dst["lambda"])
    if z1 == z2:
        raise DataError("landmarks coincide; transform is degenerate")
    a = (w1 - w2) / (z1 - z2)
    b = w1 - a * z1
    return a, b


def bilinear_sample(frames: np.ndarray, xs: np.ndarray,
                     ys: np.ndarray) -> np.ndarray:
    """Sample frames [T,H,W] at fractional (xs, ys) grids; outside -> 0."""
    t_total, h, w = frames.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    flat = frames.reshape(t_total, h * w)
    i00 = (y0c * w + x0c).ravel()
    i01 = (y0c * w + x1c).ravel()
    i10 = (y1c * w + x0c).ravel()
    i11 = (y1c * w + x1c).ravel()
    w00 = ((1 - fy) * (1 - fx)).ravel()
    w01 = ((1 - fy) * fx).ravel()
    w10 = (fy * (1 - fx)).ravel()
    w11 = (fy * fx).ravel()
    out = (flat[:, i00] * w00 + flat[:, i01] * w01 +
           flat[:, i10] * w10 + flat[:, i11] * w11)
    out *= valid.ravel()
    return out.reshape(t_total, *xs.shape)


def register_to_atlas(frames: np.ndarray, mask: np.ndarray,
                      landmarks: Dict[str, Tuple[float, float]],
                      atlas: Dict[str, Tuple[float, float]]):
    """Resample frames onto the atlas grid so the recording's bregma/lambda
    land on the atlas positions (bilinear; mask nearest-neighbor)."""
    a, b = similarity_from_landmarks(landmarks, atlas)
    h, w = frames.shape[-2:]
    gy, gx = np.mgrid[0:h, 0:w]
    # invert w = a*z + b to find the source pixel of each output pixel
    zsrc = ((gx + 1j * gy) - b) / a
    xs = zsrc.real
    ys = zsrc.imag
    out = bilinear_sample(frames, xs, ys)
    xn = np.round(xs).astype(np.int64)
    yn = np.round(ys).astype(np.int64)
    inside = (xn >= 0) & (xn < w) & (yn >= 0) & (yn < h)
    mask_out = np.zeros_like(mask)
    mask_out[inside] = mask[yn[inside], xn[inside]]
    return out, mask_out


def apply_mask(frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero all non-brain pixels."""
    if mask.shape != frames.shape[-2:]:
        raise ShapeError(f"mask {mask.shape} does not match frames "
                         f"{frames.shape[-2:]}")
    if not mask.any():
        raise DataError("mask has no brain pixels")
    return frames * mask


# -- the pipeline ---------------------------------------------------------------


def run_pipeline(raw: RecordingStack,
                 config: PipelineConfig = PipelineConfig()) -> PreprocessedStack:
    """All correction steps in order; records provenance per applied step."""
    provenance: List[dict] = []
    blue = raw.channel("blue").astype(np.float64)
    green = raw.channel("green").astype(np.float64) if config.ratiometric \
        else None

    if config.subtract_dark:
        if raw.dark_frames is None:
            dark_b = dark_g = None
        else:
            dark = raw.dark_frames.astype(np.float64)
            dark_b = dark[:, raw.channels.index("blue")]
            dark_g = dark[:, raw.channels.index("green")] \
                if green is not None else None
        blue = subtract_dark(blue, dark_b)
        if green is not None:
            green = subtract_dark(green, dark_g)
        provenance.append({"step": "subtract_dark",
                           "had_dark": raw.dark_frames is not None})

    if config.detrend:
        blue = detrend(blue)
        if green is not None:
            green = detrend(green)
        provenance.append({"step": "detrend"})

    if config.global_signal_regression:
        blue = global_signal_regress(blue, raw.mask)
        if green is not None:
            green = global_signal_regress(green, raw.mask)
        provenance.append({"step": "global_signal_regression"})

    if config.ratiometric:
        blue, n_bad = ratiometric_correct(blue, green, raw.mask)
        provenance.append({"step": "ratiometric", "flagged_pixels": n_bad})

    if config.smooth:
        blue = smooth(blue, config.smooth_kernel_size, config.smooth_sigma,
                      config.smooth_kind)
        provenance.append({"step": "smooth", "size": config.smooth_kernel_size,
                           "sigma": config.smooth_sigma,
                           "kind": config.smooth_kind})

    mask = raw.mask
    if config.register:
        hw = blue.shape[-2:]
        atlas = {"bregma": config.atlas_bregma, "lambda": config.atlas_lambda}
        if atlas["bregma"] is None or atlas["lambda"] is None:
            atlas = default_atlas_landmarks(hw)
        blue, mask = register_to_atlas(blue, raw.mask, raw.landmarks, atlas)
        provenance.append({"step": "register",
                           "atlas_bregma": list(atlas["bregma"]),
                           "atlas_lambda": list(atlas["lambda"])})

    blue = apply_mask(blue, mask)
    provenance.append({"step": "apply_mask",
                       "brain_pixels": int(mask.sum())})

    return PreprocessedStack(frames=blue.astype(config.output_dtype),
                             mask=mask, frame_rate_hz=raw.frame_rate_hz,
                             recording_id=raw.recording_id,
                             provenance=provenance)
