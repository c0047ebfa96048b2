"""Where the classifier looks: Grad-CAM saliency and attention traces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .dataset import SleepState
from .errors import DomainError, ShapeError
from .model import ModelParams, forward_batch
from .preprocess import bilinear_sample


def bilinear_resize(img: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    """Resize a 2-D map with bilinear interpolation (pixel-center aligned)."""
    h, w = img.shape
    oh, ow = out_hw
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    return bilinear_sample(img[None].astype(np.float64), gx, gy)[0]


@dataclass
class SaliencyMap:
    """Per-frame reduced-resolution maps and the normalized epoch average."""
    frame_maps: np.ndarray   # [T, h', w'], nonnegative
    epoch_map: np.ndarray    # [H, W], in [0, 1] unless degenerate
    target_class: int
    degenerate: bool         # raw epoch map was constant; not normalized


def grad_cam(epoch_frames: np.ndarray, params: ModelParams,
             target_class: int) -> SaliencyMap:
    """Gradient-weighted class activation map for one epoch.

    Channel weights are the spatial means of the target logit's gradient at
    the final convolutional layer; each frame's map is the rectified
    channel-weighted sum of those activations, and the epoch map is their
    temporal mean upsampled to the input resolution and min-max normalized.
    """
    if epoch_frames.ndim != 4:
        raise ShapeError(f"expected [T,1,H,W] frames, got {epoch_frames.shape}")
    n_classes = params.arch.n_classes
    if not 0 <= target_class < n_classes:
        raise DomainError(f"target_class must be in [0, {n_classes - 1}], "
                          f"got {target_class}")
    in_hw = epoch_frames.shape[2:]
    capture: dict = {}
    _, _, logits = forward_batch(epoch_frames[None], params, capture)
    act = capture["final_conv"]  # [T, h', w', C]
    logits[0, target_class].backward(retain=[act])
    grads = act.grad
    params.zero_grad()
    if grads is None:
        grads = np.zeros_like(act.data)

    channel_w = grads.mean(axis=(1, 2))  # [T, C]
    frame_maps = np.maximum(
        0.0, np.einsum("thwc,tc->thw", act.data.astype(np.float64),
                       channel_w.astype(np.float64)))
    raw = frame_maps.mean(axis=0)
    epoch_map = bilinear_resize(raw, in_hw)
    span = epoch_map.max() - epoch_map.min()
    degenerate = bool(span == 0)
    if not degenerate:
        epoch_map = (epoch_map - epoch_map.min()) / span
    return SaliencyMap(frame_maps=frame_maps, epoch_map=epoch_map,
                       target_class=target_class, degenerate=degenerate)


@dataclass
class AttentionTrace:
    """Attention weights over one window plus the predicted state."""
    weights: np.ndarray  # [T], sums to 1
    state: SleepState
    duration_s: float


def extract_attention(window_frames: np.ndarray, params: ModelParams,
                      duration_s: float) -> AttentionTrace:
    """Attention weights of one (context) window, verbatim from the forward
    pass; no parameters are modified."""
    if window_frames.ndim != 4:
        raise ShapeError(f"expected [T,1,H,W] frames, got {window_frames.shape}")
    probs, alpha, _ = forward_batch(window_frames[None], params)
    return AttentionTrace(weights=alpha.data[0].copy(),
                          state=SleepState(int(np.argmax(probs.data[0]))),
                          duration_s=duration_s)


def attention_entropy(weights: np.ndarray) -> float:
    """Shannon entropy of an attention distribution (nats)."""
    w = np.asarray(weights, dtype=np.float64)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


def attention_summary(traces: Sequence[AttentionTrace]) -> Dict[str, dict]:
    """Per-state mean and standard deviation of attention per timestep."""
    by_state: Dict[SleepState, List[np.ndarray]] = {}
    for tr in traces:
        by_state.setdefault(tr.state, []).append(tr.weights)
    out = {}
    for state, stack_ in sorted(by_state.items()):
        arr = np.stack(stack_)
        out[state.name] = {
            "n": int(arr.shape[0]),
            "mean": arr.mean(axis=0).tolist(),
            "sd": arr.std(axis=0).tolist(),
            "mean_entropy": float(np.mean([attention_entropy(a) for a in arr])),
        }
    return out


def saliency_to_png(map01: np.ndarray, path) -> None:
    """Render a [0, 1] map as a red-to-yellow heat PNG."""
    from PIL import Image

    m = np.clip(map01, 0.0, 1.0)
    rgb = np.stack([
        np.clip(m * 2.0, 0, 1),              # red ramps in first
        np.clip(m * 2.0 - 1.0, 0, 1),        # green joins for hot values
        np.zeros_like(m),
    ], axis=-1)
    img = (rgb * 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)
