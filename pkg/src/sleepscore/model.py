"""The frame-wise CNN + BiLSTM + attention sleep state classifier.

Every frame of an epoch passes through the same stack of convolutional
blocks (conv -> LeakyReLU, repeated, then 2x2 max pool) followed by global
average pooling, yielding one feature vector per frame. A bidirectional
LSTM consumes the feature sequence, additive attention pools its hidden
states into a context vector, and a dense softmax head produces class
probabilities for wakefulness / NREM / REM.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core.layers import (AttentionParams, LstmCellParams, additive_attention,
                          bilstm, conv2d_nhwc, global_avg_pool_nhwc,
                          init_attention_params, init_lstm_params, leaky_relu,
                          linear, max_pool2d_nhwc)
from .core.tensor import Tensor, softmax, transpose
from .errors import ConfigError, DataError, ShapeError

CLASS_NAMES = ("Wake", "NREM", "REM")

CHECKPOINT_MAGIC = b"SSCN"
CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    n_conv_blocks: int = 5
    convs_per_block: int = 2
    channels: int = 64
    kernel: int = 3
    lstm_hidden: int = 64
    n_classes: int = 3
    input_hw: Tuple[int, int] = (128, 128)
    frames_per_epoch: int = 168
    leaky_slope: float = 0.3

    def __post_init__(self):
        self.input_hw = tuple(self.input_hw)
        down = 2 ** self.n_conv_blocks
        if self.input_hw[0] % down or self.input_hw[1] % down:
            raise ConfigError(
                f"input_hw: {self.input_hw} must be divisible by "
                f"2^n_conv_blocks = {down}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"kernel: size must be odd, got {self.kernel}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes: must be >= 2, got {self.n_classes}")


@dataclass
class ModelParams:
    """All trainable arrays plus the architecture they instantiate."""
    arch: ArchConfig
    conv_w: List[List[Tensor]] = field(default_factory=list)
    conv_b: List[List[Tensor]] = field(default_factory=list)
    lstm_fwd: Optional[LstmCellParams] = None
    lstm_bwd: Optional[LstmCellParams] = None
    attention: Optional[AttentionParams] = None
    dense_w: Optional[Tensor] = None
    dense_b: Optional[Tensor] = None

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for bi, (ws, bs) in enumerate(zip(self.conv_w, self.conv_b)):
            for ci, (w, b) in enumerate(zip(ws, bs)):
                out.append((f"conv{bi}_{ci}.w", w))
                out.append((f"conv{bi}_{ci}.b", b))
        out += self.lstm_fwd.named("lstm_fwd")
        out += self.lstm_bwd.named("lstm_bwd")
        out += self.attention.named("attention")
        out.append(("dense.w", self.dense_w))
        out.append(("dense.b", self.dense_b))
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def copy(self) -> "ModelParams":
        clone = init_params(self.arch, np.random.default_rng(0))
        for (_, src), (_, dst) in zip(self.named_parameters(),
                                      clone.named_parameters()):
            dst.data = src.data.copy()
        return clone


def init_params(arch: ArchConfig, rng: np.random.Generator,
                dtype=np.float32) -> ModelParams:
    """Fan-in scaled normal conv/dense weights, uniform recurrent weights."""
    params = ModelParams(arch=arch)
    c_in = 1
    k = arch.kernel
    for _ in range(arch.n_conv_blocks):
        ws, bs = [], []
        for _ in range(arch.convs_per_block):
            fan_in = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(arch.channels, c_in, k, k))
            ws.append(Tensor(w.astype(dtype), requires_grad=True))
            bs.append(Tensor(np.zeros(arch.channels, dtype=dtype),
                             requires_grad=True))
            c_in = arch.channels
        params.conv_w.append(ws)
        params.conv_b.append(bs)
    params.lstm_fwd = init_lstm_params(arch.channels, arch.lstm_hidden, rng,
                                       dtype)
    params.lstm_bwd = init_lstm_params(arch.channels, arch.lstm_hidden, rng,
                                       dtype)
    params.attention = init_attention_params(2 * arch.lstm_hidden, rng, dtype)
    dw = rng.normal(0.0, np.sqrt(1.0 / (2 * arch.lstm_hidden)),
                    size=(arch.n_classes, 2 * arch.lstm_hidden))
    params.dense_w = Tensor(dw.astype(dtype), requires_grad=True)
    params.dense_b = Tensor(np.zeros(arch.n_classes, dtype=dtype),
                            requires_grad=True)
    return params


def _cnn_features(x: Tensor, params: ModelParams,
                  capture: Optional[dict] = None) -> Tensor:
    """x: [N,H,W,1] channels-last frames -> [N, channels] features."""
    arch = params.arch
    last_block = arch.n_conv_blocks - 1
    for bi in range(arch.n_conv_blocks):
        for ci in range(arch.convs_per_block):
            x = leaky_relu(conv2d_nhwc(x, params.conv_w[bi][ci],
                                       params.conv_b[bi][ci], "same"),
                           arch.leaky_slope)
        if capture is not None and bi == last_block:
            capture["final_conv"] = x
        x = max_pool2d_nhwc(x)
    return global_avg_pool_nhwc(x)


def frame_features(frame, params: ModelParams) -> Tensor:
    """Feature vector of a single frame [1,H,W] (non-brain pixels zeroed)."""
    if not isinstance(frame, Tensor):
        frame = Tensor(frame)
    if frame.ndim != 3 or frame.shape[0] != 1:
        raise ShapeError(f"expected a [1,H,W] frame, got {frame.shape}")
    if frame.shape[1:] != params.arch.input_hw:
        raise ShapeError(f"frame is {frame.shape[1:]}, model expects "
                         f"{params.arch.input_hw}")
    x = transpose(frame.reshape(1, *frame.shape), (0, 2, 3, 1))
    return _cnn_features(x, params)[0]


def forward_batch(frames, params: ModelParams,
                  capture: Optional[dict] = None):
    """Forward a batch of epochs [B,T,1,H,W].

    Returns (probs [B,n_classes], alpha [B,T], logits [B,n_classes]); all
    are graph nodes, so a backward pass from any of them reaches every
    parameter. When `capture` is a dict, the final conv activations are
    stashed under "final_conv" as [B*T, h, w, channels].
    """
    if not isinstance(frames, Tensor):
        frames = Tensor(frames)
    if frames.ndim != 5 or frames.shape[2] != 1:
        raise ShapeError(f"expected [B,T,1,H,W] frames, got {frames.shape}")
    nb, nt = frames.shape[:2]
    x = transpose(frames.reshape(nb * nt, 1, *frames.shape[3:]), (0, 2, 3, 1))
    feats = _cnn_features(x, params, capture)
    seq = feats.reshape(nb, nt, params.arch.channels)
    h_seq = bilstm(seq, params.lstm_fwd, params.lstm_bwd)
    att = additive_attention(h_seq, params.attention)
    logits = linear(att.context, params.dense_w, params.dense_b)
    return softmax(logits, axis=-1), att.alpha, logits


def forward(epoch_frames, params: ModelParams):
    """Forward one epoch [T,1,H,W] -> (probs [n_classes], alpha [T])."""
    if not isinstance(epoch_frames, Tensor):
        epoch_frames = Tensor(epoch_frames)
    if epoch_frames.ndim != 4:
        raise ShapeError(f"expected [T,1,H,W] frames, got {epoch_frames.shape}")
    probs, alpha, _ = forward_batch(
        epoch_frames.reshape(1, *epoch_frames.shape), params)
    return probs[0], alpha[0]


def predict(epoch_frames, params: ModelParams) -> int:
    """Most probable class; ties break toward the lower class index."""
    probs, _ = forward(epoch_frames, params)
    return int(np.argmax(probs.data))


def predict_batch(frames, params: ModelParams) -> np.ndarray:
    probs, _, _ = forward_batch(frames, params)
    return np.argmax(probs.data, axis=-1)


# -- checkpoint container -------------------------------------------------------
#
# Layout: magic "SSCN" | u32 version | u32 header length | JSON header |
# concatenated little-endian float32 tensor payloads. The header holds the
# architecture and a manifest of (name, shape, byte offset into the payload).


def save_checkpoint(params: ModelParams, path) -> None:
    named = params.named_parameters()
    manifest = []
    offset = 0
    blobs = []
    for name, t in named:
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape),
                         "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arch": asdict(params.arch), "tensors": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header_len, = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len))
        payload = f.read()
    arch = ArchConfig(**header["arch"])
    params = init_params(arch, np.random.default_rng(0))
    by_name: Dict[str, Tensor] = dict(params.named_parameters())
    for entry in header["tensors"]:
        t = by_name.get(entry["name"])
        if t is None:
            raise DataError(f"{path}: unknown tensor {entry['name']!r}")
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise DataError(f"{path}: tensor {entry['name']!r} has shape "
                            f"{shape}, expected {t.shape}")
        n = int(np.prod(shape)) if shape else 1
        raw = payload[entry["offset"]:entry["offset"] + 4 * n]
        if len(raw) != 4 * n:
            raise DataError(f"{path}: truncated payload for {entry['name']!r}")
        t.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(
            np.float32)
    return params
