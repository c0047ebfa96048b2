"""Neural network layers with hand-derived backward passes.

Convolution and pooling run internally in channels-last (NHWC) layout so the
im2col gather is nearly contiguous and the contraction is a single GEMM; the
public entry points accept the channels-first layout used everywhere else in
the package and adapt. Recurrent and attention layers are built from the
autodiff primitives, so their gradients come for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DomainError, ShapeError
from .tensor import (Tensor, accumulate_grad, concat, make_op, matmul,
                     sigmoid, softmax, stack, tanh, transpose)

# frames per im2col chunk are capped so the column buffer stays modest
_IM2COL_BUDGET = 16 * 1024 * 1024  # elements


def _conv_out_hw(h: int, w: int, k: int, padding: str) -> tuple:
    if padding == "same":
        return h, w
    return h - k + 1, w - k + 1


def _im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded [N,Hp,Wp,C] -> [N*ho*wo, k*k*C], window order (dy, dx, c)
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def conv2d_nhwc(x: Tensor, w: Tensor, b: Tensor | None,
                padding: str = "same") -> Tensor:
    """Cross-correlation of x [N,H,W,C_in] with kernels w [C_out,C_in,k,k]."""
    if padding not in ("same", "valid"):
        raise ShapeError(f"unknown padding mode {padding!r}")
    n, h, wdt, cin = x.shape
    cout, cin_k, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernels must be square with odd size, got {k}x{k2}")
    if cin_k != cin:
        raise ShapeError(f"kernel expects {cin_k} input channels, input has {cin}")
    if padding == "valid" and (h < k or wdt < k):
        raise ShapeError(f"input {h}x{wdt} smaller than {k}x{k} kernel")
    ho, wo = _conv_out_hw(h, wdt, k, padding)
    pad = (k - 1) // 2 if padding == "same" else 0

    if pad:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = x.data
    w2 = w.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)

    chunk = max(1, _IM2COL_BUDGET // max(1, ho * wo * k * k * cin))
    out = np.empty((n, ho, wo, cout), dtype=x.data.dtype)
    for s in range(0, n, chunk):
        cols = _im2col(xp[s:s + chunk], k, ho, wo)
        piece = cols @ w2
        if b is not None:
            piece += b.data
        out[s:s + chunk] = piece.reshape(-1, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if b is not None and b.requires_grad:
            accumulate_grad(b, g2.sum(axis=0), fresh=True)
        dw2 = np.zeros((k * k * cin, cout), dtype=x.data.dtype) \
            if w.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        need_cols = w.requires_grad
        for s in range(0, n, chunk):
            e = min(s + chunk, n)
            gc = g[s:e].reshape(-1, cout)
            if need_cols:
                cols = _im2col(xp[s:e], k, ho, wo)
                dw2 += cols.T @ gc
            if dxp is not None:
                dcols = gc @ w2.T
                dc = dcols.reshape(e - s, ho, wo, k, k, cin)
                for dy in range(k):
                    for dx in range(k):
                        dxp[s:e, dy:dy + ho, dx:dx + wo, :] += dc[:, :, :, dy, dx, :]
        if dw2 is not None:
            accumulate_grad(w, dw2.reshape(k, k, cin, cout).transpose(3, 2, 0, 1),
                            fresh=True)
        if dxp is not None:
            if pad:
                accumulate_grad(x, dxp[:, pad:pad + h, pad:pad + wdt, :])
            else:
                accumulate_grad(x, dxp, fresh=True)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward, "conv2d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           padding: str = "same") -> Tensor:
    """Cross-correlation of x [C_in,H,W] (or [N,C_in,H,W]) with w [C_out,C_in,k,k]."""
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    elif x.ndim != 4:
        raise ShapeError(f"conv2d expects 3- or 4-d input, got {x.ndim}-d")
    out = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, b, padding)
    out = transpose(out, (0, 3, 1, 2))
    return out[0] if single else out


def max_pool2d_nhwc(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling of x [N,H,W,C]; gradient goes to the first
    maximum in row-major window order."""
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"max_pool2d requires spatial extents >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data[:, :ho * 2, :wo * 2, :].reshape(n, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 2, 4, 5).reshape(n, ho, wo, 4, c)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        dwin = np.zeros((n, ho, wo, 4, c), dtype=x.data.dtype)
        np.put_along_axis(dwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dwin = dwin.reshape(n, ho, wo, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        dx = np.zeros_like(x.data)
        dx[:, :ho * 2, :wo * 2, :] = dwin.reshape(n, ho * 2, wo * 2, c)
        accumulate_grad(x, dx, fresh=True)

    return make_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling of x [C,H,W] or [N,C,H,W]."""
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    out = max_pool2d_nhwc(transpose(x, (0, 2, 3, 1)))
    out = transpose(out, (0, 3, 1, 2))
    return out[0] if single else out


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    """x where x >= 0, slope*x elsewhere; x == 0 takes the positive branch."""
    if not 0.0 <= slope < 1.0:
        raise DomainError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    pos = x.data >= 0
    data = np.where(pos, x.data, x.data * x.data.dtype.type(slope))

    def backward(g):
        accumulate_grad(x, g * np.where(pos, x.data.dtype.type(1.0),
                                        x.data.dtype.type(slope)), fresh=True)

    return make_op(data, (x,), backward, "leaky_relu")


def global_avg_pool_nhwc(x: Tensor) -> Tensor:
    return x.mean(axis=(1, 2))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel of x [C,H,W] -> [C] (batched: [N,C,H,W] -> [N,C])."""
    if x.ndim == 3:
        return x.mean(axis=(1, 2))
    if x.ndim == 4:
        return x.mean(axis=(2, 3))
    raise ShapeError(f"global_avg_pool expects 3- or 4-d input, got {x.ndim}-d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ w.T + b with w of shape [out, in]."""
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    out = matmul(x, transpose(w))
    if b is not None:
        out = out + b
    return out[0] if single else out


# -- recurrence ---------------------------------------------------------------


@dataclass
class LstmCellParams:
    """Gate parameters of one LSTM direction.

    W_x: [4H, D] input weights, W_h: [4H, H] recurrent weights, b: [4H] biases,
    rows ordered (input, forget, cell-candidate, output).
    """
    W_x: Tensor
    W_h: Tensor
    b: Tensor
    hidden_size: int

    def named(self, prefix: str):
        return [(f"{prefix}.W_x", self.W_x), (f"{prefix}.W_h", self.W_h),
                (f"{prefix}.b", self.b)]


def init_lstm_params(input_size: int, hidden_size: int,
                     rng: np.random.Generator,
                     dtype=np.float32) -> LstmCellParams:
    """Uniform +-1/sqrt(H) weights; forget-gate bias starts at 1."""
    h = hidden_size
    bound = 1.0 / np.sqrt(h)
    w_x = rng.uniform(-bound, bound, size=(4 * h, input_size))
    w_h = rng.uniform(-bound, bound, size=(4 * h, h))
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0
    return LstmCellParams(Tensor(w_x.astype(dtype), requires_grad=True),
                          Tensor(w_h.astype(dtype), requires_grad=True),
                          Tensor(b.astype(dtype), requires_grad=True),
                          hidden_size=h)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              params: LstmCellParams):
    """One LSTM step. Accepts vectors or [B, .] batches; returns (h, c)."""
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
        h_prev = h_prev.reshape(1, -1)
        c_prev = c_prev.reshape(1, -1)
    hs = params.hidden_size
    z = matmul(x, transpose(params.W_x)) + matmul(h_prev, transpose(params.W_h)) \
        + params.b
    i = sigmoid(z[:, :hs])
    f = sigmoid(z[:, hs:2 * hs])
    g = tanh(z[:, 2 * hs:3 * hs])
    o = sigmoid(z[:, 3 * hs:])
    c = f * c_prev + i * g
    h = o * tanh(c)
    if single:
        return h[0], c[0]
    return h, c


def bilstm(seq: Tensor, fwd: LstmCellParams, bwd: LstmCellParams) -> Tensor:
    """Bidirectional LSTM over seq [T,D] or [B,T,D].

    Row t of the output is concat(h_fwd[t], h_bwd[t]); both directions start
    from zero states, and the backward direction consumes the reversed sequence.
    """
    single = seq.ndim == 2
    if single:
        seq = seq.reshape(1, *seq.shape)
    nb, nt, _ = seq.shape
    dtype = seq.data.dtype

    def run(params: LstmCellParams, reverse: bool):
        h = Tensor(np.zeros((nb, params.hidden_size), dtype=dtype))
        c = Tensor(np.zeros((nb, params.hidden_size), dtype=dtype))
        outs = []
        steps = range(nt - 1, -1, -1) if reverse else range(nt)
        for t in steps:
            h, c = lstm_cell(seq[:, t, :], h, c, params)
            outs.append(h)
        if reverse:
            outs.reverse()
        return outs

    h_f = run(fwd, reverse=False)
    h_b = run(bwd, reverse=True)
    rows = [concat([hf, hb], axis=-1) for hf, hb in zip(h_f, h_b)]
    out = stack(rows, axis=1)
    return out[0] if single else out


# -- attention and classifier head ---------------------------------------------


@dataclass
class AttentionParams:
    """Additive-attention scorer: W_s maps a hidden vector to a scalar."""
    W_s: Tensor  # [1, 2H]
    b_s: Tensor  # [1]

    def named(self, prefix: str):
        return [(f"{prefix}.W_s", self.W_s), (f"{prefix}.b_s", self.b_s)]


def init_attention_params(hidden_size: int, rng: np.random.Generator,
                          dtype=np.float32) -> AttentionParams:
    std = 1.0 / np.sqrt(hidden_size)
    w = rng.normal(0.0, std, size=(1, hidden_size))
    return AttentionParams(Tensor(w.astype(dtype), requires_grad=True),
                           Tensor(np.zeros(1, dtype=dtype), requires_grad=True))


@dataclass
class AttentionOutput:
    """Per-timestep weights (sum to one) and their convex combination."""
    alpha: Tensor    # [T] or [B,T]
    context: Tensor  # [2H] or [B,2H]


def additive_attention(h_seq: Tensor, params: AttentionParams) -> AttentionOutput:
    """Score each timestep with tanh(W_s h + b_s), softmax the scores, and
    return the weighted sum of hidden vectors."""
    single = h_seq.ndim == 2
    if single:
        h_seq = h_seq.reshape(1, *h_seq.shape)
    nb, nt, _ = h_seq.shape
    scores = tanh(linear(h_seq, params.W_s, params.b_s)).reshape(nb, nt)
    alpha = softmax(scores, axis=-1)
    context = (alpha.reshape(nb, nt, 1) * h_seq).sum(axis=1)
    if single:
        return AttentionOutput(alpha=alpha[0], context=context[0])
    return AttentionOutput(alpha=alpha, context=context)


def softmax_dense(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer with softmax activation: class probabilities."""
    return softmax(linear(h, w, b), axis=-1)
