"""Neural layers: documented values, brute-force oracles, finite differences."""

import numpy as np
import pytest

from sleepscore.core import tensor as T
from sleepscore.core.layers import (LstmCellParams,
                                    additive_attention, bilstm, conv2d,
                                    global_avg_pool, init_attention_params,
                                    init_lstm_params, leaky_relu, lstm_cell,
                                    max_pool2d, softmax_dense)
from sleepscore.core.tensor import Tensor
from sleepscore.errors import DomainError, ShapeError

from gradcheck import max_rel_error, random_tensor

TOL = 1e-4


# -- independent oracles -------------------------------------------------------


def conv2d_loops(x, w, b, padding):
    """Brute-force cross-correlation, quadruple loop."""
    cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    pad = (k - 1) // 2 if padding == "same" else 0
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h, wid) if padding == "same" else (h - k + 1, wid - k + 1)
    out = np.zeros((cout, ho, wo), dtype=np.float64)
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[ci, i + di, j + dj] * w[co, ci, di, dj]
                out[co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def lstm_step_loops(x, h, c, wx, wh, b, hs):
    z = wx @ x + wh @ h + b
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i, f, g, o = (sig(z[:hs]), sig(z[hs:2 * hs]), np.tanh(z[2 * hs:3 * hs]),
                  sig(z[3 * hs:]))
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def bilstm_loops(seq, fwd, bwd):
    t_len, _ = seq.shape
    hs = fwd.hidden_size
    h = np.zeros(hs)
    c = np.zeros(hs)
    out_f = []
    for t in range(t_len):
        h, c = lstm_step_loops(seq[t], h, c, fwd.W_x.data, fwd.W_h.data,
                               fwd.b.data, hs)
        out_f.append(h)
    h = np.zeros(bwd.hidden_size)
    c = np.zeros(bwd.hidden_size)
    out_b = [None] * t_len
    for t in range(t_len - 1, -1, -1):
        h, c = lstm_step_loops(seq[t], h, c, bwd.W_x.data, bwd.W_h.data,
                               bwd.b.data, bwd.hidden_size)
        out_b[t] = h
    return np.stack([np.concatenate([f, bk]) for f, bk in zip(out_f, out_b)])


# -- conv2d ---------------------------------------------------------------------


def test_conv2d_ones_valid_and_same():
    x = Tensor(np.ones((1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, k, None, "valid").numpy()
    np.testing.assert_allclose(out, [[[9.0]]])

    out = conv2d(x, k, None, "same").numpy()
    expected = np.array([[[4, 6, 4], [6, 9, 6], [4, 6, 4]]], dtype=np.float32)
    np.testing.assert_allclose(out, expected)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 5, 4)).astype(np.float32))
    k = np.zeros((2, 2, 1, 1), dtype=np.float32)
    k[0, 0, 0, 0] = 1.0
    k[1, 1, 0, 0] = 1.0
    out = conv2d(x, Tensor(k), None, "same").numpy()
    np.testing.assert_array_equal(out, x.numpy())


def test_conv2d_matches_loop_oracle_exact_f64():
    rng = np.random.default_rng(1)
    for _ in range(6):
        cin, cout = rng.integers(1, 4, 2)
        h, w = rng.integers(3, 8, 2)
        k = int(rng.choice([1, 3]))
        pad = str(rng.choice(["same", "valid"]))
        x = rng.standard_normal((cin, h, w))
        ker = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        got = conv2d(Tensor(x, dtype=np.float64),
                     Tensor(ker, dtype=np.float64),
                     Tensor(b, dtype=np.float64), pad).numpy()
        want = conv2d_loops(x, ker, b, pad)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_matches_loop_oracle_f32():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 6, 6)).astype(np.float32)
    ker = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(ker), Tensor(b), "same").numpy()
    want = conv2d_loops(x.astype(np.float64), ker.astype(np.float64),
                        b.astype(np.float64), "same")
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_conv2d_channel_mismatch_raises():
    x = Tensor(np.ones((2, 4, 4)))
    k = Tensor(np.ones((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(x, k, None, "same")


def test_conv2d_too_small_for_valid_raises():
    x = Tensor(np.ones((1, 2, 2)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(x, k, None, "valid")


def test_conv2d_grad():
    rng = np.random.default_rng(3)
    x = random_tensor(rng, (2, 5, 5))
    w = random_tensor(rng, (3, 2, 3, 3), scale=0.5)
    b = random_tensor(rng, (3,))
    proj = Tensor(rng.standard_normal((3, 5, 5)), dtype=np.float64)

    def build():
        return (conv2d(x, w, b, "same") * proj).sum()

    assert max_rel_error(build, [x, w, b]) < TOL


# -- max_pool2d ------------------------------------------------------------------


def test_max_pool_values():
    np.testing.assert_allclose(
        max_pool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).numpy(),
        [[[4.0]]])
    const = Tensor(np.full((2, 4, 4), 7.0))
    np.testing.assert_allclose(max_pool2d(const).numpy(), np.full((2, 2, 2), 7.0))
    ramp = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
    np.testing.assert_allclose(max_pool2d(ramp).numpy(),
                               [[[5.0, 7.0], [13.0, 15.0]]])


def test_max_pool_tie_break_first_index():
    x = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    out = max_pool2d(x)
    out.sum().backward()
    # all four candidates tie at 0; the first in row-major order wins
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_max_pool_odd_extent_drops_tail():
    x = Tensor(np.arange(25, dtype=np.float32).reshape(1, 5, 5))
    assert max_pool2d(x).shape == (1, 2, 2)


def test_max_pool_grad():
    rng = np.random.default_rng(4)
    x = random_tensor(rng, (2, 6, 6))
    proj = Tensor(rng.standard_normal((2, 3, 3)), dtype=np.float64)

    def build():
        return (max_pool2d(x) * proj).sum()

    assert max_rel_error(build, [x]) < TOL


# -- leaky_relu / GAP --------------------------------------------------------------


def test_leaky_relu_values():
    x = Tensor(np.array([5.0, -10.0, -2.0, 0.0]))
    np.testing.assert_allclose(leaky_relu(x, 0.3).numpy(),
                               [5.0, -3.0, -0.6, 0.0])
    np.testing.assert_allclose(leaky_relu(Tensor(np.array([-2.0])), 0.0).numpy(),
                               [0.0])
    with pytest.raises(DomainError):
        leaky_relu(x, 1.0)


def test_leaky_relu_grad_zero_takes_positive_branch():
    x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
    leaky_relu(x, 0.3).sum().backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.3, 1.0])


def test_global_avg_pool_values():
    np.testing.assert_allclose(
        global_avg_pool(Tensor(np.full((3, 4, 4), 2.5))).numpy(), [2.5] * 3)
    ch = Tensor(np.array([[[0.0, 2.0], [4.0, 6.0]]]))
    np.testing.assert_allclose(global_avg_pool(ch).numpy(), [3.0])
    np.testing.assert_allclose(
        global_avg_pool(Tensor(np.array([[[9.0]]]))).numpy(), [9.0])


# -- lstm_cell / bilstm --------------------------------------------------------------


def _zero_lstm(d, h):
    return LstmCellParams(Tensor(np.zeros((4 * h, d))),
                          Tensor(np.zeros((4 * h, h))),
                          Tensor(np.zeros(4 * h)), hidden_size=h)


def test_lstm_cell_zero_params():
    p = _zero_lstm(3, 2)
    h, c = lstm_cell(Tensor(np.zeros(3)), Tensor(np.zeros(2)),
                     Tensor(np.zeros(2)), p)
    np.testing.assert_allclose(h.numpy(), [0.0, 0.0])
    np.testing.assert_allclose(c.numpy(), [0.0, 0.0])

    h, c = lstm_cell(Tensor(np.zeros(3)), Tensor(np.zeros(2)),
                     Tensor(np.ones(2)), p)
    np.testing.assert_allclose(c.numpy(), [0.5, 0.5], atol=1e-7)
    np.testing.assert_allclose(h.numpy(), 0.5 * np.tanh(0.5) * np.ones(2),
                               atol=1e-6)


def test_lstm_cell_grad_vs_finite_differences():
    rng = np.random.default_rng(5)
    p = init_lstm_params(3, 2, rng, dtype=np.float64)
    x = random_tensor(rng, (3,))
    h0 = random_tensor(rng, (2,), requires_grad=False)
    c0 = random_tensor(rng, (2,), requires_grad=False)
    proj = Tensor(rng.standard_normal(2), dtype=np.float64)

    def build():
        h, c = lstm_cell(x, h0, c0, p)
        return (h * proj).sum() + (c * proj).sum()

    assert max_rel_error(build, [x, p.W_x, p.W_h, p.b]) < TOL


def test_bilstm_t1_is_concat_of_cells():
    rng = np.random.default_rng(6)
    fwd = init_lstm_params(3, 2, rng, dtype=np.float64)
    bwd = init_lstm_params(3, 2, rng, dtype=np.float64)
    x = rng.standard_normal(3)
    seq = Tensor(x[None], dtype=np.float64)
    out = bilstm(seq, fwd, bwd).numpy()
    hf, _ = lstm_cell(Tensor(x, dtype=np.float64),
                      Tensor(np.zeros(2, dtype=np.float64)),
                      Tensor(np.zeros(2, dtype=np.float64)), fwd)
    hb, _ = lstm_cell(Tensor(x, dtype=np.float64),
                      Tensor(np.zeros(2, dtype=np.float64)),
                      Tensor(np.zeros(2, dtype=np.float64)), bwd)
    np.testing.assert_allclose(out[0], np.concatenate([hf.numpy(), hb.numpy()]),
                               rtol=1e-12)


def test_bilstm_palindrome_symmetry():
    rng = np.random.default_rng(7)
    p = init_lstm_params(3, 2, rng, dtype=np.float64)
    half = rng.standard_normal((3, 3))
    seq = np.concatenate([half, half[::-1]])  # palindrome, T=6
    out = bilstm(Tensor(seq, dtype=np.float64), p, p).numpy()
    t_len = seq.shape[0]
    for t in range(t_len):
        swapped = np.concatenate([out[t_len - 1 - t, 2:], out[t_len - 1 - t, :2]])
        np.testing.assert_allclose(out[t], swapped, rtol=1e-10, atol=1e-12)


def test_bilstm_matches_unrolled_oracle():
    rng = np.random.default_rng(8)
    fwd = init_lstm_params(3, 2, rng, dtype=np.float64)
    bwd = init_lstm_params(3, 2, rng, dtype=np.float64)
    seq = rng.standard_normal((4, 3))
    got = bilstm(Tensor(seq, dtype=np.float64), fwd, bwd).numpy()
    want = bilstm_loops(seq, fwd, bwd)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_bilstm_batched_matches_single():
    rng = np.random.default_rng(9)
    fwd = init_lstm_params(3, 2, rng, dtype=np.float64)
    bwd = init_lstm_params(3, 2, rng, dtype=np.float64)
    seqs = rng.standard_normal((3, 5, 3))
    batch = bilstm(Tensor(seqs, dtype=np.float64), fwd, bwd).numpy()
    for i in range(3):
        single = bilstm(Tensor(seqs[i], dtype=np.float64), fwd, bwd).numpy()
        np.testing.assert_allclose(batch[i], single, rtol=1e-12)


# -- attention / dense head ------------------------------------------------------------


def test_attention_identical_rows_uniform():
    rng = np.random.default_rng(10)
    p = init_attention_params(4, rng, dtype=np.float64)
    row = rng.standard_normal(4)
    h_seq = Tensor(np.tile(row, (5, 1)), dtype=np.float64)
    out = additive_attention(h_seq, p)
    np.testing.assert_allclose(out.alpha.numpy(), np.full(5, 0.2), atol=1e-12)
    np.testing.assert_allclose(out.context.numpy(), row, rtol=1e-12)


def test_attention_t1_and_sum_to_one():
    rng = np.random.default_rng(11)
    p = init_attention_params(4, rng, dtype=np.float64)
    h_seq = Tensor(rng.standard_normal((1, 4)), dtype=np.float64)
    out = additive_attention(h_seq, p)
    np.testing.assert_allclose(out.alpha.numpy(), [1.0])
    np.testing.assert_allclose(out.context.numpy(), h_seq.numpy()[0])

    h_seq = Tensor(rng.standard_normal((7, 4)), dtype=np.float64)
    out = additive_attention(h_seq, p)
    assert abs(out.alpha.numpy().sum() - 1.0) < 1e-6
    np.testing.assert_allclose(
        out.context.numpy(),
        (out.alpha.numpy()[:, None] * h_seq.numpy()).sum(axis=0), rtol=1e-12)


def test_attention_matches_direct_formula():
    rng = np.random.default_rng(12)
    p = init_attention_params(4, rng, dtype=np.float64)
    h = rng.standard_normal((6, 4))
    out = additive_attention(Tensor(h, dtype=np.float64), p)
    scores = np.tanh(h @ p.W_s.data[0] + p.b_s.data[0])
    e = np.exp(scores - scores.max())
    alpha = e / e.sum()
    np.testing.assert_allclose(out.alpha.numpy(), alpha, rtol=1e-12)


def test_attention_grad():
    rng = np.random.default_rng(13)
    p = init_attention_params(4, rng, dtype=np.float64)
    h_seq = random_tensor(rng, (5, 4))
    proj = Tensor(rng.standard_normal(4), dtype=np.float64)

    def build():
        out = additive_attention(h_seq, p)
        return (out.context * proj).sum() + (out.alpha ** 2.0).sum()

    assert max_rel_error(build, [h_seq, p.W_s, p.b_s]) < TOL


def test_softmax_dense_values_and_grad():
    rng = np.random.default_rng(14)
    w = Tensor(np.zeros((3, 4)), dtype=np.float64, requires_grad=True)
    b = Tensor(np.zeros(3), dtype=np.float64, requires_grad=True)
    h = Tensor(rng.standard_normal(4), dtype=np.float64, requires_grad=True)
    probs = softmax_dense(h, w, b).numpy()
    np.testing.assert_allclose(probs, np.ones(3) / 3, atol=1e-7)

    b2 = Tensor(np.array([np.log(2.0), 0.0, 0.0]), dtype=np.float64)
    probs = softmax_dense(h, w, b2).numpy()
    np.testing.assert_allclose(probs, [0.5, 0.25, 0.25], atol=1e-7)

    w = random_tensor(rng, (3, 4), scale=0.5)
    b = random_tensor(rng, (3,))
    proj = Tensor(np.array([1.0, -2.0, 0.5]), dtype=np.float64)

    def build():
        return (softmax_dense(h, w, b) * proj).sum()

    assert max_rel_error(build, [h, w, b]) < TOL
