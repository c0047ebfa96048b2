"""Training loop behavior on tiny synthetic problems."""

import numpy as np
import pytest

from sleepscore.dataset import Epoch, SleepState
from sleepscore.core.losses import FocalLossConfig, focal_loss
from sleepscore.core.optim import AdamState, adam_step
from sleepscore.errors import DataError, NumericError
from sleepscore.model import ArchConfig, forward_batch, init_params
from sleepscore.train import TrainConfig, TrainLog, evaluate_split, train


def tiny_arch(t=4, hw=16):
    return ArchConfig(n_conv_blocks=2, convs_per_block=1, channels=4,
                      kernel=3, lstm_hidden=4, input_hw=(hw, hw),
                      frames_per_epoch=t)


def separable_epochs(rng, n_per_class, t=4, hw=16):
    """Classes distinguished by a strong constant spatial pattern."""
    epochs = []
    for c in range(3):
        pattern = np.zeros((hw, hw), dtype=np.float32)
        pattern[:, c * (hw // 3):(c + 1) * (hw // 3)] = 1.0
        for i in range(n_per_class):
            frames = (pattern + 0.05 * rng.standard_normal((t, hw, hw))
                      ).astype(np.float32)[:, None]
            epochs.append(Epoch(frames=frames, label=SleepState(c),
                                recording_id=f"r{c}", epoch_index=i,
                                duration_s=1.0))
    return epochs


def test_lr_zero_leaves_parameters_bit_identical():
    rng = np.random.default_rng(0)
    epochs = separable_epochs(rng, 4)
    params = init_params(tiny_arch(), np.random.default_rng(1))
    before = {name: t.data.copy() for name, t in params.named_parameters()}
    cfg = TrainConfig(lr=0.0, batch_size=4, max_epochs=1,
                      early_stop_patience=2, seed=0)
    best, _ = train(params, epochs, epochs[:6], cfg)
    for name, t in params.named_parameters():
        assert np.array_equal(t.data, before[name]), name


def test_single_sample_overfit():
    rng = np.random.default_rng(2)
    epoch = separable_epochs(rng, 1)[0]
    arch = tiny_arch()
    params = init_params(arch, np.random.default_rng(3))
    state = AdamState(lr=1e-2)
    named = params.named_parameters()
    frames = epoch.frames[None]
    target = np.array([int(epoch.label)])
    cfg = FocalLossConfig(gamma=2.0)
    loss_value = None
    for _ in range(200):
        params.zero_grad()
        probs, _, _ = forward_batch(frames, params)
        loss = focal_loss(probs, target, cfg)
        loss.backward()
        adam_step(named, state)
        loss_value = loss.item()
    assert loss_value < 1e-3


def test_training_is_deterministic_given_seed():
    rng = np.random.default_rng(4)
    epochs = separable_epochs(rng, 5)
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=2,
                      early_stop_patience=3, seed=7, deterministic=True)
    best_a, log_a = train(init_params(tiny_arch(), np.random.default_rng(7)),
                          epochs, epochs[:6], cfg)
    best_b, log_b = train(init_params(tiny_arch(), np.random.default_rng(7)),
                          epochs, epochs[:6], cfg)
    assert log_a.metric_rows() == log_b.metric_rows()
    for (_, a), (_, b) in zip(best_a.named_parameters(),
                              best_b.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_loss_decreases_over_first_steps_for_most_seeds():
    ok = 0
    seeds = 20
    for seed in range(seeds):
        rng = np.random.default_rng(100 + seed)
        epochs = separable_epochs(rng, 2)
        params = init_params(tiny_arch(), np.random.default_rng(200 + seed))
        named = params.named_parameters()
        state = AdamState(lr=1e-3)
        frames = np.stack([e.frames for e in epochs])
        targets = np.array([int(e.label) for e in epochs])
        cfg = FocalLossConfig(gamma=2.0)
        losses = []
        for _ in range(6):
            params.zero_grad()
            probs, _, _ = forward_batch(frames, params)
            loss = focal_loss(probs, targets, cfg)
            losses.append(loss.item())
            loss.backward()
            adam_step(named, state)
        if all(b < a for a, b in zip(losses, losses[1:])):
            ok += 1
    assert ok >= int(0.95 * seeds)


def test_nan_loss_aborts_with_context():
    rng = np.random.default_rng(5)
    epochs = separable_epochs(rng, 4)
    params = init_params(tiny_arch(), np.random.default_rng(6))
    params.dense_w.data[:] = np.nan
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=1, seed=0)
    with pytest.raises(NumericError, match="batch"):
        train(params, epochs, epochs[:6], cfg)


def test_gradient_norm_logged_finite():
    rng = np.random.default_rng(7)
    epochs = separable_epochs(rng, 4)
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=2,
                      early_stop_patience=3, seed=1)
    _, log = train(init_params(tiny_arch(), np.random.default_rng(1)),
                   epochs, epochs[:6], cfg)
    for row in log.rows:
        assert np.isfinite(row["grad_norm"])


def test_best_checkpoint_restores_val_metrics(tmp_path):
    from sleepscore.model import load_checkpoint

    rng = np.random.default_rng(8)
    epochs = separable_epochs(rng, 5)
    val = epochs[::3]
    cfg = TrainConfig(lr=2e-3, batch_size=4, max_epochs=3,
                      early_stop_patience=5, seed=2,
                      checkpoint_dir=str(tmp_path))
    best, log = train(init_params(tiny_arch(), np.random.default_rng(2)),
                      epochs, val, cfg)
    restored = load_checkpoint(tmp_path / "best.ckpt")
    rep_best = evaluate_split(best, val, duration_s=1.0)
    rep_restored = evaluate_split(restored, val, duration_s=1.0)
    assert rep_best.to_dict() == rep_restored.to_dict()
    best_logged = max(r["val_kappa"] for r in log.rows)
    assert rep_best.kappa == pytest.approx(best_logged, abs=1e-9)


def test_early_stopping_respects_patience():
    rng = np.random.default_rng(9)
    epochs = separable_epochs(rng, 4)
    cfg = TrainConfig(lr=0.0, batch_size=4, max_epochs=50,
                      early_stop_patience=2, seed=3)
    _, log = train(init_params(tiny_arch(), np.random.default_rng(3)),
                   epochs, epochs[:6], cfg)
    # lr 0 never improves after the first epoch: 1 + patience epochs total
    assert len(log.rows) == 3


def test_train_rejects_unlabeled_or_empty():
    rng = np.random.default_rng(10)
    epochs = separable_epochs(rng, 4)
    cfg = TrainConfig(max_epochs=1)
    with pytest.raises(DataError):
        train(tiny_arch(), [], epochs[:4], cfg)
    epochs[0].label = None
    with pytest.raises(DataError):
        train(tiny_arch(), epochs, epochs[-4:], cfg)


def test_trainlog_csv_roundtrip(tmp_path):
    log = TrainLog(rows=[{"epoch": 0, "train_loss": 0.5, "grad_norm": 1.0,
                          "val_loss": 0.4, "val_macro_f1": 0.9,
                          "val_kappa": 0.8, "wall_time_s": 1.23}])
    path = tmp_path / "log.csv"
    log.write_csv(path)
    text = path.read_text().splitlines()
    assert text[0].split(",") == list(TrainLog.COLUMNS)
    assert len(text) == 2


def test_evaluate_split_orders_by_recording_time():
    rng = np.random.default_rng(11)
    epochs = separable_epochs(rng, 5)
    params = init_params(tiny_arch(), np.random.default_rng(4))
    report = evaluate_split(params, epochs, duration_s=1.0)
    assert report.n == len(epochs)
    assert report.fragmentation_ref is not None
