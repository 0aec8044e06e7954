import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sshunet.data import VolumeRecord, generate_phantom, organ_spec
from sshunet.errors import ArgumentError, TrainingAborted
from sshunet.gradcheck import gradcheck
from sshunet.network import UNetConfig, build
from sshunet.tensor import Tensor
from sshunet.trainer import (
    HISTORY_HEADER,
    LoopConfig,
    OptimConfig,
    TrainState,
    adamw_step,
    dice_ce_loss,
    lr_at,
    sgd_step,
    sliding_window_infer,
    train,
    window_starts,
    write_history,
)

# ---------------------------------------------------------------- loss


def test_loss_limit_case():
    labels = np.array([[[[0, 1], [2, 1]]]])  # B=1, 1x2x2
    onehot = (labels[:, None] == np.arange(3)[None, :, None, None, None]).astype(np.float32)
    loss, ce, sd = dice_ce_loss(Tensor(onehot * 60.0), labels, parts=True)
    assert ce < 1e-12 and sd == pytest.approx(1.0, abs=1e-6)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_uniform_logits_ce_is_ln2():
    labels = np.array([0, 1] * 32).reshape(1, 4, 4, 4)
    _, ce, _ = dice_ce_loss(Tensor(np.zeros((1, 2, 4, 4, 4))), labels, parts=True)
    assert ce == pytest.approx(math.log(2), rel=1e-12)


def test_loss_gradcheck():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((2, 2, 4, 4, 4)))
    labels = rng.integers(0, 2, (2, 4, 4, 4))
    rep = gradcheck(lambda z: dice_ce_loss(z, labels), [logits])
    assert rep.max_rel_error < 1e-3, rep


@given(
    z=arrays(np.float32, (1, 3, 2, 2, 2), elements=st.floats(-20, 20, width=32)),
    y=arrays(np.int64, (1, 2, 2, 2), elements=st.integers(0, 2)),
)
def test_loss_nonnegative(z, y):
    assert dice_ce_loss(Tensor(z), y).item() >= 0


def test_loss_label_errors():
    z = Tensor(np.zeros((1, 2, 2, 2, 2)))
    with pytest.raises(ArgumentError):
        dice_ce_loss(z, np.full((1, 2, 2, 2), 2))
    with pytest.raises(ArgumentError):
        dice_ce_loss(z, np.zeros((1, 2, 2, 3), int))


# ---------------------------------------------------------------- schedule


def test_lr_schedule_points():
    cfg = OptimConfig(lr=0.01, warmup_iters=50, total_iters=1000)
    assert lr_at(cfg, 50) == pytest.approx(0.01)
    assert lr_at(cfg, 1000) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(cfg, 50 + 475) == pytest.approx(0.005)
    assert lr_at(cfg, 0) == pytest.approx(0.01 / 50)
    assert lr_at(cfg, 49) == pytest.approx(0.01)


@given(step=st.integers(0, 999))
def test_lr_bounded(step):
    cfg = OptimConfig(lr=0.01, warmup_iters=50, total_iters=1000)
    assert 0 <= lr_at(cfg, step) <= 0.01


# ---------------------------------------------------------------- optimizers


def const_lr(lr, **kw):
    # warmup 0 and a huge horizon keep the cosine factor at ~1
    return OptimConfig(lr=lr, warmup_iters=0, total_iters=10**12, **kw)


def test_sgd_hand_updates():
    w = Tensor(np.array([1.0], np.float32))
    state, cfg = TrainState(), const_lr(0.1, momentum=0.99)
    sgd_step(state, [w], [np.array([1.0], np.float32)], cfg)
    assert state.velocity[0][0] == 1.0 and w.data[0] == pytest.approx(0.9)
    sgd_step(state, [w], [np.array([1.0], np.float32)], cfg)
    assert state.velocity[0][0] == pytest.approx(1.99)
    assert w.data[0] == pytest.approx(1.0 - 0.1 * (1 + 1.99))
    assert state.step == 2


def test_sgd_zero_grad_unchanged():
    w = Tensor(np.array([0.3, -2.0], np.float32))
    before = w.data.copy()
    sgd_step(TrainState(), [w], [np.zeros(2, np.float32)], const_lr(0.1))
    assert np.array_equal(w.data, before)


def test_optimizer_shape_mismatch():
    w = Tensor(np.zeros(2, np.float32))
    with pytest.raises(ArgumentError):
        sgd_step(TrainState(), [w], [np.zeros(3, np.float32)], const_lr(0.1))
    with pytest.raises(ArgumentError):
        adamw_step(TrainState(), [w], [], const_lr(0.1))


def test_adamw_decay_only():
    w = Tensor(np.array([2.0], np.float32))
    adamw_step(TrainState(), [w], [np.zeros(1, np.float32)], const_lr(0.1, weight_decay=0.5))
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_adamw_first_step_magnitude():
    w = Tensor(np.array([1.0, 1.0], np.float32))
    adamw_step(TrainState(), [w], [np.array([3.0, -0.02], np.float32)], const_lr(0.01, weight_decay=0.0))
    assert w.data == pytest.approx([0.99, 1.01], abs=1e-5)


def adam_oracle(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adamw_without_decay_is_adam():
    grads = [0.5, -1.0, 2.0, 0.1]
    w = Tensor(np.array([0.7], np.float32))
    state, cfg = TrainState(), const_lr(0.05, weight_decay=0.0)
    for g in grads:
        adamw_step(state, [w], [np.array([g], np.float32)], cfg)
    assert w.data[0] == pytest.approx(adam_oracle(0.7, grads, 0.05), abs=1e-5)


# ---------------------------------------------------------------- training loop

TINY = UNetConfig(variant="shift2d_multiview", stage_widths=(2, 4), patch_extent=8)


def tiny_data(n=2, extent=12):
    return [generate_phantom(organ_spec(extent, seed=i)) for i in range(n)]


def test_zero_lr_leaves_params_bitwise():
    net = build(TINY, seed=0)
    before = [p.data.copy() for p in net.parameters()]
    for kind in ("adamw", "sgd_momentum"):
        optim = OptimConfig(kind=kind, lr=0.0, weight_decay=0.0, warmup_iters=2, total_iters=5)
        train(net, tiny_data(), optim, LoopConfig(steps=5, patch_extent=8))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))


def test_training_deterministic():
    def run():
        net = build(TINY, seed=1)
        optim = OptimConfig(kind="adamw", lr=0.01, warmup_iters=2, total_iters=6)
        _, hist = train(net, tiny_data(), optim, LoopConfig(steps=6, patch_extent=8, seed=3), tiny_data(1))
        return hist, [p.data.copy() for p in net.parameters()]

    (h1, p1), (h2, p2) = run(), run()
    assert h1 == h2
    assert h1[-1]["val_dice"] is not None and h1[0]["val_dice"] is None
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_nan_input_aborts_with_diagnostics():
    rec = tiny_data(1)[0]
    rec.intensity[0, 2:10, 2:10, 2:10] = np.nan
    net = build(TINY, seed=0)
    optim = OptimConfig(kind="adamw", lr=0.01, warmup_iters=1, total_iters=2)
    with pytest.raises(TrainingAborted, match=r"step 0.*lr=.*grad norm"):
        train(net, [rec], optim, LoopConfig(steps=2, patch_extent=8))


def test_train_argument_errors():
    net = build(TINY)
    with pytest.raises(ArgumentError):
        train(net, [], OptimConfig(), LoopConfig())
    with pytest.raises(ArgumentError, match="warmup"):
        train(net, tiny_data(1), OptimConfig(warmup_iters=10, total_iters=5), LoopConfig(steps=1, patch_extent=8))


def test_smoke_loss_decreases():
    data = [generate_phantom(organ_spec(16, seed=i)) for i in range(4)]
    net = build(UNetConfig(variant="shift2d_multiview", stage_widths=(4, 8), patch_extent=16), seed=0)
    optim = OptimConfig(kind="adamw", lr=0.01, warmup_iters=10, total_iters=300)
    _, hist = train(net, data, optim, LoopConfig(steps=100, patch_extent=16, fg_bias=0.5))
    loss = np.array([r["loss"] for r in hist])
    assert np.all(np.isfinite(loss))
    blocks = loss.reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(blocks) < 0), blocks


def test_write_history(tmp_path):
    path = tmp_path / "h.csv"
    write_history(path, [{"step": 0, "loss": 1.5, "lr": 0.001, "val_dice": None},
                         {"step": 1, "loss": 1.25, "lr": 0.002, "val_dice": 0.5}])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_HEADER) == "step,loss,lr,val_dice"
    assert lines[1] == "0,1.500000,0.001,"
    assert lines[2] == "1,1.250000,0.002,0.500000"


# ---------------------------------------------------------------- sliding window


def test_window_starts():
    assert window_starts(8, 8, 0.5) == [0]
    assert window_starts(12, 8, 0.5) == [0, 4]
    assert window_starts(13, 8, 0.5) == [0, 4, 5]
    assert window_starts(10, 4, 0.0) == [0, 4, 6]


def test_window_count_map_center_two():
    starts = window_starts(12, 8, 0.5)
    counts = np.zeros(12, int)
    for s in starts:
        counts[s : s + 8] += 1
    assert counts.tolist() == [1] * 4 + [2] * 4 + [1] * 4


class RecordingNet:
    """Stand-in network: each call emits a distinct two-class logit field."""

    def __init__(self, patch=8):
        self.cfg = SimpleNamespace(num_classes=2, patch_extent=patch)
        self.calls = []

    def __call__(self, x):
        a = float(len(self.calls)) * 0.3 - 1.0
        self.calls.append(a)
        out = np.zeros((1, 2) + x.shape[2:], np.float32)
        out[:, 1] = a
        return Tensor(out)


def test_sliding_window_uniform_average():
    net = RecordingNet()
    vol = np.zeros((1, 12, 8, 8), np.float32)
    _, probs = sliding_window_infer(net, vol, 8, 0.5, return_probs=True)
    assert len(net.calls) == 2
    p = [1 / (1 + math.exp(-a)) for a in net.calls]
    assert probs[1, 0, 0, 0] == pytest.approx(p[0])
    assert probs[1, 5, 3, 3] == pytest.approx((p[0] + p[1]) / 2)
    assert probs[1, 11, 0, 7] == pytest.approx(p[1])


def test_volume_equal_patch_matches_single_forward():
    net = build(UNetConfig(variant="shift2d", stage_widths=(2, 4), patch_extent=8), seed=2)
    big = tiny_data(1)[0]
    rec = VolumeRecord(big.intensity[:, 2:10, 2:10, 2:10].copy(), big.labels[2:10, 2:10, 2:10].copy())
    direct = net(Tensor(rec.intensity[None])).data[0].argmax(axis=0)
    assert np.array_equal(sliding_window_infer(net, rec), direct)


@pytest.mark.parametrize("shape", [(8, 8, 8), (12, 9, 8), (5, 6, 8), (3, 3, 3)])
def test_constant_logit_net_constant_labels(shape):
    class Const:
        cfg = SimpleNamespace(num_classes=3, patch_extent=8)

        def __call__(self, x):
            out = np.zeros((1, 3) + x.shape[2:], np.float32)
            out[:, 2] = 1.0
            return Tensor(out)

    rec = VolumeRecord(np.random.default_rng(0).standard_normal((1,) + shape).astype(np.float32),
                       np.zeros(shape, np.int64))
    labels = sliding_window_infer(Const(), rec)
    assert labels.shape == shape and np.all(labels == 2)
