"""Loss, optimizers, schedule, training loop and sliding-window inference."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, augment, sample_patch
from .errors import ArgumentError, NonFiniteError, TrainingAborted
from .metrics import evaluate_case
from .tensor import Tape, Tensor, apply_op

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


def dice_ce_loss(logits, labels, smooth=DICE_SMOOTH, parts=False):
    """Mean over the batch of cross-entropy + (1 - soft Dice averaged over all classes).

    ``labels`` is an int array shaped like ``logits`` minus the class axis.
    With ``parts=True`` also returns the per-batch-mean ``(ce, soft_dice)``.
    """
    z = logits.data
    B, K = z.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (B,) + z.shape[2:]:
        raise ArgumentError(f"labels shape {labels.shape} does not match logits {z.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ArgumentError(f"labels must lie in [0, {K}), got [{labels.min()}, {labels.max()}]")
    zf = z.reshape(B, K, -1).astype(np.float64)
    n = zf.shape[2]
    zmax = zf.max(axis=1, keepdims=True)
    e = np.exp(zf - zmax)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    logp = zf - zmax - np.log(denom)
    onehot = (labels.reshape(B, 1, n) == np.arange(K)[None, :, None]).astype(np.float64)

    ce = -(onehot * logp).sum(axis=1).mean(axis=1)
    inter = (p * onehot).sum(axis=2)
    total = p.sum(axis=2) + onehot.sum(axis=2) + smooth
    soft_dice = (2 * inter + smooth) / total
    loss = (ce + 1.0 - soft_dice.mean(axis=1)).mean()

    def vjp(g):
        d_ce = (p - onehot) / (n * B)
        d_dice_dp = (2 * onehot * total[..., None] - (2 * inter + smooth)[..., None]) / total[..., None] ** 2
        dp = -d_dice_dp / (K * B)
        d_dice = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        return (((d_ce + d_dice) * g).reshape(z.shape).astype(z.dtype),)

    out = apply_op(np.asarray(loss, dtype=z.dtype), (logits,), vjp)
    if parts:
        return out, float(ce.mean()), float(soft_dice.mean())
    return out


@dataclass
class OptimConfig:
    kind: str = "sgd_momentum"  # or "adamw"
    lr: float = 0.01
    momentum: float = 0.99
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-5
    eps: float = 1e-8
    warmup_iters: int = 50
    total_iters: int = 1000

    def validate(self):
        problems = []
        if self.kind not in ("sgd_momentum", "adamw"):
            problems.append(f"optimizer kind {self.kind!r} must be sgd_momentum or adamw")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if not 0 <= self.warmup_iters <= self.total_iters:
            problems.append("need 0 <= warmup_iters <= total_iters")
        return problems


def lr_at(cfg, step):
    """Linear warmup to ``cfg.lr`` over ``warmup_iters`` steps, then cosine decay to 0."""
    w, total = cfg.warmup_iters, cfg.total_iters
    if step < w:
        return cfg.lr * (step + 1) / w
    if total == w:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


@dataclass
class TrainState:
    step: int = 0
    velocity: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val: float = float("-inf")
    best_step: int = -1


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ArgumentError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ArgumentError(f"param {i}: shape {p.shape} vs grad {g.shape}")


def sgd_step(state, params, grads, cfg):
    """v <- momentum * v + g;  w <- w - lr(step) * v."""
    _check_shapes(params, grads)
    lr = np.float32(lr_at(cfg, state.step))
    mom = np.float32(cfg.momentum)
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.velocity.get(i)
        v = g.astype(p.dtype) if v is None else mom * v + g
        state.velocity[i] = v
        p.data = p.data - lr * v
    state.step += 1


def adamw_step(state, params, grads, cfg):
    """Adam with bias correction plus decoupled weight decay ``w <- w (1 - lr * wd)``."""
    _check_shapes(params, grads)
    lr = lr_at(cfg, state.step)
    b1, b2 = cfg.betas
    t = state.step + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.get(i, np.zeros_like(p.data))
        v = state.v.get(i, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data * (1 - lr * cfg.weight_decay) - lr * update).astype(p.dtype)
    state.step += 1


@dataclass
class LoopConfig:
    steps: int = 300
    batch_size: int = 2
    patch_extent: int = 16
    fg_bias: float = 0.5
    val_every: int = 0  # 0: validate only after the last step
    val_overlap: float = 0.5
    augment: AugmentConfig = None
    seed: int = 0


def window_starts(n, patch, overlap):
    step = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, n - patch + 1, step))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def sliding_window_infer(net, volume, patch_extent=None, overlap=0.5, return_probs=False):
    """Tile, average softmax probabilities uniformly over overlaps, argmax.

    Volumes smaller than the patch are reflect-padded and cropped back.
    """
    patch = patch_extent or net.cfg.patch_extent
    img = volume.intensity if hasattr(volume, "intensity") else np.asarray(volume)
    shape = img.shape[1:]
    pads = [(0, max(0, patch - n)) for n in shape]
    if any(b for _, b in pads):
        img = np.pad(img, [(0, 0)] + pads, mode="reflect" if all(b < n for (_, b), n in zip(pads, shape)) else "symmetric")
    full = img.shape[1:]
    K = net.cfg.num_classes
    probs = np.zeros((K,) + full, dtype=np.float64)
    counts = np.zeros(full, dtype=np.int64)
    for sx in window_starts(full[0], patch, overlap):
        for sy in window_starts(full[1], patch, overlap):
            for sz in window_starts(full[2], patch, overlap):
                sl = (slice(sx, sx + patch), slice(sy, sy + patch), slice(sz, sz + patch))
                logits = net(Tensor(img[(slice(None),) + sl][None])).data[0].astype(np.float64)
                e = np.exp(logits - logits.max(axis=0, keepdims=True))
                probs[(slice(None),) + sl] += e / e.sum(axis=0, keepdims=True)
                counts[sl] += 1
    probs /= counts
    crop = tuple(slice(0, n) for n in shape)
    probs = probs[(slice(None),) + crop]
    labels = probs.argmax(axis=0)
    return (labels, probs) if return_probs else labels


def mean_dice(net, records, overlap=0.5):
    """Mean over cases of the macro foreground Dice (sliding-window predictions)."""
    scores = []
    for rec in records:
        pred = sliding_window_infer(net, rec, overlap=overlap)
        scores.append(evaluate_case(rec.labels, pred, net.cfg.num_classes, with_nsd=False).mean_dsc)
    return float(np.mean(scores))


def _grad_norms(params):
    return [float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0 for p in params]


def train(net, dataset, optim, loop, val_records=None):
    """Optimise ``net`` on patches of ``dataset``; returns ``(state, history)``.

    ``history`` rows are dicts with keys step, loss, lr, val_dice (None when
    not validated at that step).
    """
    if not dataset:
        raise ArgumentError("training dataset is empty")
    problems = optim.validate()
    if problems:
        raise ArgumentError("; ".join(problems))
    rng = np.random.default_rng(loop.seed)
    params = net.parameters()
    step_fn = sgd_step if optim.kind == "sgd_momentum" else adamw_step
    state = TrainState()
    history = []
    for step in range(loop.steps):
        imgs, lbls = [], []
        for _ in range(loop.batch_size):
            rec = dataset[int(rng.integers(len(dataset)))]
            img, lbl = sample_patch(rec, loop.patch_extent, rng, loop.fg_bias)
            if loop.augment is not None:
                img, lbl = augment(img, lbl, loop.augment, rng)
            imgs.append(img)
            lbls.append(lbl)
        lr = lr_at(optim, state.step)
        net.zero_grad()
        try:
            with Tape() as tape:
                loss = dice_ce_loss(net(Tensor(np.stack(imgs))), np.stack(lbls))
            tape.backward(loss)
            grads = [p.grad for p in params]
            for g in grads:
                if not np.isfinite(g.sum(dtype=np.float64)):
                    raise NonFiniteError("non-finite gradient")
        except NonFiniteError as exc:
            norms = _grad_norms(params)
            raise TrainingAborted(
                f"step {step}: {exc}; lr={lr:.3g}; max grad norm="
                f"{max(norms) if norms else float('nan'):.3g}"
            ) from exc
        step_fn(state, params, grads, optim)
        row = {"step": step, "loss": float(loss.item()), "lr": lr, "val_dice": None}
        last = step == loop.steps - 1
        if val_records and (last or (loop.val_every and (step + 1) % loop.val_every == 0)):
            row["val_dice"] = mean_dice(net, val_records, loop.val_overlap)
            if row["val_dice"] > state.best_val:
                state.best_val, state.best_step = row["val_dice"], step
        history.append(row)
        if step % 50 == 0 or last:
            log.info("step %d loss %.4f lr %.3g val %s", step, row["loss"], lr, row["val_dice"])
    return state, history


HISTORY_HEADER = ("step", "loss", "lr", "val_dice")


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            val = "" if row["val_dice"] is None else f"{row['val_dice']:.6f}"
            w.writerow([row["step"], f"{row['loss']:.6f}", f"{row['lr']:.6g}", val])
