"""Slice-shift building blocks: multi-view creation/reversal, slice shifting,
the residual block and the multi-view fusion head.

Tensors are laid out (batch, channel, slice, height, width). Planar
convolutions use kernel ``(1, 3, 3)`` and therefore never look across
slices; the shift is what mixes neighbouring slices.
"""

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ArgumentError
from .functional import ConvSpec, conv, conv_transpose, instance_norm, leaky_relu
from .tensor import Tensor, add, apply_op, concat, narrow, permute

ORIENTATIONS = ("xy", "yz", "xz")

# canonical (B, C, X, Y, Z) -> view layout; the slice axis is the first spatial one
VIEW_PERMUTATIONS = {
    "xy": (0, 1, 4, 2, 3),  # (C, Z, X, Y)
    "yz": (0, 1, 2, 3, 4),  # (C, X, Y, Z)
    "xz": (0, 1, 3, 2, 4),  # (C, Y, X, Z)
}


def _inverse(order):
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return tuple(inv)


@dataclass
class ViewBatch:
    """Three orientations of a volume stacked on the batch axis, order (xy, yz, xz)."""

    tensor: Tensor
    base_batch: int

    def __post_init__(self):
        if self.tensor.shape[0] != 3 * self.base_batch:
            raise ArgumentError(
                f"view batch extent {self.tensor.shape[0]} != 3 * base batch {self.base_batch}"
            )

    def view(self, name):
        i = ORIENTATIONS.index(name)
        return narrow(self.tensor, 0, i * self.base_batch, (i + 1) * self.base_batch)


def create_multi_view(v):
    """Stack the xy, yz and xz orientations of an isotropic (B, C, X, Y, Z) volume."""
    if v.ndim != 5:
        raise ArgumentError(f"expected (B, C, X, Y, Z), got {v.shape}")
    X, Y, Z = v.shape[2:]
    if not X == Y == Z:
        raise ArgumentError(f"multi-view creation requires an isotropic volume, got {X}x{Y}x{Z}")
    views = [permute(v, VIEW_PERMUTATIONS[o]) for o in ORIENTATIONS]
    return ViewBatch(concat(views, axis=0), v.shape[0])


def reverse_multi_view(o):
    """Undo :func:`create_multi_view`: three tensors back in canonical (B, C, X, Y, Z) order."""
    if isinstance(o, Tensor):
        if o.shape[0] % 3:
            raise ArgumentError(f"batch extent {o.shape[0]} is not divisible by 3")
        o = ViewBatch(o, o.shape[0] // 3)
    return tuple(permute(o.view(name), _inverse(VIEW_PERMUTATIONS[name])) for name in ORIENTATIONS)


@dataclass(frozen=True)
class ShiftSpec:
    """Shift ``floor(C * fraction)`` channels forward and as many backward along the slice axis."""

    fraction: Fraction = Fraction(1, 4)

    def __post_init__(self):
        frac = Fraction(self.fraction).limit_denominator(1 << 16)
        if not 0 <= frac <= Fraction(1, 2):
            raise ArgumentError(f"shift fraction must lie in [0, 1/2], got {frac}")
        object.__setattr__(self, "fraction", frac)

    def n_shifted(self, channels):
        return int(channels * self.fraction)


def _shift_data(x, n):
    out = x.copy()
    if n == 0:
        return out
    # channels [0, n): out[s] = in[s - 1]; channels [n, 2n): out[s] = in[s + 1]; zero fill
    out[:, :n, 1:] = x[:, :n, :-1]
    out[:, :n, 0] = 0
    out[:, n : 2 * n, :-1] = x[:, n : 2 * n, 1:]
    out[:, n : 2 * n, -1] = 0
    return out


def _unshift_data(g, n):
    out = g.copy()
    if n == 0:
        return out
    out[:, :n, :-1] = g[:, :n, 1:]
    out[:, :n, -1] = 0
    out[:, n : 2 * n, 1:] = g[:, n : 2 * n, :-1]
    out[:, n : 2 * n, 0] = 0
    return out


def slice_shift(t, spec):
    """Shift a slice of channels by +1 / -1 along the slice axis (axis 2). No parameters, no MACs."""
    if not isinstance(spec, ShiftSpec):
        spec = ShiftSpec(spec)
    n = spec.n_shifted(t.shape[1])
    return apply_op(_shift_data(t.data, n), (t,), lambda g: (_unshift_data(g, n),))


def shift_mac_equivalence(x, w):
    """Evaluate a zero-padded 3-tap 1D convolution two ways.

    ``direct[i] = w1*x[i-1] + w2*x[i] + w3*x[i+1]``; ``decomposed`` builds the
    shifted copies ``x^-1[i] = x[i-1]`` and ``x^+1[i] = x[i+1]`` first and then
    multiply-accumulates them. Returns both as float64 arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    w1, w2, w3 = (float(v) for v in w)
    if x.ndim != 1 or len(x) < 3:
        raise ArgumentError("need a 1D sequence of length >= 3")
    n = len(x)
    direct = np.empty(n)
    for i in range(n):
        left = x[i - 1] if i > 0 else 0.0
        right = x[i + 1] if i < n - 1 else 0.0
        direct[i] = w1 * left + w2 * x[i] + w3 * right
    # reuse the network's shift: channel 0 gets x[i-1], channel 1 gets x[i+1]
    pair = np.broadcast_to(x, (2, n)).reshape(1, 2, n, 1, 1)
    shifted = _shift_data(pair, 1)
    minus, plus = shifted[0, 0, :, 0, 0], shifted[0, 1, :, 0, 0]
    decomposed = w1 * minus + w2 * x + w3 * plus
    return direct, decomposed


class Module:
    """Tiny parameter container; parameters are Tensors with ``requires_grad``."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def kaiming_uniform(shape, rng):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv(Module):
    def __init__(self, spec, rng):
        self.spec = spec
        self.weight = Tensor(kaiming_uniform(spec.weight_shape, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True) if spec.bias else None

    def __call__(self, x):
        if self.spec.transposed:
            return conv_transpose(x, self.spec, self.weight, self.bias)
        return conv(x, self.spec, self.weight, self.bias)


class InstanceNorm(Module):
    def __init__(self, channels):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return instance_norm(x, self.weight, self.bias)


@dataclass(frozen=True)
class ResidualBlockConfig:
    in_channels: int
    out_channels: int
    shift: Optional[ShiftSpec] = None
    stride: tuple = (1, 1, 1)
    kernel: tuple = (1, 3, 3)
    shift_placement: str = "pre_conv"  # or "between_convs"

    def __post_init__(self):
        if self.shift_placement not in ("pre_conv", "between_convs"):
            raise ArgumentError(f"unknown shift placement {self.shift_placement!r}")

    @property
    def projects(self):
        return self.in_channels != self.out_channels or tuple(self.stride) != (1, 1, 1)


class ResidualBlock(Module):
    """[shift] -> conv -> IN -> LReLU -> conv -> IN -> (+ skip) -> LReLU.

    The skip carries the unshifted input, projected by a 1x1x1 conv + IN when
    channels or stride change.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.conv1 = Conv(ConvSpec(cfg.in_channels, cfg.out_channels, cfg.kernel, cfg.stride), rng)
        self.norm1 = InstanceNorm(cfg.out_channels)
        self.conv2 = Conv(ConvSpec(cfg.out_channels, cfg.out_channels, cfg.kernel), rng)
        self.norm2 = InstanceNorm(cfg.out_channels)
        if cfg.projects:
            self.proj = Conv(ConvSpec(cfg.in_channels, cfg.out_channels, (1, 1, 1), cfg.stride), rng)
            self.proj_norm = InstanceNorm(cfg.out_channels)
        else:
            self.proj = self.proj_norm = None

    def __call__(self, x):
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise ArgumentError(f"block expects {cfg.in_channels} channels, got {x.shape[1]}")
        h = x
        if cfg.shift is not None and cfg.shift_placement == "pre_conv":
            h = slice_shift(h, cfg.shift)
        h = leaky_relu(self.norm1(self.conv1(h)))
        if cfg.shift is not None and cfg.shift_placement == "between_convs":
            h = slice_shift(h, cfg.shift)
        h = self.norm2(self.conv2(h))
        skip = self.proj_norm(self.proj(x)) if self.proj is not None else x
        return leaky_relu(add(h, skip))


def ssh_residual_block(t, block):
    return block(t)


class Head(Module):
    """Two 1x1x1 convs with a LeakyReLU between them, producing class logits.

    With ``fuse=True`` the input is a view batch that is first reversed to
    canonical orientation and summed over the three views.
    """

    def __init__(self, channels, num_classes, rng, fuse):
        self.fuse = fuse
        self.conv1 = Conv(ConvSpec(channels, channels, (1, 1, 1), bias=True), rng)
        self.conv2 = Conv(ConvSpec(channels, num_classes, (1, 1, 1), bias=True), rng)

    def __call__(self, o):
        if self.fuse:
            o = fuse_views(o)
        return self.conv2(leaky_relu(self.conv1(o)))


def fuse_views(o):
    xy, yz, xz = reverse_multi_view(o)
    return add(add(xy, yz), xz)


def multi_view_fusion(o, head):
    """Reverse the views, sum them and project to logits with ``head`` (a fusing :class:`Head`)."""
    if not head.fuse:
        raise ArgumentError("multi_view_fusion needs a fusing head")
    return head(o)
