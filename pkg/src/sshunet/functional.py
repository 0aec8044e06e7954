"""Network ops on (B, C, S, H, W) tensors: convolutions, instance norm, activations."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ArgumentError, DegenerateInputError
from .tensor import apply_op

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D (or planar, ``kernel[0] == 1``) convolution.

    Regular convs use "same"-style padding ``k // 2`` per axis, so stride 1
    preserves extents and stride 2 halves them (ceil). Transposed convs use
    no padding and weights of shape ``(C_in, C_out, *kernel)``.
    """

    in_channels: int
    out_channels: int
    kernel: tuple = (1, 3, 3)
    stride: tuple = (1, 1, 1)
    bias: bool = False
    transposed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        problems = []
        if self.in_channels < 1 or self.out_channels < 1:
            problems.append("channel counts must be positive")
        if len(self.kernel) != 3 or len(self.stride) != 3:
            problems.append("kernel and stride need three entries (S, H, W)")
        elif self.transposed:
            if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
                problems.append(f"bad transposed kernel/stride {self.kernel}/{self.stride}")
        else:
            if any(k < 1 or k % 2 == 0 for k in self.kernel):
                problems.append(f"kernel extents must be positive and odd, got {self.kernel}")
            if self.kernel[0] not in (1, 3):
                problems.append(f"slice-axis kernel must be 1 or 3, got {self.kernel[0]}")
            if any(s < 1 for s in self.stride):
                problems.append(f"bad stride {self.stride}")
        if problems:
            raise ArgumentError("; ".join(problems))

    @property
    def padding(self):
        if self.transposed:
            return (0, 0, 0)
        return tuple(k // 2 for k in self.kernel)

    @property
    def kernel_volume(self):
        return self.kernel[0] * self.kernel[1] * self.kernel[2]

    @property
    def weight_shape(self):
        if self.transposed:
            return (self.in_channels, self.out_channels, *self.kernel)
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_spatial(self, spatial):
        if self.transposed:
            return tuple((n - 1) * s + k for n, k, s in zip(spatial, self.kernel, self.stride))
        return tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding)
        )


def _check_input(t, spec, weight, bias):
    if t.ndim != 5:
        raise ArgumentError(f"expected a (B, C, S, H, W) tensor, got shape {t.shape}")
    if t.shape[1] != spec.in_channels:
        raise ArgumentError(f"channel mismatch: input has {t.shape[1]}, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ArgumentError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if spec.bias != (bias is not None):
        raise ArgumentError("bias presence disagrees with spec.bias")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ArgumentError(f"bias shape {bias.shape} != ({spec.out_channels},)")


def conv(t, spec, weight, bias=None):
    """Cross-correlation with zero padding, via im2col + one GEMM."""
    _check_input(t, spec, weight, bias)
    x = t.data
    B = x.shape[0]
    ps, ph, pw = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ps, ps), (ph, ph), (pw, pw))) if ps or ph or pw else x
    out_sp = spec.output_spatial(x.shape[2:])
    if min(out_sp) < 1:
        raise ArgumentError(f"input extents {x.shape[2:]} too small for kernel {spec.kernel}")
    cols = kernels.im2col(xp, spec.kernel, spec.stride, out_sp)
    wm = weight.data.reshape(spec.out_channels, -1)
    y = wm @ cols
    if bias is not None:
        y += bias.data[:, None]
    out = np.ascontiguousarray(y.reshape(spec.out_channels, B, *out_sp).transpose(1, 0, 2, 3, 4))

    def vjp(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(spec.out_channels, -1)
        gx = gw = gb = None
        if t.requires_grad:
            gxp = kernels.col2im(wm.T @ gm, xp.shape, spec.kernel, spec.stride, out_sp)
            gx = gxp[:, :, ps : ps + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1, dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    inputs = (t, weight) if bias is None else (t, weight, bias)
    return apply_op(out, inputs, vjp)


def conv_transpose(t, spec, weight, bias=None):
    """Transposed convolution (adjoint of :func:`conv` with the same geometry, no padding)."""
    if not spec.transposed:
        raise ArgumentError("conv_transpose needs a ConvSpec with transposed=True")
    _check_input(t, spec, weight, bias)
    x = t.data
    B, Cin = x.shape[:2]
    in_sp = x.shape[2:]
    out_sp = spec.output_spatial(in_sp)
    xm = x.transpose(1, 0, 2, 3, 4).reshape(Cin, -1)
    wm = weight.data.reshape(Cin, -1)
    out = kernels.col2im(wm.T @ xm, (B, spec.out_channels, *out_sp), spec.kernel, spec.stride, in_sp)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def vjp(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), spec.kernel, spec.stride, in_sp)
        gx = gw = gb = None
        if t.requires_grad:
            gx = (wm @ gcols).reshape(Cin, B, *in_sp).transpose(1, 0, 2, 3, 4)
        if weight.requires_grad:
            gw = (xm @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    inputs = (t, weight) if bias is None else (t, weight, bias)
    return apply_op(out, inputs, vjp)


def instance_norm(t, gamma=None, beta=None, eps=NORM_EPS):
    """Normalize each (batch, channel) instance over its spatial extent, then apply affine."""
    x = t.data
    B, C = x.shape[:2]
    n = x[0, 0].size
    if n < 2:
        raise DegenerateInputError(f"instance norm needs >= 2 elements per instance, got {n}")
    rows = x.reshape(B * C, n)
    mean, var = kernels.instance_stats(rows)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = ((rows - mean[:, None]) * invstd[:, None]).astype(x.dtype)
    xhat3 = xhat.reshape(B, C, n)
    if gamma is not None:
        y = xhat3 * gamma.data[None, :, None] + beta.data[None, :, None]
    else:
        y = xhat3

    def vjp(g):
        g3 = g.reshape(B, C, n)
        dxhat = g3 * gamma.data[None, :, None] if gamma is not None else g3
        dxhat = dxhat.reshape(B * C, n)
        s1 = dxhat.sum(axis=1, dtype=np.float64)
        s2 = np.einsum("ij,ij->i", dxhat, xhat, dtype=np.float64)
        gx = (invstd[:, None] / n) * (n * dxhat - s1[:, None] - xhat * s2[:, None])
        gx = gx.astype(x.dtype).reshape(x.shape)
        if gamma is None:
            return (gx,)
        ggamma = np.einsum("bcn,bcn->c", g3, xhat3, dtype=np.float64).astype(x.dtype)
        gbeta = g3.sum(axis=(0, 2), dtype=np.float64).astype(x.dtype)
        return gx, ggamma, gbeta

    inputs = (t,) if gamma is None else (t, gamma, beta)
    return apply_op(y.reshape(x.shape), inputs, vjp)


def leaky_relu(t, slope=LEAKY_SLOPE):
    x = t.data
    neg = x < 0
    out = np.where(neg, x * np.asarray(slope, dtype=x.dtype), x)
    return apply_op(out, (t,), lambda g: (np.where(neg, g * np.asarray(slope, dtype=g.dtype), g),))


def softmax(t, axis=1):
    x = t.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return apply_op(p, (t,), vjp)
