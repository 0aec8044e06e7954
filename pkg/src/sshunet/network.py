"""The slice-shift UNet and its ablation variants, plus checkpoint I/O.

Variants:

* ``plain2d``            planar (1x3x3) convs, no shift, single view
* ``shift2d``            planar convs with slice shifting, single view
* ``shift2d_multiview``  shifting + weight-shared multi-view batch + fusion head
* ``full3d``             (3x3x3) convs everywhere, no shift, single view

Planar variants downsample H and W only (stride ``(1, 2, 2)``), so no op
ever mixes slices except the shift. ``full3d`` strides all three axes.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import ArgumentError, CheckpointError, ConfigError
from .functional import ConvSpec
from .layers import (
    Conv,
    Head,
    Module,
    ResidualBlock,
    ResidualBlockConfig,
    ShiftSpec,
    ViewBatch,
    create_multi_view,
)
from .tensor import concat

VARIANTS = ("plain2d", "shift2d", "shift2d_multiview", "full3d")

CHECKPOINT_MAGIC = b"SSHU"
CHECKPOINT_VERSION = 1


def parse_fraction(value):
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value).limit_denominator(1 << 16)


@dataclass
class UNetConfig:
    variant: str = "shift2d_multiview"
    stage_widths: tuple = (8, 16, 32)
    shift_fraction: Fraction = Fraction(1, 4)
    in_channels: int = 1
    num_classes: int = 3
    patch_extent: int = 16
    shift_placement: str = "pre_conv"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        try:
            self.shift_fraction = parse_fraction(self.shift_fraction)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"shift_fraction: {exc}") from None

    def violations(self):
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant {self.variant!r} is not one of {', '.join(VARIANTS)}")
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            out.append(f"stage_widths must be non-empty positive integers, got {self.stage_widths}")
        if not 0 <= self.shift_fraction <= Fraction(1, 2):
            out.append(f"shift_fraction must lie in [0, 1/2], got {self.shift_fraction}")
        if self.in_channels < 1:
            out.append("in_channels must be >= 1")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        div = 2 ** (len(self.stage_widths) - 1)
        if self.patch_extent < 1 or self.patch_extent % div:
            out.append(f"patch_extent {self.patch_extent} must be divisible by {div}")
        if self.shift_placement not in ("pre_conv", "between_convs"):
            out.append(f"shift_placement {self.shift_placement!r} must be pre_conv or between_convs")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def uses_shift(self):
        return self.variant in ("shift2d", "shift2d_multiview")

    @property
    def multiview(self):
        return self.variant == "shift2d_multiview"

    @property
    def kernel(self):
        return (3, 3, 3) if self.variant == "full3d" else (1, 3, 3)

    @property
    def down_stride(self):
        return (2, 2, 2) if self.variant == "full3d" else (1, 2, 2)

    @property
    def shift(self):
        return ShiftSpec(self.shift_fraction) if self.uses_shift else None

    def to_dict(self):
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["shift_fraction"] = str(self.shift_fraction)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


class SSHUNet(Module):
    """Encoder/decoder of residual blocks with concatenated skips.

    Encoder stage 0 keeps the input resolution; each later stage halves the
    strided axes in its first conv. The last encoder stage is the bottleneck.
    Each decoder stage upsamples with a transposed conv (kernel == stride),
    concatenates the matching encoder output and runs a residual block.
    """

    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        widths = cfg.stage_widths
        shift = cfg.shift

        def block(cin, cout, stride):
            rb = ResidualBlockConfig(cin, cout, shift, stride, cfg.kernel, cfg.shift_placement)
            return ResidualBlock(rb, rng)

        self.encoder = []
        cin = cfg.in_channels
        for i, w in enumerate(widths):
            self.encoder.append(block(cin, w, (1, 1, 1) if i == 0 else cfg.down_stride))
            cin = w
        self.upsamplers = []
        self.decoder = []
        for i in reversed(range(len(widths) - 1)):
            up = ConvSpec(widths[i + 1], widths[i], cfg.down_stride, cfg.down_stride, transposed=True)
            self.upsamplers.append(Conv(up, rng))
            self.decoder.append(block(2 * widths[i], widths[i], (1, 1, 1)))
        self.head = Head(widths[0], cfg.num_classes, rng, fuse=cfg.multiview)

    def __call__(self, v):
        return self.forward(v)

    def forward(self, v, return_views=False):
        """(B, C_in, D, D, D) -> logits (B, K, D, D, D).

        With ``return_views`` also returns the last decoder output before the
        head (a :class:`ViewBatch` for the multi-view variant).
        """
        cfg = self.cfg
        D = cfg.patch_extent
        if v.ndim != 5 or v.shape[1] != cfg.in_channels or v.shape[2:] != (D, D, D):
            raise ArgumentError(
                f"expected input (B, {cfg.in_channels}, {D}, {D}, {D}), got {v.shape}"
            )
        x = create_multi_view(v).tensor if cfg.multiview else v
        skips = []
        for blk in self.encoder:
            x = blk(x)
            skips.append(x)
        skips.pop()
        for up, blk in zip(self.upsamplers, self.decoder):
            x = blk(concat([up(x), skips.pop()], axis=1))
        feats = ViewBatch(x, v.shape[0]) if cfg.multiview else x
        logits = self.head(feats)
        return (logits, feats) if return_views else logits

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def build(cfg, seed=0):
    """Deterministically initialise a network for ``cfg``."""
    return SSHUNet(cfg, seed)


# Checkpoint layout (little-endian):
#   b"SSHU", u32 version, 32-byte sha256 of the config JSON,
#   u32 config length, config JSON, u32 tensor count, then per tensor:
#   u16 name length, utf-8 name, u8 rank, u32 * rank shape, f32 payload.


def save_params(net, path):
    cfg_blob = json.dumps(net.cfg.to_dict(), sort_keys=True).encode()
    params = list(net.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(hashlib.sha256(cfg_blob).digest())
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Parse a checkpoint into ``(config dict, {name: array})`` without building a network."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = take(32)
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg_blob = take(cfg_len)
    if hashlib.sha256(cfg_blob).digest() != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return json.loads(cfg_blob), tensors


def load_params(net, path):
    """Load checkpoint weights into ``net``; shapes and names must match exactly."""
    _, tensors = read_checkpoint(path)
    params = dict(net.named_parameters())
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {tensors[name].shape} != network shape {p.shape}"
            )
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    for name, p in params.items():
        p.data = tensors[name].copy()
    return net


def load_network(path):
    """Rebuild a network from the config stored in a checkpoint and load its weights."""
    cfg_dict, _ = read_checkpoint(path)
    try:
        cfg = UNetConfig.from_dict(cfg_dict)
    except TypeError as exc:
        raise CheckpointError(f"{path}: bad embedded config ({exc})") from None
    return load_params(build(cfg), path)
