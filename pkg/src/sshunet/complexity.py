"""Static parameter / FLOP model of a :class:`~sshunet.network.UNetConfig`.

Conventions (stated in every CSV header):

* conv FLOPs = 2 * MACs, MACs = output voxels * C_out * C_in * kernel volume
  (transposed conv: input voxels * C_in * C_out * kernel volume); bias ignored
* instance norm and LeakyReLU: 2 FLOPs per element
* elementwise add (residual skip, view summation): 1 FLOP per element
* slice shift, permutations, concatenation: 0 params, 0 FLOPs

The multi-view variant runs 3B samples through every layer up to the
fusion head; this is charged to FLOPs but not to parameters.
"""

import csv
import io
from dataclasses import dataclass, field

FLOP_CONVENTION = "1 MAC = 2 FLOPs; norm/activation 2 FLOPs/element; add 1 FLOP/element; shift 0"


@dataclass
class CostRow:
    layer: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    input_shape: tuple = ()

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    def row(self, name):
        for r in self.rows:
            if r.layer == name:
                return r
        raise KeyError(name)

    convention: str = FLOP_CONVENTION

    def to_csv(self, comment=False):
        """CSV with header ``layer,params,flops`` and a ``total`` row last.

        ``comment=True`` prepends a ``#`` line with the FLOP convention and input shape.
        """
        buf = io.StringIO()
        if comment:
            buf.write(f"# {self.convention}; input {'x'.join(map(str, self.input_shape))}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "flops"])
        for r in self.rows:
            w.writerow([r.layer, r.params, r.flops])
        w.writerow(["total", self.total_params, self.total_flops])
        return buf.getvalue()


def conv_params(c_in, c_out, kernel, bias=False):
    k = kernel[0] * kernel[1] * kernel[2]
    return c_in * c_out * k + (c_out if bias else 0)


def conv_flops(c_in, c_out, kernel, out_voxels, batch=1):
    return 2 * batch * out_voxels * c_out * c_in * kernel[0] * kernel[1] * kernel[2]


def _vol(sp):
    return sp[0] * sp[1] * sp[2]


def _down(sp, stride):
    # kernel k, padding k // 2: odd k gives ceil(n / s)
    return tuple(-(-n // s) for n, s in zip(sp, stride))


class _Walker:
    def __init__(self, batch):
        self.batch = batch
        self.rows = []

    def conv(self, name, c_in, c_out, kernel, sp_out, bias=False):
        self.rows.append(
            CostRow(name, conv_params(c_in, c_out, kernel, bias), conv_flops(c_in, c_out, kernel, _vol(sp_out), self.batch))
        )

    def conv_t(self, name, c_in, c_out, kernel, sp_in):
        self.rows.append(
            CostRow(name, conv_params(c_in, c_out, kernel), conv_flops(c_in, c_out, kernel, _vol(sp_in), self.batch))
        )

    def norm(self, name, c, sp):
        self.rows.append(CostRow(name, 2 * c, 2 * self.batch * c * _vol(sp)))

    def act(self, name, c, sp):
        self.rows.append(CostRow(name, 0, 2 * self.batch * c * _vol(sp)))

    def add(self, name, c, sp, n_terms=2):
        self.rows.append(CostRow(name, 0, (n_terms - 1) * self.batch * c * _vol(sp)))

    def shift(self, name):
        self.rows.append(CostRow(name, 0, 0))

    def block(self, name, c_in, c_out, sp, stride, cfg):
        shift = cfg.uses_shift
        sp_out = _down(sp, stride)
        if shift and cfg.shift_placement == "pre_conv":
            self.shift(f"{name}.shift")
        self.conv(f"{name}.conv1", c_in, c_out, cfg.kernel, sp_out)
        self.norm(f"{name}.norm1", c_out, sp_out)
        self.act(f"{name}.act1", c_out, sp_out)
        if shift and cfg.shift_placement == "between_convs":
            self.shift(f"{name}.shift")
        self.conv(f"{name}.conv2", c_out, c_out, cfg.kernel, sp_out)
        self.norm(f"{name}.norm2", c_out, sp_out)
        if c_in != c_out or tuple(stride) != (1, 1, 1):
            self.conv(f"{name}.proj", c_in, c_out, (1, 1, 1), sp_out)
            self.norm(f"{name}.proj_norm", c_out, sp_out)
        self.add(f"{name}.residual", c_out, sp_out)
        self.act(f"{name}.act2", c_out, sp_out)
        return sp_out


def cost_report(cfg, input_shape=None):
    """Per-layer params and FLOPs for ``cfg`` at ``input_shape``.

    ``input_shape`` is ``(C, D, D, D)`` or ``(B, C, D, D, D)``; defaults to one
    patch of ``cfg.patch_extent``.
    """
    cfg.validate()
    if input_shape is None:
        input_shape = (1, cfg.in_channels) + (cfg.patch_extent,) * 3
    input_shape = tuple(int(n) for n in input_shape)
    if len(input_shape) == 4:
        input_shape = (1,) + input_shape
    if len(input_shape) != 5 or input_shape[1] != cfg.in_channels:
        raise ValueError(f"input shape {input_shape} does not fit config ({cfg.in_channels} channels)")
    B = input_shape[0]
    sp = input_shape[2:]
    views = 3 if cfg.multiview else 1
    w = _Walker(B * views)
    widths = cfg.stage_widths

    sizes = []
    c_in = cfg.in_channels
    for i, width in enumerate(widths):
        stride = (1, 1, 1) if i == 0 else cfg.down_stride
        sp = w.block(f"encoder.{i}", c_in, width, sp, stride, cfg)
        sizes.append(sp)
        c_in = width
    for j, i in enumerate(reversed(range(len(widths) - 1))):
        w.conv_t(f"upsamplers.{j}", widths[i + 1], widths[i], cfg.down_stride, sp)
        sp = sizes[i]
        w.block(f"decoder.{j}", 2 * widths[i], widths[i], sp, (1, 1, 1), cfg)

    if cfg.multiview:
        w.batch = B
        w.add("head.fuse", widths[0], sp, n_terms=3)
    w.conv("head.conv1", widths[0], widths[0], (1, 1, 1), sp, bias=True)
    w.act("head.act", widths[0], sp)
    w.conv("head.conv2", widths[0], cfg.num_classes, (1, 1, 1), sp, bias=True)
    return CostReport(w.rows, input_shape)


def count_params(cfg):
    rep = cost_report(cfg)
    return rep.total_params, rep


def count_flops(cfg, input_shape=None):
    rep = cost_report(cfg, input_shape)
    return rep.total_flops, rep


def shift_cost(channels, fraction):
    """Params and FLOPs of a slice shift: always (0, 0), independent of its arguments."""
    return 0, 0


EFFICIENCY_HEADER = ("config", "variant", "params", "flops", "dsc")


def efficiency_table(cfgs, input_shape=None, names=None, dsc=None):
    """One row per config, in input order. ``dsc`` optionally maps name -> score."""
    rows = []
    for i, cfg in enumerate(cfgs):
        name = names[i] if names else cfg.variant
        rep = cost_report(cfg, input_shape)
        score = (dsc or {}).get(name)
        rows.append(
            {
                "config": name,
                "variant": cfg.variant,
                "params": rep.total_params,
                "flops": rep.total_flops,
                "dsc": "" if score is None else score,
            }
        )
    return rows


def efficiency_csv(rows, input_shape=None, comment=False):
    buf = io.StringIO()
    if comment:
        shape = "x".join(map(str, input_shape)) if input_shape else "default"
        buf.write(f"# {FLOP_CONVENTION}; input {shape}\n")
    w = csv.DictWriter(buf, fieldnames=EFFICIENCY_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
