import struct
from fractions import Fraction

import numpy as np
import pytest

from sshunet.errors import ArgumentError, CheckpointError, ConfigError
from sshunet.gradcheck import gradcheck
from sshunet.network import (
    CHECKPOINT_MAGIC,
    VARIANTS,
    UNetConfig,
    build,
    load_network,
    load_params,
    read_checkpoint,
    save_params,
)
from sshunet.tensor import Tensor, mul, tsum

TINY = dict(stage_widths=(4, 8), patch_extent=8)


def cfg(variant, **kw):
    return UNetConfig(variant=variant, **{**TINY, **kw})


def vol(D=8, B=1, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((B, 1, D, D, D)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_output_shape(variant):
    net = build(UNetConfig(variant=variant, stage_widths=(4, 8), patch_extent=16, num_classes=3))
    out = net(vol(16))
    assert out.shape == (1, 3, 16, 16, 16)


def test_encoder_extents_and_skips():
    net = build(cfg("shift2d", stage_widths=(2, 4, 8), patch_extent=8))
    x = vol()
    sizes = []
    for blk in net.encoder:
        x = blk(x)
        sizes.append(x.shape[2:])
    # planar variants keep S and halve H, W
    assert sizes == [(8, 8, 8), (8, 4, 4), (8, 2, 2)]
    net3 = build(cfg("full3d", stage_widths=(2, 4, 8), patch_extent=8))
    x = vol()
    sizes = []
    for blk in net3.encoder:
        x = blk(x)
        sizes.append(x.shape[2:])
    assert sizes == [(8, 8, 8), (4, 4, 4), (2, 2, 2)]


def test_forward_rejects_wrong_shape():
    net = build(cfg("plain2d"))
    with pytest.raises(ArgumentError):
        net(vol(16))
    with pytest.raises(ArgumentError):
        net(Tensor(np.zeros((1, 2, 8, 8, 8))))


def test_config_errors_list_every_violation():
    with pytest.raises(ConfigError) as exc:
        build(UNetConfig(variant="nope", stage_widths=(4, 8, 16), patch_extent=6, num_classes=1))
    v = exc.value.violations
    assert len(v) == 3
    assert any("plain2d" in m for m in v)


def test_fraction_out_of_range():
    with pytest.raises(ConfigError):
        build(cfg("shift2d", shift_fraction=Fraction(3, 4)))


def test_plain_and_shift_identical_params_and_weights():
    a, b = build(cfg("plain2d"), seed=3), build(cfg("shift2d"), seed=3)
    assert a.num_parameters() == b.num_parameters()
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_shift_and_multiview_equal_params():
    for widths in [(4, 8), (8, 16, 32), (3, 5, 7, 11)]:
        counts = {v: build(cfg(v, stage_widths=widths, patch_extent=8)).num_parameters() for v in VARIANTS}
        assert counts["plain2d"] == counts["shift2d"] == counts["shift2d_multiview"]
        assert counts["full3d"] > counts["plain2d"]


def test_full3d_conv_weights_three_times_planar():
    a, b = build(cfg("plain2d")), build(cfg("full3d"))
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        if name.endswith(("conv1.weight", "conv2.weight")) and "head" not in name:
            assert pb.size == 3 * pa.size


def test_deterministic_given_seed():
    x = vol()
    a = build(cfg("shift2d_multiview"), seed=11)(x).data
    b = build(cfg("shift2d_multiview"), seed=11)(x).data
    c = build(cfg("shift2d_multiview"), seed=12)(x).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_multiview_symmetric_input_gives_equal_views():
    net = build(cfg("shift2d_multiview", shift_fraction=0), seed=0)
    v = Tensor(np.full((1, 1, 8, 8, 8), 0.7))
    _, views = net.forward(v, return_views=True)
    xy, yz, xz = (views.view(n).data for n in ("xy", "yz", "xz"))
    assert np.array_equal(xy, yz) and np.array_equal(yz, xz)


def test_multiview_shared_weights_affect_every_view():
    net = build(cfg("shift2d_multiview"), seed=0)
    x = vol(seed=4)
    _, before = net.forward(x, return_views=True)
    net.encoder[0].conv1.weight.data *= 1.5
    _, after = net.forward(x, return_views=True)
    for name in ("xy", "yz", "xz"):
        assert not np.allclose(before.view(name).data, after.view(name).data)


def test_network_gradcheck_sampled_params():
    net = build(UNetConfig(variant="shift2d_multiview", stage_widths=(2, 4), patch_extent=4, num_classes=2), seed=0)
    x = vol(4, seed=1)
    probe = Tensor(np.random.default_rng(2).standard_normal((1, 2, 4, 4, 4)))
    params = net.parameters()
    n = sum(p.size for p in params)
    rep = gradcheck(lambda *ps: tsum(mul(net(x), probe)), params, sample=max(1, n // 100), h=1e-4)
    assert rep.max_rel_error < 1e-2, rep


def test_checkpoint_round_trip_bitwise(tmp_path):
    net = build(cfg("shift2d_multiview"), seed=5)
    path = tmp_path / "m.sshu"
    save_params(net, path)
    raw = path.read_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC and struct.unpack("<I", raw[4:8])[0] == 1
    other = build(cfg("shift2d_multiview"), seed=9)
    load_params(other, path)
    x = vol()
    assert np.array_equal(net(x).data, other(x).data)
    rebuilt = load_network(path)
    assert rebuilt.cfg == net.cfg
    assert np.array_equal(net(x).data, rebuilt(x).data)


def test_checkpoint_width_mismatch_names_tensor(tmp_path):
    path = tmp_path / "m.sshu"
    save_params(build(cfg("plain2d")), path)
    with pytest.raises(CheckpointError, match="encoder.0.conv1.weight"):
        load_params(build(cfg("plain2d", stage_widths=(6, 8))), path)


def test_checkpoint_bad_magic_version_truncation(tmp_path):
    path = tmp_path / "m.sshu"
    save_params(build(cfg("plain2d")), path)
    raw = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(bad)


def test_config_dict_round_trip():
    c = cfg("shift2d", shift_fraction="1/8")
    assert UNetConfig.from_dict(c.to_dict()) == c
    assert c.shift_fraction == Fraction(1, 8)
