import numpy as np
import pytest
import torch
from PIL import Image

from fmtrecon import io
from fmtrecon.ddpm import ShapeConfig, make_schedule, training_step
from fmtrecon.forward import Measurement, OpticalProps, SensorLayout, build_weight_matrix
from fmtrecon.geometry import GridSpec, Volume, case_phantom, rasterize_phantom
from fmtrecon.netmodel import NetConfig, OptState, init_params


def test_volume_round_trip_and_byte_stability(tmp_path):
    grid = GridSpec.enclosing(16, 12, 8)
    vol = Volume(grid, np.random.default_rng(0).uniform(size=grid.shape))
    path = io.write_volume(tmp_path / "a", vol, {"method": "art"})
    back = io.read_volume(path)
    assert back.grid == grid
    np.testing.assert_array_equal(back.data, vol.data.astype(np.float32))
    io.write_volume(tmp_path / "b", back, {"method": "art"})
    assert (tmp_path / "a.f32").read_bytes() == (tmp_path / "b.f32").read_bytes()
    assert io.read_volume_meta(path)["extra"] == {"method": "art"}


def test_volume_payload_is_little_endian_x_fastest(tmp_path):
    grid = GridSpec.enclosing(4, 4, 4)
    data = np.zeros(grid.shape)
    data[0, 0, 1] = 1.5
    io.write_volume(tmp_path / "v", Volume(grid, data))
    raw = np.frombuffer((tmp_path / "v.f32").read_bytes(), dtype="<f4")
    assert raw[1] == 1.5 and raw.sum() == 1.5


def test_truncated_payload_rejected(tmp_path):
    grid = GridSpec.enclosing(4, 4, 4)
    io.write_volume(tmp_path / "v", Volume.zeros(grid))
    (tmp_path / "v.f32").write_bytes(b"\0" * 12)
    with pytest.raises(ValueError):
        io.read_volume(tmp_path / "v.json")


def test_stack_and_measurement_round_trip(tmp_path):
    stack = np.random.default_rng(1).uniform(size=(4, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(io.read_stack(io.write_stack(tmp_path / "s", stack, "cond")), stack)
    meas = Measurement(np.arange(6, dtype=float), np.array([(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]),
                       {"model": "multiplicative_gaussian", "level": 0.01, "seed": 3})
    back = io.read_measurement(io.write_measurement(tmp_path / "m", meas))
    np.testing.assert_array_equal(back.values, meas.values)
    np.testing.assert_array_equal(back.pairs, meas.pairs)
    assert back.noise == meas.noise


def test_weight_matrix_round_trip(tmp_path):
    grid = GridSpec.enclosing(12, 12, 6)
    W = build_weight_matrix(grid, OpticalProps(), SensorLayout.ring(src_angles=2, src_heights=1,
                                                                     det_angles=4, det_heights=2))
    io.write_weight_matrix(tmp_path / "w.trip", W)
    back = io.read_weight_matrix(tmp_path / "w.trip")
    assert back.grid == grid and back.normalized
    assert (back.matrix != W.matrix).nnz == 0
    io.write_weight_matrix(tmp_path / "w2.trip", back)
    assert (tmp_path / "w.trip").read_bytes() == (tmp_path / "w2.trip").read_bytes()
    header = (tmp_path / "w.trip").read_bytes().split(b"\n", 1)[0]
    assert b"weight-triplets" in header


def tiny_model():
    cfg = NetConfig(6, 2, base_width=8, levels=2, blocks_per_level=1, time_embed_dim=16, norm_groups=4)
    return init_params(cfg, 0)


def test_checkpoint_round_trip(tmp_path):
    net = tiny_model()
    opt = OptState.for_params(net, lr=1e-3)
    s = make_schedule(20, 1e-3, 0.1)
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-1, 1, (3, 2, 8, 8)).astype(np.float32)
    cond = rng.uniform(0, 1, (3, 4, 8, 8)).astype(np.float32)
    training_step(net, opt, x0, cond, s, rng)
    io.save_checkpoint(tmp_path / "c.ckpt", net, opt, s, ShapeConfig(4, 2, 8), rng, {"step": 1})
    net2, opt2, s2, shape2, rng2, meta = io.load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"step": 1} and shape2 == ShapeConfig(4, 2, 8) and s2.to_dict() == s.to_dict()
    assert opt2.step == 1 and opt2.lr == 1e-3
    for (name, p), q in zip(net.named_parameters(), net2.parameters()):
        assert torch.equal(p, q), name
        assert torch.equal(opt.m[name], opt2.m[name]) and torch.equal(opt.v[name], opt2.v[name])
    assert rng.integers(1 << 62) == rng2.integers(1 << 62)
    io.save_checkpoint(tmp_path / "d.ckpt", net2, opt2, s2, shape2, rng2, meta)
    rng3 = io.load_checkpoint(tmp_path / "d.ckpt")[4]
    io.save_checkpoint(tmp_path / "e.ckpt", net2, opt2, s2, shape2, rng3, meta)
    assert (tmp_path / "d.ckpt").read_bytes() == (tmp_path / "e.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        io.load_checkpoint(tmp_path / "x")


def test_slice_pngs(tmp_path):
    grid = GridSpec.enclosing(16, 16, 8)
    vol = rasterize_phantom(case_phantom(0.2), grid)
    vol.data[vol.data > 0] = 2.0
    paths = io.write_slice_pngs(tmp_path / "png", vol)
    assert len(paths) == 8
    img = np.array(Image.open(paths[4]))
    assert img.dtype == np.uint8 and img.shape == (16, 16)
    assert set(np.unique(img)) == {0, 255}
    empty = io.write_slice_pngs(tmp_path / "zero", Volume.zeros(grid))
    assert not np.array(Image.open(empty[0])).any()
