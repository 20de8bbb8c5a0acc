import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from onda.model import (ArchSpec, CheckpointError, LayerSpec, SpecError, build, dscnn_mini, embed,
                        load_checkpoint, mac_count, param_count, preset, resnet_mini, save_checkpoint)

from oracles import count_oracle, randomize, random_spec, tiny_residual_spec, tiny_spec


def single_conv_spec(bias=True, hw=(4, 4)):
    return ArchSpec("DSCNNMini", (LayerSpec("conv", 1, (1, 1), bias=bias),
                                  LayerSpec("head", 2, prunable=False)), 2, (1,) + hw)


# ---------------------------------------------------------------- build and counts

def test_single_conv_param_count():
    # conv 1*1*1*1 + bias 1, head 2*1 + 2
    assert param_count(build(single_conv_spec(), 0)) == 1 + 1 + 2 * 1 + 2


def test_one_by_one_conv_cost_without_bias():
    spec = ArchSpec("DSCNNMini", (LayerSpec("conv", 1, (1, 1), bias=False),
                                  LayerSpec("head", 1, prunable=False)), 1, (1, 4, 4))
    # conv: 1 param, 16 MACs; head: 1 weight + 1 bias, 1 MAC
    assert param_count(spec) - 2 == 1
    assert mac_count(spec) - 1 == 16


def test_build_is_deterministic():
    a, b = build(resnet_mini(), 7), build(resnet_mini(), 7)
    assert np.array_equal(a.params.values, b.params.values)
    assert not np.array_equal(a.params.values, build(resnet_mini(), 8).params.values)


def test_presets_match_count_oracle():
    for spec, expected in ((resnet_mini(), 29280), (dscnn_mini(), 16704)):
        params, macs = count_oracle(spec)
        assert param_count(spec) == params == expected
        assert mac_count(spec) == macs


def test_preset_sizes_and_layer_counts():
    r = resnet_mini()
    assert sum(l.kind == "conv" for l in r.blocks) == 6
    d = dscnn_mini()
    assert sum(l.kind == "depthwise" for l in d.blocks) == 4
    with pytest.raises(SpecError):
        preset("VGG")


@given(st.integers(0, 2 ** 32 - 1))
def test_random_specs_count_consistency(seed):
    spec = random_spec(np.random.default_rng(seed))
    spec.validate()
    m = build(spec, seed)
    assert param_count(m) == len(m.params) == count_oracle(spec)[0]
    assert mac_count(m) == count_oracle(spec)[1]


def test_invalid_spec_lists_violations():
    spec = ArchSpec("ResNetMini", (
        LayerSpec("conv", 4, (3, 3), group_id="a"),
        LayerSpec("res_start"),
        LayerSpec("conv", 3, (3, 3), group_id="a"),
        LayerSpec("res_end"),
    ), 8, (1, 8, 8))
    with pytest.raises(SpecError) as e:
        build(spec)
    text = str(e.value)
    assert "head" in text and "group" in text


def test_residual_junction_requires_shared_group():
    spec = ArchSpec("ResNetMini", (
        LayerSpec("conv", 2, (3, 3)),
        LayerSpec("res_start"),
        LayerSpec("conv", 2, (3, 3)),
        LayerSpec("res_end"),
        LayerSpec("head", 2, prunable=False),
    ), 2, (1, 6, 6))
    assert any("group" in v for v in spec.violations())


def test_spec_round_trip_dict():
    spec = resnet_mini(width=8, embedding_dim=16)
    assert ArchSpec.from_dict(spec.to_dict()) == spec
    assert ArchSpec.from_dict(spec.to_dict()).digest() == spec.digest()


# ---------------------------------------------------------------- embed

def test_zero_weight_model_outputs_head_bias():
    m = build(tiny_spec(), 0)
    m.params.values[:] = 0
    head_bias = m.params.layout["L3.bias"]
    m.params.values[head_bias.offset:head_bias.offset + head_bias.size] = [1.0, -2.0, 3.0, 0.5]
    z = embed(m, np.random.default_rng(0).standard_normal((5, 1, 4, 4)))
    assert np.array_equal(z, np.tile([1.0, -2.0, 3.0, 0.5], (5, 1)))


def test_hand_set_two_layer_model_matches_straight_line():
    # 1x1 conv (w=2, b=-1) + ReLU on a 2x2 map, then global average and head (w=3, b=0.5)
    spec = ArchSpec("DSCNNMini", (LayerSpec("conv", 1, (1, 1), relu=True),
                                  LayerSpec("head", 1, prunable=False)), 1, (1, 2, 2))
    m = build(spec, 0)
    m.params.values[:] = [2.0, -1.0, 3.0, 0.5]
    x = np.array([[1.0, -1.0], [0.25, 2.0]])
    # relu(2x - 1) = [1, 0, 0, 3]; mean = 1; 3 * 1 + 0.5
    assert embed(m, x.reshape(1, 2, 2))[0] == 3.5


def test_batch_consistency_and_permutation_equivariance():
    rng = np.random.default_rng(1)
    m = randomize(build(tiny_residual_spec(), 1), rng)
    x = rng.standard_normal((6, 1, 5, 5))
    z = embed(m, x)
    for i in range(6):
        assert np.allclose(z[i], embed(m, x[i]), atol=1e-13)
    perm = rng.permutation(6)
    assert np.allclose(embed(m, x[perm]), z[perm], atol=1e-13)


def test_embed_shape_mismatch():
    from onda.autodiff import ShapeError
    with pytest.raises(ShapeError):
        embed(build(tiny_spec(), 0), np.zeros((2, 1, 5, 5)))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    m = randomize(build(tiny_residual_spec(), 2), rng)
    p = save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(p)
    assert back.spec == m.spec
    assert np.array_equal(back.params.values, m.params.values)
    for i in m.bn_stats:
        assert all(np.array_equal(a, b) for a, b in zip(back.bn_stats[i], m.bn_stats[i]))
    assert back.digest() == m.digest()


def test_checkpoint_float32_round_trip(tmp_path):
    m = build(tiny_spec(), 0, dtype=np.float32)
    back = load_checkpoint(save_checkpoint(m, tmp_path / "m.ckpt"))
    assert back.params.values.dtype == np.float32
    assert np.array_equal(back.params.values, m.params.values)


@pytest.mark.parametrize("damage", ["length", "truncate", "magic"])
def test_corrupt_checkpoint_raises(tmp_path, damage):
    p = save_checkpoint(build(tiny_spec(), 0), tmp_path / "m.ckpt")
    raw = bytearray(p.read_bytes())
    if damage == "length":
        raw[8:16] = struct.pack("<Q", 10 ** 9)
    elif damage == "truncate":
        raw = raw[:-5]
    else:
        raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
