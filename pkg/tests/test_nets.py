import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from menseg.errors import ConfigError, IndivisibleShape, NonFiniteActivation, ShapeMismatch
from menseg.nets import (
    AttentionGate,
    AttentionGateSpec,
    DDUNet,
    NetworkSpec,
    ResidualBlock,
    ResidualBlockSpec,
    SqueezeExcite,
    SqueezeExciteSpec,
    attention_gate,
    build_attention_resunet,
    build_ddunet,
    build_network,
    build_segresnet,
    ddunet_spec,
    format_manifest,
    forward,
    parameter_count,
    parameter_manifest,
    segresnet_spec,
    squeeze_excite,
)
from menseg.nets.blocks import norm_groups


def _zero_(module):
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def _conv_widths(net, prefix):
    """Output channels of every ResidualBlock under ``prefix``, in order."""
    return [m.spec.channels for name, m in net.named_modules()
            if isinstance(m, ResidualBlock) and name.startswith(prefix)]


# ---------------------------------------------------------------------------
# Specs and structure
# ---------------------------------------------------------------------------

def test_segresnet_widths_and_blocks():
    net = build_segresnet()
    assert net.spec.widths == (16, 32, 64, 128)
    assert [len(e) for e in net.encoder] == [1, 2, 2, 4]
    assert [len(d) for d in net.decoder] == [1, 1, 1]
    assert net.spec.skip_fusion == "sum" and not net.spec.gated_skips
    assert _conv_widths(net, "encoder") == [16, 32, 32, 64, 64, 128, 128, 128, 128]


def test_attn_resunet_matches_segresnet_counts():
    net = build_attention_resunet()
    assert net.spec.encoder_blocks == (1, 2, 2, 4) and net.spec.decoder_blocks == ((1, 1, 1),)
    assert net.spec.dropout_p == 0.2 and net.spec.init_filters == 16
    assert all(isinstance(g, AttentionGate) for g in net.gates)
    assert len(net.reduce) == 3


def test_ddunet_widths_and_decoders():
    net = build_ddunet()
    assert net.spec.widths == (16, 32, 64, 128, 256)
    assert [m.spec.channels for m in net.encoder.modules() if isinstance(m, ResidualBlock)] == \
        [16, 32, 64, 128, 256]
    assert len(net.decoders) == 2
    convs = [[b.spec.n_convs for b in d.blocks] for d in net.decoders]
    assert convs == [[4, 4, 3, 2], [3, 3, 2, 2]]
    # independent gates: distinct parameter tensors per decoder
    g0 = {id(p) for p in net.decoders[0].gates.parameters()}
    g1 = {id(p) for p in net.decoders[1].gates.parameters()}
    assert g0.isdisjoint(g1)
    assert all(b.se is not None for b in net.modules() if isinstance(b, ResidualBlock))
    assert net.fuse.in_channels == 8 and net.fuse.out_channels == 4


def test_parameter_count_ordering():
    counts = [parameter_count(f()) for f in (build_segresnet, build_attention_resunet, build_ddunet)]
    assert counts[0] < counts[1] < counts[2]


def test_parameter_count_grows_with_filters():
    assert parameter_count(build_segresnet(16)) > parameter_count(build_segresnet(8))
    assert parameter_count(build_ddunet(init_filters=16)) > parameter_count(build_ddunet(init_filters=8))


def test_manifest_sums_to_count():
    for net in (build_segresnet(), build_ddunet()):
        manifest = parameter_manifest(net)
        assert sum(n for _, _, n in manifest) == parameter_count(net)
        assert all(n == math.prod(shape) for _, shape, n in manifest)
        assert format_manifest(net).splitlines()[-1].split()[-1] == str(parameter_count(net))


def test_ungated_ablation_drops_only_gate_parameters():
    gated = {n for n, _, _ in parameter_manifest(build_attention_resunet())}
    plain = {n for n, _, _ in parameter_manifest(build_attention_resunet(gated_skips=False))}
    assert plain < gated
    assert all(n.startswith("gates.") for n in gated - plain)


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec("unet")
    with pytest.raises(ConfigError):
        NetworkSpec("segresnet", decoder_blocks=((1, 1),))
    with pytest.raises(ConfigError):
        NetworkSpec.from_dict({**segresnet_spec().to_dict(), "extra": 1})
    with pytest.raises(ValueError):
        ResidualBlockSpec(8, n_convs=5)
    with pytest.raises(ValueError):
        ResidualBlockSpec(8, norm_groups=3)
    with pytest.raises(ValueError):
        SqueezeExciteSpec(2, reduction=4)


def test_spec_json_round_trip():
    spec = ddunet_spec(0.1, 8)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    assert spec.hash() != ddunet_spec(0.1, 16).hash()


def test_norm_groups_largest_divisor():
    assert [norm_groups(c) for c in (1, 4, 6, 8, 12, 16, 256)] == [1, 4, 6, 8, 6, 8, 8]


# ---------------------------------------------------------------------------
# Forward contracts
# ---------------------------------------------------------------------------

def test_tiny_segresnet_shape():
    net = build_segresnet(init_filters=1).eval()
    with torch.no_grad():
        assert forward(net, torch.randn(4, 16, 16, 16)).shape == (4, 16, 16, 16)


@pytest.mark.parametrize("builder", [build_attention_resunet, build_ddunet])
def test_shape_contract_32(builder):
    net = builder().eval()
    with torch.no_grad():
        out = forward(net, torch.randn(4, 32, 32, 32))
    assert out.shape == (4, 32, 32, 32) and torch.isfinite(out).all()


@pytest.mark.slow
def test_segresnet_full_crop_shape():
    net = build_segresnet().eval()
    with torch.no_grad():
        out = forward(net, torch.randn(4, 160, 160, 128))
    assert out.shape == (4, 160, 160, 128)


def test_indivisible_shape():
    with pytest.raises(IndivisibleShape):
        forward(build_segresnet(4), torch.randn(4, 12, 16, 16))
    with pytest.raises(IndivisibleShape):
        forward(build_ddunet(init_filters=4), torch.randn(4, 24, 32, 32))
    with pytest.raises(IndivisibleShape):
        forward(build_segresnet(4), torch.randn(3, 16, 16, 16))


def test_nonfinite_activation_names_layer():
    net = build_segresnet(4).eval()
    with torch.no_grad():
        net.encoder[1][0].body[0].weight[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteActivation) as info:
        with torch.no_grad():
            forward(net, torch.randn(4, 16, 16, 16))
    assert "encoder.1.0.body.0" in str(info.value)


def test_nonfinite_input():
    x = torch.randn(4, 16, 16, 16)
    x[0, 0, 0, 0] = float("inf")
    with pytest.raises(NonFiniteActivation):
        forward(build_segresnet(4), x)


def test_same_seed_same_parameters():
    a, b = build_ddunet(init_filters=4, seed=3), build_ddunet(init_filters=4, seed=3)
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    c = build_ddunet(init_filters=4, seed=4)
    assert not torch.equal(a.stem[0].weight, c.stem[0].weight)


def test_build_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_segresnet(4, seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_eval_deterministic_and_sensitive():
    net = build_ddunet(init_filters=4).eval()
    x = torch.randn(4, 16, 16, 16)
    with torch.no_grad():
        a, b = forward(net, x), forward(net, x)
        x2 = x.clone()
        x2[1, 5, 6, 7] += 1e-3
        c = forward(net, x2)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_train_mode_dropout3d_zeroes_maps():
    drop = nn.Dropout3d(0.5).train()
    torch.manual_seed(0)
    out = drop(torch.ones(1, 64, 2, 2, 2))
    per_map = out.flatten(2)
    assert ((per_map == 0).all(-1) | (per_map == 2).all(-1)).all()
    net = build_ddunet(init_filters=4)
    x = torch.randn(1, 4, 16, 16, 16)
    net.train()
    assert not torch.equal(net(x), net(x))


def test_groupnorm_batch_independence():
    net = build_ddunet(init_filters=4).eval().double()
    x = torch.randn(3, 4, 16, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        single = net(x[1:2])
        batched = net(x)
        # different neighbours at a fixed batch size: bit-identical
        y = x.clone()
        y[0].normal_()
        y[2].normal_()
        other = net(y)
    torch.testing.assert_close(batched[1:2], single, rtol=0, atol=1e-10)
    assert torch.equal(other[1], batched[1])


def test_state_dict_rebuild_bit_exact():
    net = build_attention_resunet(init_filters=4, seed=1).eval()
    clone = build_network(net.spec, seed=99).eval()
    clone.load_state_dict(net.state_dict())
    x = torch.randn(4, 16, 16, 16)
    with torch.no_grad():
        assert torch.equal(forward(net, x), forward(clone, x))


def test_init_bounds():
    net = build_segresnet(8, seed=0)
    conv = net.encoder[0][0].body[0]
    fan_in = conv.weight[0].numel()
    assert conv.weight.abs().max() <= math.sqrt(6.0 / fan_in)
    assert conv.bias.abs().max() <= 1.0 / math.sqrt(fan_in)
    gn = net.encoder[0][0].body[1]
    assert torch.equal(gn.weight, torch.ones_like(gn.weight))
    assert torch.equal(gn.bias, torch.zeros_like(gn.bias))


# ---------------------------------------------------------------------------
# Attention gate and squeeze-excitation
# ---------------------------------------------------------------------------

def test_gate_scalar_closed_form():
    gate = AttentionGate(AttentionGateSpec(1, 1, inter_channels=1))
    with torch.no_grad():
        for conv in (gate.wx, gate.wg, gate.psi):
            conv.weight.fill_(1.0)
            conv.bias.zero_()
    out = attention_gate(torch.ones(1, 1, 1, 1), torch.ones(1, 1, 1, 1), gate)
    expected = 1.0 / (1.0 + math.exp(-2.0))
    assert abs(out.item() - expected) < 1e-6
    assert abs(expected - 0.8808) < 1e-4


def test_gate_zero_weights_halves():
    gate = _zero_(AttentionGate(AttentionGateSpec(6, 3)))
    x, g = torch.randn(6, 4, 5, 3), torch.randn(3, 4, 5, 3)
    assert torch.equal(attention_gate(x, g, gate), x / 2)


def test_gate_shape_mismatch():
    gate = AttentionGate(AttentionGateSpec(2, 2))
    with pytest.raises(ShapeMismatch):
        attention_gate(torch.randn(2, 4, 4, 4), torch.randn(2, 4, 4, 2), gate)


def test_gate_output_bounded_by_input():
    torch.manual_seed(0)
    gate = AttentionGate(AttentionGateSpec(4, 4))
    x, g = torch.randn(4, 6, 6, 6), torch.randn(4, 6, 6, 6)
    assert (attention_gate(x, g, gate).abs() <= x.abs()).all()


def test_gate_inter_channels_default():
    assert AttentionGateSpec(16, 16).inter_channels == 8
    assert AttentionGateSpec(1, 1).inter_channels == 1


def test_gate_permutation_equivariance():
    torch.manual_seed(1)
    gate = AttentionGate(AttentionGateSpec(3, 3)).double()
    with torch.no_grad():
        gate.wg.weight.copy_(gate.wx.weight)
        gate.wg.bias.copy_(gate.wx.bias)
    x = torch.randn(3, 4, 5, 6, dtype=torch.float64)
    perm = torch.randperm(4 * 5 * 6)
    xp = x.reshape(3, -1)[:, perm].reshape(3, 4, 5, 6)
    out = attention_gate(x, x, gate).reshape(3, -1)[:, perm].reshape(3, 4, 5, 6)
    torch.testing.assert_close(attention_gate(xp, xp, gate), out, rtol=0, atol=1e-12)


def test_se_zero_weights_halves():
    se = _zero_(SqueezeExcite(SqueezeExciteSpec(8)))
    x = torch.randn(8, 3, 4, 5)
    assert torch.equal(squeeze_excite(x, se), x / 2)


def test_se_pooled_linearity():
    torch.manual_seed(2)
    se = SqueezeExcite(SqueezeExciteSpec(8)).double()
    x = torch.randn(1, 8, 3, 3, 3, dtype=torch.float64)
    a = 3.7
    # fc1 pre-activation minus bias is linear in the pooled input
    pre = lambda v: se.fc1(v.mean(dim=(2, 3, 4))) - se.fc1.bias
    torch.testing.assert_close(pre(a * x), a * pre(x), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("shape", [(4, 1, 1, 1), (8, 3, 5, 2), (12, 6, 6, 6)])
def test_se_shape_preserved(shape):
    se = SqueezeExcite(SqueezeExciteSpec(shape[0]))
    assert squeeze_excite(torch.randn(*shape), se).shape == shape


def test_se_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        squeeze_excite(torch.randn(5, 2, 2, 2), SqueezeExcite(SqueezeExciteSpec(8)))


def test_residual_block_projection_shortcut():
    assert isinstance(ResidualBlock(4, 4).shortcut, nn.Identity)
    assert isinstance(ResidualBlock(4, 8).shortcut, nn.Conv3d)
    blk = ResidualBlock(4, 8, n_convs=3, se=True)
    assert len([m for m in blk.body if isinstance(m, nn.Conv3d)]) == 3
    assert blk(torch.randn(1, 4, 4, 4, 4)).shape == (1, 8, 4, 4, 4)


def test_aux_heads_exposed():
    spec = NetworkSpec(**{**ddunet_spec(0.0, 4).to_dict(), "aux_heads": True})
    net = build_network(spec).eval()
    with torch.no_grad():
        net(torch.randn(1, 4, 16, 16, 16))
    assert isinstance(net, DDUNet) and len(net.aux_outputs) == 2
