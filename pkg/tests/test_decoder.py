import pytest
import torch

from oracles import finite_difference_error
from orsiseg.config import desk_config
from orsiseg.decoder import (
    CrossFusionAttention,
    Decoder,
    DecoderLevel,
    DenseASPP,
    JointAttention,
    ReduceAttend,
    StructuralEnhancement,
)
from orsiseg.encoder import scaled_dot_attention
from orsiseg.model import SegmentationModel, count_parameters
from orsiseg.runtime.initialize import init_weights


def test_daspp_shape():
    torch.manual_seed(0)
    head = DenseASPP(512, 128).eval()
    with torch.no_grad():
        assert head(torch.randn(1, 512, 11, 11)).shape == (1, 128, 11, 11)


def test_daspp_zero_input():
    head = init_weights(DenseASPP(16, 8), seed=0).eval()
    assert torch.count_nonzero(head(torch.zeros(1, 16, 11, 11))) == 0


def test_daspp_receptive_field_exceeds_3x3():
    torch.manual_seed(1)
    head = DenseASPP(4, 4, inter=8, growth=4).double().eval()
    x = torch.zeros(1, 4, 41, 41, dtype=torch.float64, requires_grad=True)
    out = head(x + 0.1)
    out[0, :, 20, 20].sum().backward()
    footprint = torch.nonzero(x.grad.abs().sum(1)[0])
    spread = (footprint - 20).abs().max().item()
    assert spread > 1
    assert spread >= 18  # largest dilation rate


def test_reduce_attend_shape_and_zero():
    torch.manual_seed(2)
    ra = ReduceAttend(320, 128).eval()
    with torch.no_grad():
        assert ra(torch.randn(1, 320, 22, 22)).shape == (1, 128, 22, 22)
    ra = init_weights(ReduceAttend(8, 4), seed=0).eval()
    assert torch.count_nonzero(ra(torch.zeros(1, 8, 6, 6))) == 0


def test_joint_attention_gates_never_amplify():
    torch.manual_seed(3)
    ja = JointAttention(16)
    x = torch.randn(2, 16, 9, 9) * 5
    channel = ja.channel(x)
    assert channel.min() > 0 and channel.max() < 1
    y = x * channel
    spatial = ja.spatial(y)
    assert spatial.min() > 0 and spatial.max() < 1
    assert torch.all(ja(x).abs() <= x.abs())


def test_acfa_shape_and_channel_check():
    torch.manual_seed(4)
    acfa = CrossFusionAttention(128, sr_ratio=1).eval()
    with torch.no_grad():
        out = acfa(torch.randn(1, 128, 11, 11), torch.randn(1, 128, 22, 22))
    assert out.shape == (1, 128, 22, 22)
    with pytest.raises(ValueError, match="channels"):
        acfa(torch.randn(1, 64, 11, 11), torch.randn(1, 128, 22, 22))


def test_acfa_shared_projection_symmetry():
    torch.manual_seed(5)
    acfa = CrossFusionAttention(8).double()
    acfa.qkv_low.load_state_dict(acfa.qkv_high.state_dict())
    x = torch.randn(1, 8, 6, 6, dtype=torch.float64)
    low_stream, high_stream = acfa.global_streams(x, x)
    assert torch.equal(low_stream, high_stream)
    q, k, v = acfa.qkv_high(x).chunk(3, dim=1)
    tok = [t.flatten(2).transpose(1, 2) for t in (q, k, v)]
    self_att, _ = scaled_dot_attention(*tok)
    self_att = self_att.transpose(1, 2).reshape(1, 8, 6, 6)
    assert torch.allclose(low_stream + high_stream, 2 * self_att)


def test_acfa_attention_rows_and_reduction():
    torch.manual_seed(6)
    acfa = CrossFusionAttention(8, sr_ratio=2)
    high, low = torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8)
    _, (a_low, a_high) = acfa.global_streams(high, low, return_attn=True)
    assert a_low.shape == (1, 1, 64, 16)
    for attn in (a_low, a_high):
        assert (attn.sum(-1) - 1).abs().max().item() < 1e-5


def test_gradient_acfa():
    torch.manual_seed(7)
    acfa = CrossFusionAttention(8).double()
    high = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
    low = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
    err = finite_difference_error(lambda: acfa(high, low), [high, low] + list(acfa.parameters()))
    assert err < 1e-3


def test_gradient_cross_attention_streams():
    torch.manual_seed(8)
    acfa = CrossFusionAttention(8).double()
    high = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
    low = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)

    def streams():
        a, b = acfa.global_streams(high, low)
        return torch.stack([a, b])

    params = list(acfa.qkv_high.parameters()) + list(acfa.qkv_low.parameters())
    assert finite_difference_error(streams, [high, low] + params) < 1e-3


def test_sem_zero_preactivation_gives_two():
    sem = StructuralEnhancement(4)
    with torch.no_grad():
        for conv in sem.atrous:
            conv.weight.zero_()
            conv.bias.zero_()
    _, att, terms = sem(torch.randn(1, 4, 7, 7), return_attn=True)
    assert torch.equal(att, torch.full_like(att, 2.0))
    assert all(torch.equal(t, torch.full_like(t, 0.5)) for t in terms)


def test_sem_attention_ranges():
    torch.manual_seed(9)
    sem = StructuralEnhancement(8)
    out, att, terms = sem(torch.randn(2, 8, 9, 9) * 3, return_attn=True)
    assert att.shape == (2, 1, 9, 9)
    for t in terms:
        assert t.min() > 0 and t.max() < 1
    assert att.min() > 0 and att.max() < 4
    assert out.shape == (2, 8, 9, 9)


@pytest.mark.parametrize("k, dilation", [(1, 1), (2, 3), (3, 5), (4, 7)])
def test_sem_dilation_footprint(k, dilation):
    torch.manual_seed(10)
    sem = StructuralEnhancement(2).double()
    conv = sem.atrous[k - 1]
    assert conv.dilation == (dilation, dilation) == (2 * k - 1, 2 * k - 1)
    x = torch.zeros(1, 2, 31, 31, dtype=torch.float64)
    x[0, :, 15, 15] = 1.0
    conv.bias.data.zero_()
    resp = conv(x)[0, 0]
    nz = torch.nonzero(resp)
    assert (nz - 15).abs().max().item() == dilation
    assert len(nz) <= (2 * dilation + 1) ** 2


def test_decoder_level_shapes():
    torch.manual_seed(11)
    level = DecoderLevel(512, 128, sr_ratio=1).eval()
    with torch.no_grad():
        out = level(torch.randn(1, 128, 11, 11), torch.randn(1, 512, 11, 11))
    assert out.shape == (1, 128, 11, 11)


def test_decoder_level_zero_init_residual():
    level = init_weights(DecoderLevel(16, 8, sr_ratio=2), seed=0).eval()
    w_prev, f = torch.randn(1, 8, 4, 4), torch.randn(1, 16, 8, 8)
    out, parts = level(w_prev, f, return_parts=True)
    assert torch.equal(out, parts["reduced"])


def test_decoder_state_channels_and_sizes():
    torch.manual_seed(12)
    cfg = desk_config()
    model = SegmentationModel(cfg).eval()
    with torch.no_grad():
        _, pyr, state = model(torch.randn(1, 3, 96, 96), return_state=True)
    d = cfg.decoder_channels
    for level in range(1, 5):
        assert state.fused[level].shape[1] == d
        assert state.reduced[level].shape[1] == d
        assert state.fused[level].shape[-2:] == pyr[level - 1].shape[-2:]
    assert state.semantic_top.shape == (1, d, 3, 3)
    assert state.fused[5] is state.semantic_top
    sizes = [state.fused[i].shape[-1] for i in (4, 3, 2, 1)]
    assert all(b == 2 * a for a, b in zip(sizes, sizes[1:]))


def test_every_intermediate_has_decoder_width():
    torch.manual_seed(13)
    cfg = desk_config()
    model = SegmentationModel(cfg).eval()
    seen = []

    def hook(mod, inp, out):
        out = out[0] if isinstance(out, tuple) else out
        seen.append((type(mod).__name__, out.shape[1]))

    for mod in model.decoder.modules():
        if isinstance(mod, (CrossFusionAttention, StructuralEnhancement, DecoderLevel, ReduceAttend, DenseASPP)):
            mod.register_forward_hook(hook)
    with torch.no_grad():
        model(torch.randn(1, 3, 64, 64))
    assert len(seen) == 4 * 4 + 2
    assert all(c == cfg.decoder_channels for _, c in seen)


@pytest.mark.parametrize("size", [96, 352])
def test_five_full_resolution_maps(paper_model, size):
    with torch.no_grad():
        preds = paper_model(torch.randn(1, 3, size, size))
    assert len(preds) == 5
    assert all(tuple(p.shape) == (1, 1, size, size) for p in preds)


def test_level_one_resolution_at_352(paper_model):
    with torch.no_grad():
        _, _, state = paper_model(torch.randn(1, 3, 352, 352), return_state=True)
    assert tuple(state.fused[1].shape) == (1, 128, 88, 88)


def test_full_model_parameter_budget(paper_model):
    n = count_parameters(paper_model)
    assert abs(n - 44.20e6) / 44.20e6 <= 0.15


def test_decoder_module_standalone():
    dec = Decoder(desk_config())
    assert len(dec.levels) == 4
