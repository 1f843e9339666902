import numpy as np
import pytest
import torch

from stldm.networks import (GSTABlock, LinearSpatialAttention, ModelDims, SpatialAttention,
                            TemporalAttention, Translator, feature_map, init_params,
                            linear_attention, patchify, reparameterize, softmax_attention,
                            unpatchify)
from stldm.io import group_bytes


def _rel(a, b):
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-300))


@pytest.mark.parametrize("p", [1, 2, 4])
def test_linear_attention_orders_agree(p):
    g = torch.Generator().manual_seed(p)
    worst = 0.0
    for _ in range(100):
        x = [patchify(torch.randn(2, 6, 8, 8, generator=g, dtype=torch.float64), p) for _ in range(3)]
        worst = max(worst, _rel(linear_attention(*x, order="linear"),
                                linear_attention(*x, order="standard")))
    assert worst <= 1e-5


def test_linear_attention_matches_loop_oracle():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(5, 3, generator=g, dtype=torch.float64) for _ in range(3))
    out = linear_attention(q, k, v)
    fq, fk, fv = (torch.nn.functional.elu(a) + 1 for a in (q, k, v))
    for i in range(5):
        w = [float(fq[i] @ fk[j]) for j in range(5)]
        expect = sum(w[j] * fv[j] for j in range(5)) / sum(w)
        assert torch.allclose(out[i], expect, rtol=1e-12)


def test_feature_map_positive():
    x = torch.linspace(-20, 20, 1001, dtype=torch.float64)
    assert bool((feature_map(x) > 0).all())


def test_linear_attention_bad_order():
    x = torch.ones(1, 2, 2)
    with pytest.raises(ValueError):
        linear_attention(x, x, x, order="sideways")


def test_softmax_attention_rows_are_convex_combinations():
    q, k = torch.randn(4, 3), torch.randn(6, 3)
    v = torch.eye(6)
    w = softmax_attention(q, k, v)
    assert torch.allclose(w.sum(-1), torch.ones(4)) and bool((w >= 0).all())


@pytest.mark.parametrize("p", [1, 2, 4])
def test_patchify_round_trip(p):
    x = torch.randn(2, 3, 8, 8)
    pt = patchify(x, p)
    assert pt.shape == (2, 64 // (p * p), p * p, 3)
    assert torch.equal(unpatchify(pt, p, 8, 8), x)
    with pytest.raises(ValueError):
        patchify(torch.randn(1, 1, 6, 6), 4)


def test_linear_spatial_attention_is_patch_local():
    torch.manual_seed(0)
    m = LinearSpatialAttention(8, 4).double()
    m.norm = torch.nn.Identity()                 # normalisation couples a whole frame
    x = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
    y = x.clone()
    y[0, 0, :, 0, 0] += 1.0                      # inside the top-left 4x4 patch of frame 0
    with torch.no_grad():
        d = (m(x) - m(y)).abs().sum(dim=2)[0]
    assert float(d[0, :4, :4].sum()) > 0
    assert float(d[0, 4:, :].sum()) == 0 and float(d[0, :, 4:].sum()) == 0
    assert float(d[1].sum()) == 0               # other frames untouched


def test_spatial_attention_mixes_within_frames_only():
    torch.manual_seed(0)
    m = SpatialAttention(8).double()
    x = torch.randn(1, 3, 8, 4, 4, dtype=torch.float64)
    y = x.clone()
    y[0, 1, :, 0, 0] += 1.0
    with torch.no_grad():
        d = (m(x) - m(y)).abs().sum(dim=(2,))[0]
    assert float(d[1, 3, 3]) > 0
    assert float(d[0].sum()) == 0 and float(d[2].sum()) == 0


def test_temporal_attention_mixes_across_frames_at_one_pixel():
    torch.manual_seed(0)
    m = TemporalAttention(8).double()
    m.norm = torch.nn.Identity()
    x = torch.randn(1, 3, 8, 4, 4, dtype=torch.float64)
    y = x.clone()
    y[0, 0, :, 2, 1] += 1.0
    with torch.no_grad():
        d = (m(x) - m(y)).abs().sum(dim=2)[0]
    assert float(d[2, 2, 1]) > 0                 # a later frame at the same pixel reacts
    d[:, 2, 1] = 0
    assert float(d.sum()) == 0


def test_gsta_block_keeps_shape_and_gate_is_bounded_by_value():
    blk = GSTABlock(8)
    x = torch.randn(2, 8, 8, 8)
    assert blk(x).shape == x.shape
    g, v = blk.pw(blk.dw_dilated(blk.dw(blk.norm(x)))).chunk(2, dim=1)
    gate = blk.gate(x)
    assert torch.allclose(gate, torch.sigmoid(g) * v)
    assert bool((gate.abs() <= v.abs() + 1e-6).all())


def test_translator_shapes_and_frame_check():
    d = ModelDims(M=3, N=5, H=16, W=16, Cz=4, depth=1, patch0=2, channel_mult=(1,),
                  translator_channels=8, translator_blocks=2)
    tr = Translator(d)
    mu, lv = tr(torch.randn(2, 3, 4, 4, 4))
    assert mu.shape == lv.shape == (2, 5, 4, 4, 4)
    with pytest.raises(ValueError):
        tr(torch.randn(2, 4, 4, 4, 4))


def test_model_shapes(micro_dims):
    m = init_params(micro_dims, seed=0)
    d = micro_dims
    x = torch.randn(3, d.M + d.N, 1, d.H, d.W)
    mu, lv = m.encode(x)
    assert mu.shape == lv.shape == (3, d.M + d.N, d.Cz, d.hz, d.wz)
    assert m.decode(mu).shape == x.shape
    zbar, _ = m.translate(mu[:, :d.M])
    assert zbar.shape == (3, d.N, d.Cz, d.hz, d.wz)
    assert m.denoise_eps(zbar, 5, zbar).shape == zbar.shape


def test_encoder_rejects_bad_frame_size(micro_dims):
    m = init_params(micro_dims)
    with pytest.raises(ValueError):
        m.encode(torch.randn(1, 2, 1, 10, 10))


def test_logvar_is_clamped(micro_dims):
    m = init_params(micro_dims)
    with torch.no_grad():
        m.encoder.logvar.bias.fill_(1e4)
    _, lv = m.encode(torch.randn(1, 2, 1, 8, 8))
    assert float(lv.detach().max()) == 20.0


def test_null_condition_equals_zeros_bitwise(micro_dims):
    m = init_params(micro_dims)
    z = torch.randn(2, micro_dims.N, micro_dims.Cz, 2, 2)
    assert torch.equal(m.denoise_eps(z, 7), m.denoise_eps(z, 7, torch.zeros_like(z)))


def test_denoiser_depends_on_timestep_and_condition(micro_dims):
    m = init_params(micro_dims, seed=3)
    z = torch.randn(2, micro_dims.N, micro_dims.Cz, 2, 2)
    c = torch.randn_like(z)
    base = m.denoise_eps(z, 10, c)
    assert not torch.equal(base, m.denoise_eps(z, 11, c))
    assert not torch.equal(base, m.denoise_eps(z, 10, c + 1))


def test_denoiser_output_preconditioning(micro_dims):
    m = init_params(micro_dims, seed=1, dtype=torch.float64)
    z = torch.randn(2, micro_dims.N, micro_dims.Cz, 2, 2, dtype=torch.float64)
    t = torch.tensor([1, 1000])
    raw = m.denoiser(z, t, None)
    ab = m.schedule.alpha_bars[t - 1].reshape(2, 1, 1, 1, 1)
    assert torch.allclose(m.denoise_eps(z, t), ab.sqrt() * raw + (1 - ab).sqrt() * z, atol=1e-14)
    # at the end of the chain pure noise is returned almost unchanged
    assert float((m.denoise_eps(z, 1000) - z).abs().max().detach()) < 0.05


def test_denoiser_rejects_out_of_range_timestep(micro_dims):
    m = init_params(micro_dims)
    z = torch.randn(1, micro_dims.N, micro_dims.Cz, 2, 2)
    with pytest.raises(ValueError):
        m.denoise_eps(z, 0)
    with pytest.raises(ValueError):
        m.denoise_eps(z, 1001)


def test_spatial_only_variant_has_no_temporal_attention():
    kw = dict(M=2, N=2, H=16, W=16, Cz=4, base_channels=8, depth=1, patch0=2, channel_mult=(1,))
    full = init_params(ModelDims(**kw))
    spatial = init_params(ModelDims(**kw, temporal_attention=False))
    count = lambda m: sum(isinstance(x, TemporalAttention) for x in m.modules())
    assert count(full) > 0 and count(spatial) == 0
    z = torch.randn(1, 2, 4, 4, 4)
    assert spatial.denoise_eps(z, 3).shape == z.shape


def test_init_is_deterministic(micro_dims):
    a, b, c = init_params(micro_dims, 5), init_params(micro_dims, 5), init_params(micro_dims, 6)
    assert group_bytes(a) == group_bytes(b)
    assert group_bytes(a)["denoiser"] != group_bytes(c)["denoiser"]


def test_init_does_not_disturb_global_rng(micro_dims):
    torch.manual_seed(0)
    expect = torch.rand(3)
    torch.manual_seed(0)
    init_params(micro_dims, 9)
    assert torch.equal(torch.rand(3), expect)


def test_groups_partition_parameters(micro_dims):
    m = init_params(micro_dims)
    ids = [id(p) for ps in m.groups().values() for p in ps]
    assert len(ids) == len(set(ids)) == len(list(m.parameters()))


def test_reparameterize():
    mu, lv, n = torch.tensor([1.0]), torch.tensor([np.log(4.0)]), torch.tensor([0.5])
    assert float(reparameterize(mu, lv, n)) == pytest.approx(2.0)


@pytest.mark.parametrize("bad", [dict(H=30), dict(depth=2, channel_mult=(1,)),
                                 dict(patch0=3), dict(Cz=0)])
def test_dims_validation(bad):
    with pytest.raises(ValueError):
        ModelDims(**bad)
