import dataclasses

import numpy as np
import pytest

from omniepi import budget
from omniepi.autodiff import Tensor, count_flops, grad_check, no_grad, precision
from omniepi.errors import CheckpointError, ConfigError, ContractError, ShapeError
from omniepi.imaging import bicubic_resize
from omniepi.model import (PRESETS, build_model, pixel_shuffle, preset, super_resolve_rgb,
                           zero_residual_paths)


def nano(**kw):
    return preset("nano", **kw)


def randomize(model, rng, scale=0.3):
    for p in model.parameters():
        p.data = rng.standard_normal(p.shape) * scale


# -- configuration --------------------------------------------------------------------

def test_preset_defaults():
    g, t = PRESETS["gtf"], PRESETS["gtf_tiny"]
    assert (g.channels, g.blocks, g.heads, g.ffn_ratio) == (128, 8, 8, 4)
    assert g.use_macpi_prior and g.share_hv and not g.mla_taps and not g.use_angular_embed
    assert (t.channels, t.blocks, t.heads, t.ffn_ratio) == (32, 6, 4, 2)
    assert not t.use_macpi_prior and not t.share_hv and t.mla_taps == (1, 3, 5) and t.use_angular_embed
    assert t.scale == g.scale == 4 and t.U == t.V == 5


@pytest.mark.parametrize("bad", [dict(scale=0), dict(variant="big"), dict(mla_taps=(7,)),
                                 dict(U=3, V=2), dict(fusion_kernel=(2, 3, 3)), dict(channels=30)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        preset("gtf_tiny", **bad)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("huge")


def test_parameter_names_unique_and_hierarchical():
    m = build_model(nano())
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert "blocks.0.branch_h.attn.q.weight" in names
    assert all(p.name == n for n, p in m.named_parameters())


# -- pixel shuffle -----------------------------------------------------------------------

def test_pixel_shuffle_matches_enumeration():
    a, C, A, H, W = 2, 3, 2, 2, 2
    x = np.arange(1 * C * a * a * A * H * W, dtype=np.float64).reshape(1, C * a * a, A, H, W)
    out = pixel_shuffle(Tensor(x), a).data
    expect = np.empty((1, C, A, H * a, W * a))
    for c, i, j, n, h, w in np.ndindex(C, a, a, A, H, W):
        expect[0, c, n, h * a + i, w * a + j] = x[0, c * a * a + i * a + j, n, h, w]
    np.testing.assert_array_equal(out, expect)


def test_pixel_shuffle_single_channel_layout():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 1, 2, 2)
    out = pixel_shuffle(Tensor(x), 2).data[0, 0, 0]
    np.testing.assert_array_equal(out[:2, :2], [[0, 4], [8, 12]])


def test_pixel_shuffle_channel_check():
    with pytest.raises(ShapeError):
        pixel_shuffle(Tensor(np.zeros((1, 6, 1, 2, 2))), 2)


# -- stages ------------------------------------------------------------------------------

def test_shallow_features_of_zero_input_are_zero():
    m = build_model(nano())
    out = m.shallow_features(Tensor(np.zeros((1, 1, 9, 4, 4)))).data
    assert out.shape == (1, 8, 9, 4, 4) and np.all(out == 0)


def test_shallow_impulse_support(rng):
    m = build_model(nano())
    randomize(m, rng)
    m.shallow.bias.data[:] = 0
    x = np.zeros((1, 1, 9, 6, 6))
    x[0, 0, 4, 3, 2] = 1.0
    out = m.shallow_features(Tensor(x)).data
    nz = np.argwhere(np.abs(out[0]).sum(0) > 0)
    assert nz.min(0).tolist() == [3, 2, 1] and nz.max(0).tolist() == [5, 4, 3]


def test_input_shape_check():
    m = build_model(nano())
    with pytest.raises(ShapeError):
        m.forward_y(Tensor(np.zeros((1, 1, 8, 4, 4))))


def test_macpi_prior_only_when_enabled():
    with pytest.raises(ContractError):
        build_model(nano()).macpi_prior(Tensor(np.zeros((1, 1, 9, 4, 4))))


def test_macpi_prior_constant_input(rng):
    cfg = nano(variant="gtf", mla_taps=(), use_macpi_prior=True, use_angular_embed=False)
    m = build_model(cfg)
    randomize(m, rng)
    # interior sites see all nine taps, so the response is sum(w) * c + bias
    out = m.macpi_prior(Tensor(np.full((1, 1, 9, 5, 5), 0.7))).data
    w = m.prior.weight.data
    expect = w.sum(axis=(1, 2, 3)) * 0.7 + m.prior.bias.data
    np.testing.assert_allclose(out[0, :, :, 2, 2], np.repeat(expect[:, None], 9, 1), atol=1e-13)


def test_macpi_prior_impulse_stays_in_its_view(rng):
    cfg = nano(variant="gtf", mla_taps=(), use_macpi_prior=True, use_angular_embed=False)
    m = build_model(cfg)
    randomize(m, rng)
    m.prior.bias.data[:] = 0
    x = np.zeros((1, 1, 9, 5, 5))
    x[0, 0, 5, 2, 2] = 1.0
    out = np.abs(m.macpi_prior(Tensor(x)).data[0]).sum(0)
    nz = np.argwhere(out > 0)
    assert set(nz[:, 0].tolist()) == {5}
    assert nz[:, 1:].min(0).tolist() == [1, 1] and nz[:, 1:].max(0).tolist() == [3, 3]


def test_gtf_shapes_at_default_patch():
    cfg = preset("gtf", blocks=1)
    m = build_model(cfg, np.float32)
    with precision("f32"), no_grad():
        x = Tensor(np.zeros((1, 1, 25, 32, 32), np.float32))
        f = m.initial_features(x)
        assert f.shape == (1, 128, 25, 32, 32)
        assert m.macpi_prior(x).shape == (1, 128, 25, 32, 32)


def test_scale_one_is_refinement_plus_input(rng):
    m = build_model(nano(scale=1))
    randomize(m, rng)
    x = rng.random((1, 1, 9, 4, 4))
    out = m.forward_y(Tensor(x)).data
    refinement = m.head_out(m.head_expand(m.body(m.initial_features(Tensor(x))))).data
    np.testing.assert_allclose(out, x + refinement, atol=1e-12)


# -- end to end -------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["nano", "gtf_tiny"])
def test_identity_at_zero_is_exactly_bicubic(rng, name):
    cfg = preset(name, blocks=2, mla_taps=(1, 2)) if name == "gtf_tiny" else preset(name)
    m = zero_residual_paths(build_model(cfg))
    randomize_others = [p for n, p in m.named_parameters() if "gamma" not in n and not n.startswith("head_out")]
    for p in randomize_others:
        p.data = rng.standard_normal(p.shape)
    y = rng.random((1, 1, cfg.views, 6, 5))
    out = m.predict_y(y)
    assert np.array_equal(out, bicubic_resize(y, cfg.scale))
    rgb = rng.random((1, 3, cfg.views, 6, 5))
    via_model = m.forward(rgb)
    via_bicubic = super_resolve_rgb(rgb, lambda v: bicubic_resize(v, cfg.scale), cfg.scale)
    assert np.array_equal(via_model, via_bicubic)


def test_rgb_forward_shape_and_range(rng):
    m = build_model(nano())
    randomize(m, rng, 1.0)
    out = m.forward(rng.random((2, 3, 9, 4, 4)))
    assert out.shape == (2, 3, 9, 8, 8)
    assert out.min() >= 0 and out.max() <= 1


def test_end_to_end_gradient_nano_one_block(rng):
    cfg = nano(blocks=1, mla_taps=(1,))
    m = build_model(cfg)
    randomize(m, rng)
    x = Tensor(rng.random((1, 1, 9, 8, 8)))
    assert grad_check(m.forward_y, x, wrt=m.parameters(), max_coords=6) < 1e-4


def test_gtf_variant_gradient(rng):
    cfg = nano(variant="gtf", mla_taps=(), use_macpi_prior=True, use_angular_embed=False,
               share_hv=True, local_window=1, blocks=1)
    m = build_model(cfg)
    randomize(m, rng)
    x = Tensor(rng.random((1, 1, 9, 4, 4)))
    assert grad_check(m.forward_y, x, wrt=m.parameters(), max_coords=4) < 1e-4


def test_forward_is_deterministic(rng):
    y = rng.random((1, 1, 9, 5, 5))
    a = build_model(nano(seed=3)).predict_y(y)
    b = build_model(nano(seed=3)).predict_y(y)
    assert np.array_equal(a, b)
    # the zero-initialised head makes every seed output bicubic; seeds differ in the weights
    m3, m4 = build_model(nano(seed=3)), build_model(nano(seed=4))
    assert any(not np.array_equal(m3.state_dict()[k], v) for k, v in m4.state_dict().items())
    for m in (m3, m4):
        m.head_out.weight.data[...] = 0.1
    assert not np.array_equal(m3.predict_y(y), m4.predict_y(y))


def test_state_dict_round_trip_and_mismatch(rng):
    a, b = build_model(nano(seed=1)), build_model(nano(seed=2))
    b.load_state_dict(a.state_dict())
    y = rng.random((1, 1, 9, 4, 4))
    assert np.array_equal(a.predict_y(y), b.predict_y(y))
    sd = a.state_dict()
    sd.pop("shallow.weight")
    with pytest.raises(CheckpointError, match="shallow.weight"):
        b.load_state_dict(sd)
    c = build_model(nano(channels=4, heads=2, fusion_reduction=2))
    with pytest.raises(CheckpointError):
        c.load_state_dict(a.state_dict())


# -- budget --------------------------------------------------------------------------------

@pytest.mark.parametrize("cfg", [
    PRESETS["nano"], PRESETS["gtf_tiny"],
    preset("nano", use_diagonal=False, use_fusion=False),
    preset("nano", variant="gtf", mla_taps=(), use_macpi_prior=True, use_angular_embed=False, share_hv=True),
    preset("nano", ffn_type="1d"),
])
def test_param_count_matches_instantiation(cfg):
    assert budget.count_params(cfg) == build_model(cfg).num_parameters()


@pytest.mark.parametrize("cfg,hw", [
    (PRESETS["nano"], (8, 8)),
    (preset("nano", variant="gtf", mla_taps=(), use_macpi_prior=True, use_angular_embed=False,
            share_hv=True, local_window=1), (6, 4)),
    (preset("nano", ffn_type="1d", use_diagonal=False), (4, 4)),
])
def test_flop_count_matches_instrumented_run(cfg, hw):
    m = build_model(cfg)
    with no_grad(), count_flops() as fc:
        m.forward_y(Tensor(np.zeros((1, 1, cfg.views) + hw)))
    assert fc.total == budget.count_flops(cfg, *hw)


def test_single_pointwise_conv_param_count():
    assert budget._conv_params(7, 7, (1, 1, 1)) == 7 * 7 + 7


def test_tiny_budget_gate():
    r = budget.budget_report(PRESETS["gtf_tiny"])
    assert r["params"] < 1_000_000 and r["flops"] < 20e9
    assert r["params_ok"] and r["flops_ok"] and r["gated"]


def test_doubling_channels_quadruples_params():
    base = preset("gtf_tiny")
    wide = dataclasses.replace(base, channels=64)
    ratio = budget.count_params(wide) / budget.count_params(base)
    assert 3.7 < ratio < 4.05


def test_report_mentions_gap():
    text = budget.format_report(PRESETS["gtf_tiny"])
    assert "0.915" in text and "19.8" in text
    assert "(no gate)" in budget.format_report(PRESETS["gtf"])
