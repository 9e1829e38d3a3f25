"""Model wiring tests: shapes, ablation flags, determinism, parameter
bookkeeping, and gradient flow through the full forward pass."""

import numpy as np
import pytest

import kldd.autodiff as ad
from kldd.autodiff import Tensor
from kldd.networks import (
    ModelConfig,
    denoiser_forward,
    extractor_forward,
    init_model,
    time_embedding,
)

SMALL = dict(base_channels=8, depth=2, channel_multipliers=(1, 2), time_embed_dim=16)


def small_config(**kw):
    merged = {**SMALL, **kw}
    return ModelConfig(**merged)


def forward_pair(bundle, seed=0, size=16, batch=None):
    rng = np.random.default_rng(seed)
    shape = (1, size, size) if batch is None else (batch, 1, size, size)
    img = Tensor(rng.normal(size=shape))
    xt = Tensor(rng.normal(size=shape))
    cond = extractor_forward(bundle, img)
    return img, xt, cond, denoiser_forward(bundle, xt, 5, cond)


# ---------------------------------------------------------------------------
# time embedding
# ---------------------------------------------------------------------------


def test_time_embedding_shape_and_determinism():
    a = time_embedding(7, 64)
    b = time_embedding(7, 64)
    assert a.shape == (64,)
    np.testing.assert_array_equal(a.data, b.data)


def test_time_embedding_pairwise_distinct():
    embs = np.stack([time_embedding(t, 64).data for t in range(1, 101)])
    unit = embs / np.linalg.norm(embs, axis=1, keepdims=True)
    cos = unit @ unit.T
    np.fill_diagonal(cos, -1.0)
    assert cos.max() < 1 - 1e-9


def test_time_embedding_validation():
    with pytest.raises(ValueError):
        time_embedding(1, 63)
    with pytest.raises(ValueError):
        time_embedding(0, 64)


# ---------------------------------------------------------------------------
# extractor
# ---------------------------------------------------------------------------


def test_extractor_default_shapes():
    bundle = init_model(ModelConfig(), seed=0)
    img = Tensor(np.random.default_rng(0).normal(size=(1, 64, 64)))
    with ad.no_grad():
        skips, bn = extractor_forward(bundle, img)
    assert [s.shape for s in skips] == [(16, 64, 64), (32, 32, 32), (64, 16, 16)]
    assert bn.shape == (64, 8, 8)
    for s in skips + [bn]:
        assert np.all(np.isfinite(s.data))


def test_extractor_rejects_indivisible_sizes():
    bundle = init_model(small_config(), seed=0)
    with pytest.raises(ValueError):
        extractor_forward(bundle, Tensor(np.zeros((1, 18, 16))))
    with pytest.raises(ValueError):
        extractor_forward(bundle, Tensor(np.zeros((2, 16, 16))))


def test_ld_flag_controls_offset_parameters():
    with_ld = init_model(small_config(ld_enabled=True), seed=0)
    without = init_model(small_config(ld_enabled=False), seed=0)
    assert any("pred_w" in n for n in with_ld.named_parameters())
    assert not any("pred_w" in n for n in without.named_parameters())
    assert not any("tap_w" in n for n in without.named_parameters())


def test_kalman_toggle_is_parameter_neutral():
    kal = init_model(small_config(kalman_enabled=True), seed=3)
    cum = init_model(small_config(kalman_enabled=False), seed=3)
    pa, pb = kal.named_parameters(), cum.named_parameters()
    assert sorted(pa) == sorted(pb)
    for n in pa:
        assert pa[n].shape == pb[n].shape
        np.testing.assert_array_equal(pa[n].data, pb[n].data)
    # same parameters, different receptive geometry -> different features
    img = Tensor(np.random.default_rng(0).normal(size=(1, 16, 16)))
    for b in (kal, cum):
        for st in b.ext_stages:
            st.b0.paired.horizontal.pred_b.data[:] = 0.5
            st.b1.paired.horizontal.pred_b.data[:] = 0.5
    with ad.no_grad():
        a = extractor_forward(kal, img)[1].data
        c = extractor_forward(cum, img)[1].data
    assert np.any(a != c)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def test_denoiser_output_matches_input_shape():
    bundle = init_model(small_config(), seed=1)
    _, xt, cond, out = forward_pair(bundle)
    assert out.shape == xt.shape == (1, 16, 16)
    _, xt4, _, out4 = forward_pair(bundle, batch=3)
    assert out4.shape == xt4.shape == (3, 1, 16, 16)
    assert np.all(np.isfinite(out4.data))


def test_denoiser_validation():
    bundle = init_model(small_config(), seed=1)
    img = Tensor(np.zeros((1, 16, 16)))
    cond = extractor_forward(bundle, img)
    with pytest.raises(ValueError):
        denoiser_forward(bundle, Tensor(np.zeros((1, 16, 16))), 0, cond)
    with pytest.raises(ValueError):
        denoiser_forward(bundle, Tensor(np.zeros((1, 18, 16))), 3, cond)
    with pytest.raises(ValueError):
        denoiser_forward(bundle, Tensor(np.zeros((1, 16, 16))), 3, (cond[0][:1], cond[1]))


def test_condition_always_reaches_output():
    # The condition path is additive even without fusion, so changing the
    # input image must change the noise prediction in every ablation row.
    for fusion in (False, True):
        bundle = init_model(small_config(fusion_enabled=fusion), seed=2)
        rng = np.random.default_rng(4)
        xt = Tensor(rng.normal(size=(1, 16, 16)))
        with ad.no_grad():
            cond_a = extractor_forward(bundle, Tensor(rng.normal(size=(1, 16, 16))))
            cond_b = extractor_forward(bundle, Tensor(rng.normal(size=(1, 16, 16))))
            out_a = denoiser_forward(bundle, xt, 3, cond_a)
            out_b = denoiser_forward(bundle, xt, 3, cond_b)
        assert np.any(out_a.data != out_b.data), f"fusion={fusion}"


def test_fusion_flag_only_adds_attention_parameters():
    on = init_model(small_config(fusion_enabled=True), seed=5)
    off = init_model(small_config(fusion_enabled=False), seed=5)
    extra = set(on.named_parameters()) - set(off.named_parameters())
    assert extra
    assert all(".fuse_spatial." in n or ".fuse_channel." in n for n in extra)
    assert set(off.named_parameters()) <= set(on.named_parameters())


def test_forward_deterministic_and_init_seeded():
    bundle_a = init_model(small_config(), seed=9)
    bundle_b = init_model(small_config(), seed=9)
    pa, pb = bundle_a.named_parameters(), bundle_b.named_parameters()
    for n in pa:
        np.testing.assert_array_equal(pa[n].data, pb[n].data)
    _, _, _, out1 = forward_pair(bundle_a, seed=7)
    _, _, _, out2 = forward_pair(bundle_a, seed=7)
    np.testing.assert_array_equal(out1.data, out2.data)
    assert init_model(small_config(), seed=10).param_count() == bundle_a.param_count()


def test_parameter_counts_frozen():
    # Regression values measured once from the counting walk; any wiring
    # change that alters capacity must show up here.
    assert init_model(ModelConfig(), seed=0).param_count() == 581_755
    assert init_model(
        ModelConfig(ld_enabled=False, kalman_enabled=False, fusion_enabled=False), seed=0
    ).param_count() == 525_729
    assert init_model(
        ModelConfig(ld_enabled=True, kalman_enabled=False, fusion_enabled=False), seed=0
    ).param_count() == 549_009


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=2).validate()  # multipliers left at length 3
    with pytest.raises(ValueError):
        ModelConfig(time_embed_dim=15).validate()
    with pytest.raises(ValueError):
        ModelConfig(base_channels=0).validate()


def test_gradient_reaches_extractor_parameters():
    for fusion in (True, False):
        bundle = init_model(small_config(fusion_enabled=fusion), seed=11)
        rng = np.random.default_rng(12)
        img = Tensor(rng.normal(size=(1, 1, 16, 16)))
        xt = Tensor(rng.normal(size=(1, 1, 16, 16)))
        eps = Tensor(rng.normal(size=(1, 1, 16, 16)))
        with ad.recording() as tape:
            cond = extractor_forward(bundle, img)
            out = denoiser_forward(bundle, xt, 4, cond)
            tape.backward(ad.mse(out, eps))
        ext_grads = [t.grad for n, t in bundle.named_parameters().items() if n.startswith("ext.")]
        assert any(g is not None and np.any(g != 0) for g in ext_grads), f"fusion={fusion}"
        bundle.zero_grad()
        for t in bundle.named_parameters().values():
            assert t.grad is None


def test_head_bias_gradient_matches_finite_difference():
    # One cheap end-to-end derivative: the scalar head bias only needs two
    # extra forward passes, and its chain crosses the entire decoder.
    bundle = init_model(small_config(), seed=13)
    rng = np.random.default_rng(14)
    img = Tensor(rng.normal(size=(1, 1, 16, 16)))
    xt = Tensor(rng.normal(size=(1, 1, 16, 16)))
    eps = Tensor(rng.normal(size=(1, 1, 16, 16)))

    def loss_value():
        with ad.no_grad():
            cond = extractor_forward(bundle, img)
            return ad.mse(denoiser_forward(bundle, xt, 4, cond), eps).item()

    with ad.recording() as tape:
        cond = extractor_forward(bundle, img)
        tape.backward(ad.mse(denoiser_forward(bundle, xt, 4, cond), eps))
    analytic = float(bundle.head_b.grad[0])

    h = 1e-6
    bundle.head_b.data[0] += h
    up = loss_value()
    bundle.head_b.data[0] -= 2 * h
    down = loss_value()
    bundle.head_b.data[0] += h
    fd = (up - down) / (2 * h)
    assert abs(analytic - fd) <= 1e-4 * max(abs(fd), 1e-3)
