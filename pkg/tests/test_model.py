"""Model construction, LM forward, diffusion forward, checkpoints."""

import numpy as np
import pytest

from modalmamba import tensor as T
from modalmamba.block import SparsityConfig
from modalmamba.model import (ConfigError, ModelConfig, build_model,
                              forward_diffusion_path, forward_lm,
                              load_checkpoint, preset_model_config,
                              save_checkpoint)
from modalmamba.routing import ModalityMask


def tiny_cfg(**over):
    base = dict(f=8, layers=2, modalities=("text", "image"),
                vocab_sizes={"text": 11, "image": 7}, n=4, k=3)
    base.update(over)
    return ModelConfig(**base)


def test_build_is_deterministic():
    cfg = tiny_cfg()
    a = build_model(cfg, seed=5)
    b = build_model(cfg, seed=5)
    for k, t in a.named_parameters().items():
        np.testing.assert_array_equal(t.data, b.named_parameters()[k].data)
    c = build_model(cfg, seed=6)
    assert any(not np.array_equal(t.data, c.named_parameters()[k].data)
               for k, t in a.named_parameters().items())


def test_all_shared_has_one_tensor_per_projection():
    model = build_model(tiny_cfg(), seed=0)
    for blk in model.blocks:
        for proj in (blk.in_proj, blk.x_proj, blk.dt_proj, blk.out_proj):
            assert proj.shared


def test_param_count_matches_closed_form():
    # independent counting oracle from config arithmetic
    cfg = tiny_cfg(f=64, layers=2, sparsity=SparsityConfig.all_decoupled())
    model = build_model(cfg, seed=1)
    f, d, n, r, k = cfg.f, cfg.d, cfg.n, cfg.dt_rank, cfg.k
    m = cfg.num_modalities
    per_layer = (m * f * 2 * d          # in_proj
                 + m * d * (r + 2 * n)  # x_proj
                 + m * (r * d + d)      # dt_proj weight + bias
                 + m * d * f            # out_proj
                 + d * k + d * n        # conv, A (shared)
                 + f)                   # norm gain (shared)
    expected = (sum(v * f for v in cfg.vocab_sizes.values()) * 2  # embeddings + heads
                + cfg.layers * per_layer
                + f)                    # final norm
    assert model.num_params() == expected


def test_params_grow_with_decoupling_flops_do_not():
    from modalmamba.analysis import flops_per_token
    shared_cfg = tiny_cfg()
    mix_cfg = tiny_cfg(sparsity=SparsityConfig.all_decoupled())
    shared = build_model(shared_cfg, seed=0)
    mix = build_model(mix_cfg, seed=0)
    assert mix.num_params() > shared.num_params()
    assert flops_per_token(mix_cfg) == flops_per_token(shared_cfg)


def test_config_validation_names_field():
    with pytest.raises(ConfigError, match="layers"):
        tiny_cfg(layers=0)
    with pytest.raises(ConfigError, match="modalities"):
        ModelConfig(f=4, layers=1, modalities=(), vocab_sizes={})
    with pytest.raises(ConfigError, match="vocab_sizes"):
        tiny_cfg(vocab_sizes={"text": 11, "bogus": 5})
    with pytest.raises(ConfigError, match="continuous_dim"):
        ModelConfig(f=4, layers=1, modalities=("text", "img"),
                    vocab_sizes={"text": 4}, continuous_dim=0)


def test_logits_constant_when_embeddings_identical():
    cfg = tiny_cfg(layers=1, modalities=("text",), vocab_sizes={"text": 11})
    model = build_model(cfg, seed=2)
    # zero the block projections so the stream is exactly the embedding
    for blk in model.blocks:
        for rw in (blk.in_proj, blk.out_proj):
            for w in rw.weights:
                w.data = np.zeros_like(w.data)
    model.embeddings["text"].data = np.ones_like(model.embeddings["text"].data)
    mask = ModalityMask(np.zeros((2, 6), dtype=int), 1)
    tokens = np.random.default_rng(3).integers(0, 11, size=(2, 6))
    out = forward_lm(model, tokens, mask)
    dense = out.dense_logits("text")
    np.testing.assert_allclose(dense, np.broadcast_to(dense[:, :1, :], dense.shape),
                               atol=1e-12)


def test_lm_shape_contract():
    cfg = tiny_cfg(modalities=("text",), vocab_sizes={"text": 11})
    model = build_model(cfg, seed=4)
    mask = ModalityMask(np.zeros((2, 8), dtype=int), 1)
    tokens = np.random.default_rng(5).integers(0, 11, size=(2, 8))
    out = forward_lm(model, tokens, mask)
    assert out.dense_logits("text").shape == (2, 8, 11)


def test_lm_causality_probe():
    cfg = tiny_cfg()
    model = build_model(cfg, seed=6)
    r = np.random.default_rng(7)
    ids = r.integers(0, 2, size=(1, 10))
    mask = ModalityMask(ids, 2)
    vocabs = np.where(ids == 0, 11, 7)
    tokens = r.integers(0, 1, size=(1, 10)) + r.integers(0, 6, size=(1, 10))
    tokens = tokens % vocabs
    out0 = forward_lm(model, tokens, mask)
    t = 5
    tokens2 = tokens.copy()
    tokens2[0, t] = (tokens2[0, t] + 1) % vocabs[0, t]
    out1 = forward_lm(model, tokens2, mask)
    for name in out0.logits:
        idx = out0.positions[name]
        before = idx < t
        np.testing.assert_array_equal(out0.logits[name].data[before],
                                      out1.logits[name].data[before])
    after_differs = any(
        not np.array_equal(out0.logits[n].data[out0.positions[n] >= t],
                           out1.logits[n].data[out1.positions[n] >= t])
        for n in out0.logits)
    assert after_differs


def test_token_validation_reports_position():
    cfg = tiny_cfg()
    model = build_model(cfg, seed=8)
    mask = ModalityMask(np.zeros((1, 4), dtype=int), 2)
    tokens = np.array([[0, 3, 11, 1]])
    with pytest.raises(T.ValidationError, match=r"t=2"):
        forward_lm(model, tokens, mask)


def test_step0_dense_equivalence_across_sparsity():
    r = np.random.default_rng(9)
    base = tiny_cfg(modalities=("text", "image", "speech"),
                    vocab_sizes={"text": 11, "image": 7, "speech": 5})
    ids = r.integers(0, 3, size=(2, 6))
    mask = ModalityMask(ids, 3)
    tokens = r.integers(0, 5, size=(2, 6))
    ref = None
    for bits in range(16):
        sp = SparsityConfig(*(bool(bits >> i & 1) for i in range(4)))
        model = build_model(base.with_sparsity(sp), seed=10)
        out = forward_lm(model, tokens, mask)
        stacked = np.concatenate([out.logits[n].data.reshape(-1)
                                  for n in sorted(out.logits)])
        if ref is None:
            ref = stacked
        else:
            np.testing.assert_allclose(stacked, ref, rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# diffusion path
# ---------------------------------------------------------------------------


def transfusion_cfg(**over):
    base = dict(f=8, layers=1, modalities=("text", "image"),
                vocab_sizes={"text": 13}, continuous_dim=8, n=4, k=3)
    base.update(over)
    return ModelConfig(**base)


def _diff_inputs(seed=0, b=1, l=8):
    r = np.random.default_rng(seed)
    ids = np.zeros((b, l), dtype=int)
    ids[:, 3:7] = 1  # one image segment of 4 patches
    mask = ModalityMask(ids, 2)
    tokens = r.integers(0, 13, size=(b, l)) * (ids == 0)
    patches = r.standard_normal((b, l, 8)) * (ids == 1)[..., None]
    tsteps = np.full((b, l), 17)
    return mask, tokens, patches, tsteps


def test_diffusion_zero_head_gives_zero_noise():
    model = build_model(transfusion_cfg(), seed=11)
    model.noise_head.data = np.zeros_like(model.noise_head.data)
    mask, tokens, patches, tsteps = _diff_inputs()
    out = forward_diffusion_path(model, tokens, patches, tsteps, mask)
    np.testing.assert_array_equal(out.eps_hat.data, 0.0)


def test_diffusion_shapes():
    model = build_model(transfusion_cfg(), seed=12)
    mask, tokens, patches, tsteps = _diff_inputs()
    out = forward_diffusion_path(model, tokens, patches, tsteps, mask)
    assert out.eps_hat.shape == (4, 8)
    assert out.lm.logits["text"].shape == (4, 13)


def test_diffusion_causality_text_after_image():
    model = build_model(transfusion_cfg(), seed=13)
    mask, tokens, patches, tsteps = _diff_inputs(seed=1)
    out0 = forward_diffusion_path(model, tokens, patches, tsteps, mask)
    tokens2 = tokens.copy()
    tokens2[0, 7] = (tokens2[0, 7] + 3) % 13  # text token after the image
    out1 = forward_diffusion_path(model, tokens2, patches, tsteps, mask)
    np.testing.assert_array_equal(out0.eps_hat.data, out1.eps_hat.data)
    # but an earlier text token does change the prediction
    tokens3 = tokens.copy()
    tokens3[0, 0] = (tokens3[0, 0] + 3) % 13
    out2 = forward_diffusion_path(model, tokens3, patches, tsteps, mask)
    assert not np.array_equal(out0.eps_hat.data, out2.eps_hat.data)


def test_diffusion_requires_continuous_modality():
    model = build_model(tiny_cfg(), seed=14)
    mask = ModalityMask(np.zeros((1, 4), dtype=int), 2)
    with pytest.raises(T.UsageError, match="continuous"):
        forward_diffusion_path(model, np.zeros((1, 4), dtype=int),
                               np.zeros((1, 4, 8)), np.zeros((1, 4), dtype=int), mask)


# ---------------------------------------------------------------------------
# checkpoints and presets
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_cfg(sparsity=SparsityConfig(decouple_in_proj=True))
    model = build_model(cfg, seed=15)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(model, path)
    other = build_model(cfg, seed=99)
    load_checkpoint(other, path)
    for k, t in model.named_parameters().items():
        np.testing.assert_array_equal(t.data, other.named_parameters()[k].data)
    # key format contract
    keys = set(model.named_parameters())
    assert "layer.0.in_proj.text" in keys and "layer.0.in_proj.image" in keys
    assert "layer.0.x_proj.shared" in keys
    assert "layer.1.conv" in keys and "layer.1.A" in keys


def test_checkpoint_mismatch_rejected(tmp_path):
    model = build_model(tiny_cfg(), seed=16)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(model, path)
    other = build_model(tiny_cfg(sparsity=SparsityConfig.all_decoupled()), seed=16)
    with pytest.raises(T.ValidationError):
        load_checkpoint(other, path)


def test_presets_mirror_shapes():
    cfg = preset_model_config("94M-shape", ("text",), {"text": 32})
    assert (cfg.f, cfg.layers) == (64, 8)
    assert cfg.f <= 256
    with pytest.raises(ConfigError):
        preset_model_config("9T-shape", ("text",), {"text": 32})


def test_per_modality_norm_flag():
    cfg = tiny_cfg(per_modality_norm=True)
    model = build_model(cfg, seed=17)
    assert len(model.norms[0]) == 2
    keys = model.named_parameters()
    assert "layer.0.norm.text" in keys and "final_norm.image" in keys
    mask = ModalityMask(np.array([[0, 1, 0, 1]]), 2)
    tokens = np.array([[1, 2, 3, 4]])
    out = forward_lm(model, tokens, mask)  # runs without error
    assert set(out.logits) == {"text", "image"}
