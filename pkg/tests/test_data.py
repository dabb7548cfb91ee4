"""Synthetic multi-modal data: determinism, statistics, fixture round-trip."""

import numpy as np
import pytest
from scipy import stats

from modalmamba.data import (DataConfig, ModalitySpec,
                             chameleon_speech_data, gen_batch, load_batches,
                             sample_segment, save_batches, transfusion_data)
from modalmamba.model import ConfigError
from modalmamba.objectives import IGNORE_TARGET


def small_cfg(**over):
    base = dict(
        modalities=(
            ModalitySpec("text", "discrete", vocab=32, process="markov",
                         seg_range=(4, 8)),
            ModalitySpec("speech", "discrete", vocab=32, process="runlength",
                         seg_range=(4, 8), mean_run=5.0, popularity=1.5),
        ),
        sequence_length=64, batch_size=2)
    base.update(over)
    return DataConfig(**base)


def test_determinism():
    cfg = small_cfg()
    a = gen_batch(cfg, seed=3, step=7)
    b = gen_batch(cfg, seed=3, step=7)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.mask.ids, b.mask.ids)
    np.testing.assert_array_equal(a.targets, b.targets)
    c = gen_batch(cfg, seed=3, step=8)
    assert not np.array_equal(a.tokens, c.tokens)


def test_single_modality_mask_constant():
    cfg = DataConfig(modalities=(ModalitySpec("text", "discrete", vocab=16),),
                     sequence_length=32, batch_size=2)
    batch = gen_batch(cfg, seed=0, step=0)
    np.testing.assert_array_equal(batch.mask.ids, 0)


def test_mask_total_and_vocab_bounds():
    cfg = small_cfg()
    for step in range(5):
        batch = gen_batch(cfg, seed=1, step=step)
        assert batch.mask.ids.shape == (2, 64)
        assert batch.mask.ids.min() >= 0 and batch.mask.ids.max() < 2
        for m, spec in enumerate(cfg.modalities):
            toks = batch.tokens[batch.mask.ids == m]
            assert toks.min() >= 0 and toks.max() < spec.vocab


def test_targets_are_next_token_within_segment():
    cfg = small_cfg()
    batch = gen_batch(cfg, seed=2, step=0)
    ids, tokens, targets = batch.mask.ids, batch.tokens, batch.targets
    b, l = ids.shape
    for i in range(b):
        for t in range(l):
            if t + 1 < l and ids[i, t + 1] == ids[i, t]:
                assert targets[i, t] == tokens[i, t + 1]
            else:
                assert targets[i, t] == IGNORE_TARGET


def test_continuous_modality_patches():
    cfg = transfusion_data(seq_len=48, batch_size=2, patch_dim=4)
    batch = gen_batch(cfg, seed=5, step=1)
    assert batch.patches.shape == (2, 48, 4)
    img = batch.mask.ids == 1
    assert np.all(np.isfinite(batch.patches))
    assert np.any(batch.patches[img] != 0.0)
    np.testing.assert_array_equal(batch.patches[~img], 0.0)
    np.testing.assert_array_equal(batch.tokens[img], -1)
    # continuous positions never carry an LM target
    np.testing.assert_array_equal(batch.targets[img], IGNORE_TARGET)


def test_segments_are_contiguous_runs():
    cfg = small_cfg()
    batch = gen_batch(cfg, seed=6, step=0)
    for row in batch.mask.ids:
        changes = np.flatnonzero(np.diff(row) != 0)
        # neighbors across a change differ (alternating segments)
        for c in changes:
            assert row[c] != row[c + 1]


def unigram(cfg, mod_index, n_tokens, seed):
    spec = cfg.modalities[mod_index]
    rng = np.random.default_rng(seed)
    seg = sample_segment(spec, cfg, mod_index, rng, n_tokens)
    return np.bincount(seg, minlength=spec.vocab)


def test_modality_unigrams_differ_chi_square():
    # two-sample homogeneity test on 10k tokens per modality, 99th percentile
    cfg = small_cfg()
    c1 = unigram(cfg, 0, 10_000, seed=11)
    c2 = unigram(cfg, 1, 10_000, seed=12)
    table = np.stack([c1, c2]).astype(float)
    col = table.sum(axis=0)
    rowtot = table.sum(axis=1, keepdims=True)
    expected = rowtot * col / table.sum()
    keep = col > 0
    stat = ((table[:, keep] - expected[:, keep]) ** 2 / expected[:, keep]).sum()
    threshold = stats.chi2.ppf(0.99, keep.sum() - 1)
    assert stat > threshold


def test_unigram_stable_across_seeds():
    # KL between two seeds' histograms < 0.05 at 100k tokens
    cfg = small_cfg()
    for mod in (0, 1):
        c1 = unigram(cfg, mod, 100_000, seed=21) + 1.0
        c2 = unigram(cfg, mod, 100_000, seed=22) + 1.0
        p, q = c1 / c1.sum(), c2 / c2.sum()
        kl = float((p * np.log(p / q)).sum())
        assert kl < 0.05


def test_zero_heterogeneity_is_uniform():
    from modalmamba.data import _markov_cdf, _runlength_cdf
    cfg = small_cfg().with_heterogeneity(0.0)
    text = cfg.modalities[0]
    cdf = _markov_cdf(cfg.pattern_seed, 0, text.vocab, text.sharpness,
                      text.popularity, 0.0)
    # every transition row is exactly the uniform distribution
    np.testing.assert_allclose(np.diff(cdf, axis=1), 1.0 / text.vocab, atol=1e-15)
    np.testing.assert_allclose(
        _runlength_cdf(cfg.pattern_seed, 1, 32, 1.5, 0.0),
        np.arange(1, 33) / 32.0, atol=1e-15)
    # runlength process degenerates to iid (runs of length 1 everywhere)
    seg = sample_segment(cfg.modalities[1], cfg, 1, np.random.default_rng(32), 5000)
    repeats = float(np.mean(seg[1:] == seg[:-1]))
    assert repeats < 3.0 / cfg.modalities[1].vocab


def test_speech_preset_uses_500_symbols():
    cfg = chameleon_speech_data()
    speech = [m for m in cfg.modalities if m.name == "speech"][0]
    assert speech.vocab == 500
    assert speech.process == "runlength"


def test_config_validation():
    with pytest.raises(ConfigError, match="at least one"):
        DataConfig(modalities=())
    with pytest.raises(ConfigError, match="segment"):
        ModalitySpec("x", "discrete", vocab=4, seg_range=(0, 3))
    with pytest.raises(ConfigError, match="vocab"):
        ModalitySpec("x", "discrete", vocab=1)
    with pytest.raises(ConfigError, match="heterogeneity"):
        small_cfg(heterogeneity=1.5)


def test_fixture_roundtrip(tmp_path):
    cfg = transfusion_data(seq_len=32, batch_size=2, patch_dim=3)
    batches = [gen_batch(cfg, seed=1, step=s) for s in range(3)]
    path = tmp_path / "fixtures.bin"
    save_batches(path, batches)
    loaded = load_batches(path)
    assert len(loaded) == 3
    for a, b in zip(batches, loaded):
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.targets, b.targets)
        np.testing.assert_array_equal(a.mask.ids, b.mask.ids)
        assert a.mask.num_modalities == b.mask.num_modalities
        np.testing.assert_array_equal(a.patches, b.patches)


def test_fixture_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ConfigError, match="magic"):
        load_batches(path)
