"""Deterministic synthetic interleaved multi-modal sequences.

Each modality owns a generating process with its own statistics (symbol
popularity, transition sharpness, run lengths, patch smoothness) so that
modality-decoupled weights have something real to specialize on. A single
`heterogeneity` dial scales every distinguishing parameter; at zero all
discrete processes collapse to iid-uniform symbols and the continuous
process to white Gaussian patches, which is the null setting for ablations.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import BinaryIO, Optional

import numpy as np

from .model import ConfigError
from .objectives import IGNORE_TARGET
from .routing import ModalityMask

PROCESSES = ("markov", "grid2d", "runlength", "smooth")


@dataclass(frozen=True)
class ModalitySpec:
    """One modality's generator: kind, size, process and its parameters."""

    name: str
    kind: str                        # "discrete" | "continuous"
    vocab: int = 0                   # discrete only
    dim: int = 0                     # continuous only
    process: str = "markov"
    seg_range: tuple[int, int] = (8, 16)
    sharpness: float = 2.0           # transition concentration (markov/grid2d)
    popularity: float = 1.0          # unigram skew scale (discrete processes)
    grid_width: int = 8              # row stride of the 2d neighborhood
    grid_left_scale: float = 1.0     # left-neighbor strength relative to above
    mean_run: float = 8.0            # runlength process
    smoothing: float = 0.9           # AR(1) coefficient across patches

    def __post_init__(self) -> None:
        if self.kind not in ("discrete", "continuous"):
            raise ConfigError(f"modality {self.name!r}: kind must be discrete|continuous")
        if self.kind == "discrete" and self.vocab < 2:
            raise ConfigError(f"modality {self.name!r}: discrete vocab must be >= 2")
        if self.kind == "continuous" and self.dim < 1:
            raise ConfigError(f"modality {self.name!r}: continuous dim must be >= 1")
        if self.process not in PROCESSES:
            raise ConfigError(f"modality {self.name!r}: unknown process {self.process!r}")
        lo, hi = self.seg_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"modality {self.name!r}: bad segment range {self.seg_range}")


@dataclass(frozen=True)
class DataConfig:
    modalities: tuple[ModalitySpec, ...]
    sequence_length: int = 256
    batch_size: int = 8
    heterogeneity: float = 1.0
    pattern_seed: int = 0

    def __post_init__(self) -> None:
        if not self.modalities:
            raise ConfigError("data config needs at least one modality")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"modality names must be unique, got {names}")
        if self.sequence_length < 2:
            raise ConfigError(f"sequence_length must be >= 2, got {self.sequence_length}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError(f"heterogeneity must be in [0,1], got {self.heterogeneity}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modalities)

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    def continuous_dim(self) -> int:
        dims = [m.dim for m in self.modalities if m.kind == "continuous"]
        return dims[0] if dims else 0

    def with_heterogeneity(self, h: float) -> "DataConfig":
        return replace(self, heterogeneity=h)


@dataclass
class Batch:
    """One training batch; -1 marks continuous positions in `tokens` and
    excluded positions in `targets`."""

    tokens: np.ndarray                 # [b, l] int
    patches: Optional[np.ndarray]      # [b, l, dim] float, zeros off-modality
    mask: ModalityMask
    targets: np.ndarray                # [b, l] int, IGNORE_TARGET where excluded


# ---------------------------------------------------------------------------
# per-process samplers; the "language" (matrices, biases) is a pure function
# of (pattern_seed, modality index) so it never changes across steps
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _markov_cdf(pattern_seed: int, mod_index: int, vocab: int,
                sharpness: float, popularity: float, het: float) -> np.ndarray:
    rng = np.random.default_rng([pattern_seed, mod_index, 101])
    logits = sharpness * rng.standard_normal((vocab, vocab))
    logits += popularity * rng.standard_normal(vocab)
    probs = np.exp(het * logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    cdf.setflags(write=False)
    return cdf


@lru_cache(maxsize=64)
def _grid_logits(pattern_seed: int, mod_index: int, vocab: int,
                 sharpness: float, popularity: float, left_scale: float,
                 het: float):
    rng = np.random.default_rng([pattern_seed, mod_index, 202])
    left = het * sharpness * left_scale * rng.standard_normal((vocab, vocab))
    above = het * sharpness * rng.standard_normal((vocab, vocab))
    bias = het * popularity * rng.standard_normal(vocab)
    for a in (left, above, bias):
        a.setflags(write=False)
    return left, above, bias


@lru_cache(maxsize=64)
def _runlength_cdf(pattern_seed: int, mod_index: int, vocab: int,
                   popularity: float, het: float) -> np.ndarray:
    rng = np.random.default_rng([pattern_seed, mod_index, 303])
    probs = np.exp(het * popularity * rng.standard_normal(vocab))
    probs /= probs.sum()
    cdf = np.cumsum(probs)
    cdf.setflags(write=False)
    return cdf


def _sample_markov(spec: ModalitySpec, cfg: DataConfig, mod_index: int,
                   rng: np.random.Generator, length: int) -> np.ndarray:
    cdf = _markov_cdf(cfg.pattern_seed, mod_index, spec.vocab,
                      spec.sharpness, spec.popularity, cfg.heterogeneity)
    u = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    prev = rng.integers(0, spec.vocab)
    for j in range(length):
        prev = np.searchsorted(cdf[prev], u[j])
        out[j] = prev
    return out


def _sample_grid2d(spec: ModalitySpec, cfg: DataConfig, mod_index: int,
                   rng: np.random.Generator, length: int) -> np.ndarray:
    left, above, bias = _grid_logits(cfg.pattern_seed, mod_index, spec.vocab,
                                     spec.sharpness, spec.popularity,
                                     spec.grid_left_scale, cfg.heterogeneity)
    w = spec.grid_width
    gumbel = -np.log(-np.log(rng.random((length, spec.vocab))))
    out = np.empty(length, dtype=np.int64)
    prev = rng.integers(0, spec.vocab)
    for j in range(length):
        logits = left[prev] + bias + gumbel[j]
        if j >= w:
            logits = logits + above[out[j - w]]
        prev = int(np.argmax(logits))
        out[j] = prev
    return out


def _sample_runlength(spec: ModalitySpec, cfg: DataConfig, mod_index: int,
                      rng: np.random.Generator, length: int) -> np.ndarray:
    # Uniform (not geometric) run lengths: the hazard of a run ending rises
    # with its age, so predicting continuation requires counting state.
    cdf = _runlength_cdf(cfg.pattern_seed, mod_index, spec.vocab,
                         spec.popularity, cfg.heterogeneity)
    mean_run = 1.0 + cfg.heterogeneity * (spec.mean_run - 1.0)
    lo = max(1, math.ceil(0.5 * mean_run))
    hi = max(lo, math.floor(1.5 * mean_run))
    out = np.empty(length, dtype=np.int64)
    pos = 0
    while pos < length:
        sym = int(np.searchsorted(cdf, rng.random()))
        run = int(rng.integers(lo, hi + 1))
        out[pos:pos + run] = sym
        pos += run
    return out


def _sample_smooth(spec: ModalitySpec, cfg: DataConfig,
                   rng: np.random.Generator, length: int) -> np.ndarray:
    rho = cfg.heterogeneity * spec.smoothing
    noise = rng.standard_normal((length, spec.dim))
    out = np.empty_like(noise)
    prev = np.zeros(spec.dim)
    scale = np.sqrt(1.0 - rho * rho)
    for j in range(length):
        prev = rho * prev + scale * noise[j]
        out[j] = prev
    return out


def sample_segment(spec: ModalitySpec, cfg: DataConfig, mod_index: int,
                   rng: np.random.Generator, length: int) -> np.ndarray:
    if spec.process == "markov":
        return _sample_markov(spec, cfg, mod_index, rng, length)
    if spec.process == "grid2d":
        return _sample_grid2d(spec, cfg, mod_index, rng, length)
    if spec.process == "runlength":
        return _sample_runlength(spec, cfg, mod_index, rng, length)
    return _sample_smooth(spec, cfg, rng, length)


# ---------------------------------------------------------------------------
# batch generation
# ---------------------------------------------------------------------------


def gen_batch(cfg: DataConfig, seed: int, step: int) -> Batch:
    """Reproducible batch: the same (cfg, seed, step) always returns the
    same interleaving and the same token/patch values."""
    rng = np.random.default_rng([cfg.pattern_seed, seed, step])
    b, l = cfg.batch_size, cfg.sequence_length
    cdim = cfg.continuous_dim()

    ids = np.empty((b, l), dtype=np.int64)
    tokens = np.full((b, l), -1, dtype=np.int64)
    patches = np.zeros((b, l, cdim)) if cdim else None

    for i in range(b):
        pos = 0
        prev_mod = -1
        while pos < l:
            if cfg.num_modalities == 1:
                m = 0
            elif prev_mod < 0:
                m = int(rng.integers(0, cfg.num_modalities))
            else:
                m = int(rng.integers(0, cfg.num_modalities - 1))
                if m >= prev_mod:
                    m += 1
            spec = cfg.modalities[m]
            lo, hi = spec.seg_range
            seg = min(int(rng.integers(lo, hi + 1)), l - pos)
            ids[i, pos:pos + seg] = m
            values = sample_segment(spec, cfg, m, rng, seg)
            if spec.kind == "discrete":
                tokens[i, pos:pos + seg] = values
            else:
                patches[i, pos:pos + seg] = values
            pos += seg
            prev_mod = m

    mask = ModalityMask(ids, cfg.num_modalities)
    discrete = np.array([m.kind == "discrete" for m in cfg.modalities])
    targets = np.full((b, l), IGNORE_TARGET, dtype=np.int64)
    same_next = ids[:, :-1] == ids[:, 1:]
    valid = same_next & discrete[ids[:, :-1]]
    targets[:, :-1] = np.where(valid, tokens[:, 1:], IGNORE_TARGET)
    return Batch(tokens=tokens, patches=patches, mask=mask, targets=targets)


# ---------------------------------------------------------------------------
# preset data configurations
# ---------------------------------------------------------------------------


def chameleon_data(seq_len: int = 256, batch_size: int = 8,
                   text_vocab: int = 128, image_vocab: int = 128) -> DataConfig:
    """Two discrete modalities: text Markov chain, image 2d-neighborhood chain
    whose above-row dependence sits beyond the conv kernel's reach."""
    return DataConfig(
        modalities=(
            ModalitySpec("text", "discrete", vocab=text_vocab, process="markov",
                         seg_range=(8, 24), sharpness=2.5, popularity=1.0),
            ModalitySpec("image", "discrete", vocab=image_vocab, process="grid2d",
                         seg_range=(16, 32), sharpness=3.0, popularity=1.0,
                         grid_width=5),
        ),
        sequence_length=seq_len, batch_size=batch_size)


def chameleon_speech_data(seq_len: int = 256, batch_size: int = 8,
                          text_vocab: int = 128, image_vocab: int = 128,
                          speech_vocab: int = 500) -> DataConfig:
    """Three discrete modalities; speech is a slow run-length process over
    a 500-symbol vocabulary by default."""
    base = chameleon_data(seq_len, batch_size, text_vocab, image_vocab)
    speech = ModalitySpec("speech", "discrete", vocab=speech_vocab,
                          process="runlength", seg_range=(24, 48),
                          popularity=1.5, mean_run=10.0)
    return replace(base, modalities=base.modalities + (speech,))


def transfusion_data(seq_len: int = 256, batch_size: int = 8,
                     text_vocab: int = 128, patch_dim: int = 16) -> DataConfig:
    """Discrete text interleaved with continuous smoothed-Gaussian patches."""
    return DataConfig(
        modalities=(
            ModalitySpec("text", "discrete", vocab=text_vocab, process="markov",
                         seg_range=(8, 24), sharpness=2.0, popularity=1.0),
            ModalitySpec("image", "continuous", dim=patch_dim, process="smooth",
                         seg_range=(16, 32), smoothing=0.9),
        ),
        sequence_length=seq_len, batch_size=batch_size)


DATA_PRESETS = {
    "chameleon": chameleon_data,
    "chameleon_speech": chameleon_speech_data,
    "transfusion": transfusion_data,
}


# ---------------------------------------------------------------------------
# binary fixture export: magic, version, shapes, raw little-endian values
# ---------------------------------------------------------------------------

MAGIC = b"MMBF"
FORMAT_VERSION = 1


def write_batches(fp: BinaryIO, batches: list[Batch]) -> None:
    """Record layout: MAGIC, u16 version, u16 count, then per batch
    u16 b, u16 l, u16 num_modalities, u16 patch_dim followed by raw
    little-endian arrays: ids i16[b,l], tokens i32[b,l], targets i32[b,l],
    patches f64[b,l,patch_dim]."""
    fp.write(MAGIC)
    fp.write(struct.pack("<HH", FORMAT_VERSION, len(batches)))
    for batch in batches:
        b, l = batch.mask.batch, batch.mask.length
        cdim = 0 if batch.patches is None else batch.patches.shape[2]
        fp.write(struct.pack("<HHHH", b, l, batch.mask.num_modalities, cdim))
        fp.write(batch.mask.ids.astype("<i2").tobytes())
        fp.write(batch.tokens.astype("<i4").tobytes())
        fp.write(batch.targets.astype("<i4").tobytes())
        if cdim:
            fp.write(batch.patches.astype("<f8").tobytes())


def read_batches(fp: BinaryIO) -> list[Batch]:
    magic = fp.read(4)
    if magic != MAGIC:
        raise ConfigError(f"not a batch fixture file (magic {magic!r})")
    version, count = struct.unpack("<HH", fp.read(4))
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported fixture version {version}")
    out = []
    for _ in range(count):
        b, l, nm, cdim = struct.unpack("<HHHH", fp.read(8))
        ids = np.frombuffer(fp.read(2 * b * l), dtype="<i2").reshape(b, l)
        tokens = np.frombuffer(fp.read(4 * b * l), dtype="<i4").reshape(b, l)
        targets = np.frombuffer(fp.read(4 * b * l), dtype="<i4").reshape(b, l)
        patches = None
        if cdim:
            patches = np.frombuffer(fp.read(8 * b * l * cdim),
                                    dtype="<f8").reshape(b, l, cdim).copy()
        out.append(Batch(tokens=tokens.astype(np.int64),
                         patches=patches,
                         mask=ModalityMask(ids.astype(np.int64), nm),
                         targets=targets.astype(np.int64)))
    return out


def save_batches(path, batches: list[Batch]) -> None:
    with open(path, "wb") as fp:
        write_batches(fp, batches)


def load_batches(path) -> list[Batch]:
    with open(path, "rb") as fp:
        return read_batches(fp)
