"""Full sequence model: embeddings, pre-norm residual block stack, heads.

Discrete modalities get an embedding table and their own LM head; an optional
continuous modality enters through a patch projection (plus an additive
sinusoidal timestep embedding on the noise-prediction path) and exits through
a noise head. Decoupled projection copies are initialized identically, so a
freshly built model matches the all-shared model bit for bit at step 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .block import (BlockDims, DISCRETIZATION_MODES, MoMBlockParams,
                    SparsityConfig, mom_block_forward)
from .routing import ModalityMask, RoutedWeights, modality_partition
from .tensor import Tensor


class ConfigError(ValueError):
    """A model/run configuration field is invalid; the message names it."""


@dataclass(frozen=True)
class ModelConfig:
    f: int
    layers: int
    modalities: tuple[str, ...]
    vocab_sizes: dict[str, int]                 # discrete modalities only
    continuous_dim: int = 0                     # patch width of the continuous modality
    n: int = 16
    r: int = 0                                  # 0 -> ceil(f / 16)
    k: int = 4
    expand: int = 2
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    discretization: str = "zoh_exp"
    per_modality_norm: bool = False
    init_std: float = 0.02
    dtype: str = "float64"
    preset_name: Optional[str] = None

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.f < 1:
            raise ConfigError(f"f must be >= 1, got {self.f}")
        if not self.modalities:
            raise ConfigError("modalities: at least one modality must be declared")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"modalities must be unique, got {self.modalities}")
        for name, v in self.vocab_sizes.items():
            if name not in self.modalities:
                raise ConfigError(f"vocab_sizes: unknown modality {name!r}")
            if v < 2:
                raise ConfigError(f"vocab_sizes[{name!r}] must be >= 2, got {v}")
        cont = self.continuous_modalities
        if len(cont) > 1:
            raise ConfigError(f"at most one continuous modality supported, got {cont}")
        if cont and self.continuous_dim < 1:
            raise ConfigError(
                f"continuous_dim must be positive for continuous modality {cont[0]!r}")
        if self.discretization not in DISCRETIZATION_MODES:
            raise ConfigError(
                f"discretization must be one of {DISCRETIZATION_MODES}, got {self.discretization!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        for name in ("n", "k", "expand"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def discrete_modalities(self) -> tuple[str, ...]:
        return tuple(m for m in self.modalities if m in self.vocab_sizes)

    @property
    def continuous_modalities(self) -> tuple[str, ...]:
        return tuple(m for m in self.modalities if m not in self.vocab_sizes)

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def d(self) -> int:
        return self.expand * self.f

    @property
    def dt_rank(self) -> int:
        return self.r if self.r > 0 else max(1, math.ceil(self.f / 16))

    def dims(self) -> BlockDims:
        return BlockDims(f=self.f, d=self.d, n=self.n, r=self.dt_rank, k=self.k)

    def modality_index(self, name: str) -> int:
        return self.modalities.index(name)

    def with_sparsity(self, sparsity: SparsityConfig) -> "ModelConfig":
        return replace(self, sparsity=sparsity)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class Model:
    cfg: ModelConfig
    embeddings: dict[str, Tensor]
    patch_in: Optional[Tensor]
    blocks: list[MoMBlockParams]
    norms: list[list[Tensor]]              # per-layer gains, 1 or num_modalities each
    final_norm: list[Tensor]
    lm_heads: dict[str, Tensor]
    noise_head: Optional[Tensor]

    def named_parameters(self) -> dict[str, Tensor]:
        """Flat checkpoint view: 'layer.{i}.{proj}.{modality-or-shared}' keys."""

        def slot(rw: RoutedWeights, m: int) -> str:
            return "shared" if rw.shared else self.cfg.modalities[m]

        out: dict[str, Tensor] = {}
        for name, e in self.embeddings.items():
            out[f"embed.{name}"] = e
        if self.patch_in is not None:
            out["patch_in"] = self.patch_in
        for i, (blk, gains) in enumerate(zip(self.blocks, self.norms)):
            for proj_name in ("in_proj", "x_proj", "dt_proj", "out_proj"):
                rw: RoutedWeights = getattr(blk, proj_name)
                for m, w in enumerate(rw.weights):
                    out[f"layer.{i}.{proj_name}.{slot(rw, m)}"] = w
            for m, bias in enumerate(blk.dt_proj.biases):
                out[f"layer.{i}.dt_bias.{slot(blk.dt_proj, m)}"] = bias
            out[f"layer.{i}.conv"] = blk.conv_kernel
            out[f"layer.{i}.A"] = blk.a_matrix
            for m, g in enumerate(gains):
                tag = "shared" if len(gains) == 1 else self.cfg.modalities[m]
                out[f"layer.{i}.norm.{tag}"] = g
        for m, g in enumerate(self.final_norm):
            tag = "shared" if len(self.final_norm) == 1 else self.cfg.modalities[m]
            out[f"final_norm.{tag}"] = g
        for name, h in self.lm_heads.items():
            out[f"head.{name}"] = h
        if self.noise_head is not None:
            out["noise_head"] = self.noise_head
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def watch_all(self, tape: T.GradientTape) -> None:
        for t in self.named_parameters().values():
            tape.watch(t)


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    # log(exp(y) - 1), stable for the small y we draw
    return np.log(np.expm1(y))


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic initialization; decoupled copies start identical.

    Embeddings, projections and heads draw N(0, init_std^2); the conv kernel
    draws U(-1/sqrt(k), 1/sqrt(k)); A is the fixed real-diagonal ramp
    -(s+1); the dt bias is set so softplus(bias) is log-uniform in
    [1e-3, 1e-1]. The draw sequence never depends on the sparsity config.
    """
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype()
    dims = cfg.dims()
    std = cfg.init_std

    def normal(shape):
        return rng.standard_normal(shape).astype(dt) * std

    def routed(shape, decoupled: bool) -> RoutedWeights:
        base = normal(shape)
        copies = cfg.num_modalities if decoupled else 1
        return RoutedWeights([Tensor(base.copy()) for _ in range(copies)])

    embeddings = {m: Tensor(normal((cfg.vocab_sizes[m], cfg.f)))
                  for m in cfg.discrete_modalities}
    patch_in = (Tensor(normal((cfg.continuous_dim, cfg.f)))
                if cfg.continuous_modalities else None)

    blocks: list[MoMBlockParams] = []
    norms: list[list[Tensor]] = []
    s = cfg.sparsity
    for _ in range(cfg.layers):
        in_proj = routed((dims.f, 2 * dims.d), s.decouple_in_proj)
        x_proj = routed((dims.d, dims.r + 2 * dims.n), s.decouple_x_proj)

        dt_w = normal((dims.r, dims.d))
        dt_init = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=dims.d))
        dt_b = _softplus_inverse(dt_init).astype(dt)
        copies = cfg.num_modalities if s.decouple_dt_proj else 1
        dt_proj = RoutedWeights([Tensor(dt_w.copy()) for _ in range(copies)],
                                [Tensor(dt_b.copy()) for _ in range(copies)])

        out_proj = routed((dims.d, dims.f), s.decouple_out_proj)
        conv = Tensor(rng.uniform(-1.0, 1.0, size=(dims.d, dims.k)).astype(dt)
                      / math.sqrt(dims.k))
        a_matrix = Tensor((-(np.arange(dims.n, dtype=dt) + 1.0)
                           * np.ones((dims.d, 1), dtype=dt)))
        blocks.append(MoMBlockParams(dims=dims, sparsity=s, in_proj=in_proj,
                                     x_proj=x_proj, dt_proj=dt_proj,
                                     out_proj=out_proj, conv_kernel=conv,
                                     a_matrix=a_matrix))
        n_gains = cfg.num_modalities if cfg.per_modality_norm else 1
        norms.append([Tensor(np.ones(cfg.f, dtype=dt)) for _ in range(n_gains)])

    n_gains = cfg.num_modalities if cfg.per_modality_norm else 1
    final_norm = [Tensor(np.ones(cfg.f, dtype=dt)) for _ in range(n_gains)]
    lm_heads = {m: Tensor(normal((cfg.f, cfg.vocab_sizes[m])))
                for m in cfg.discrete_modalities}
    noise_head = (Tensor(normal((cfg.f, cfg.continuous_dim)))
                  if cfg.continuous_modalities else None)

    return Model(cfg=cfg, embeddings=embeddings, patch_in=patch_in, blocks=blocks,
                 norms=norms, final_norm=final_norm, lm_heads=lm_heads,
                 noise_head=noise_head)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _routed_rmsnorm(x: Tensor, gains: list[Tensor], mask: ModalityMask) -> Tensor:
    if len(gains) == 1:
        return T.rmsnorm(x, gains[0])
    b, l, f = x.shape
    x2 = T.reshape(x, (b * l, f))
    pieces = []
    for m, idx in enumerate(modality_partition(mask)):
        if idx.size == 0:
            continue
        pieces.append(T.scatter_rows(T.rmsnorm(T.gather_rows(x2, idx), gains[m]),
                                     idx, b * l))
    acc = pieces[0]
    for p in pieces[1:]:
        acc = T.add(acc, p)
    return T.reshape(acc, (b, l, f))


def backbone(model: Model, x: Tensor, mask: ModalityMask,
             chunk_size: Optional[int] = None) -> Tensor:
    """Pre-norm residual stack, then the final norm."""
    for blk, gains in zip(model.blocks, model.norms):
        h = mom_block_forward(_routed_rmsnorm(x, gains, mask), blk, mask,
                              mode=model.cfg.discretization, chunk_size=chunk_size)
        x = T.add(x, h)
    return _routed_rmsnorm(x, model.final_norm, mask)


def _validate_tokens(cfg: ModelConfig, tokens: np.ndarray, mask: ModalityMask) -> None:
    flat = tokens.reshape(-1)
    for m, idx in enumerate(modality_partition(mask)):
        name = cfg.modalities[m]
        if name not in cfg.vocab_sizes or idx.size == 0:
            continue
        ids = flat[idx]
        v = cfg.vocab_sizes[name]
        bad = np.flatnonzero((ids < 0) | (ids >= v))
        if bad.size:
            pos = int(idx[bad[0]])
            raise T.ValidationError(
                f"token id {int(flat[pos])} out of range for modality {name!r} "
                f"(vocab {v}) at position (b={pos // mask.length}, t={pos % mask.length})")


def _embed_discrete(model: Model, tokens: np.ndarray, mask: ModalityMask) -> Tensor:
    cfg = model.cfg
    total = mask.batch * mask.length
    flat = tokens.reshape(-1)
    acc: Optional[Tensor] = None
    for m, idx in enumerate(modality_partition(mask)):
        name = cfg.modalities[m]
        if name not in cfg.vocab_sizes or idx.size == 0:
            continue
        rows = T.embedding(model.embeddings[name], flat[idx])
        piece = T.scatter_rows(rows, idx, total)
        acc = piece if acc is None else T.add(acc, piece)
    if acc is None:
        acc = Tensor(np.zeros((total, cfg.f), dtype=cfg.np_dtype()))
    return acc


@dataclass
class LmOutput:
    """Per-modality logits, rows in flat (b*l) token order via `positions`."""

    mask: ModalityMask
    positions: dict[str, np.ndarray]
    logits: dict[str, Tensor]

    def dense_logits(self, name: str) -> np.ndarray:
        """[b, l, V] view; requires the whole mask to be this modality."""
        idx = self.positions[name]
        b, l = self.mask.batch, self.mask.length
        if idx.size != b * l:
            raise T.UsageError(f"dense_logits: modality {name!r} does not cover every position")
        v = self.logits[name].shape[1]
        out = np.empty((b * l, v))
        out[idx] = self.logits[name].data
        return out.reshape(b, l, v)


def forward_lm(model: Model, tokens: np.ndarray, mask: ModalityMask,
               chunk_size: Optional[int] = None) -> LmOutput:
    """Next-token logits for every discrete position, each over its own vocabulary."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    if tokens.shape != (mask.batch, mask.length):
        raise T.ShapeError(f"tokens shape {tokens.shape} != mask {(mask.batch, mask.length)}")
    _validate_tokens(cfg, tokens, mask)

    x = T.reshape(_embed_discrete(model, tokens, mask),
                  (mask.batch, mask.length, cfg.f))
    h = backbone(model, x, mask, chunk_size=chunk_size)
    h2 = T.reshape(h, (mask.batch * mask.length, cfg.f))

    positions: dict[str, np.ndarray] = {}
    logits: dict[str, Tensor] = {}
    for m, idx in enumerate(modality_partition(mask)):
        name = cfg.modalities[m]
        if name not in cfg.vocab_sizes or idx.size == 0:
            continue
        positions[name] = idx
        logits[name] = T.linear(T.gather_rows(h2, idx), model.lm_heads[name],
                                flop_bucket="head")
    return LmOutput(mask=mask, positions=positions, logits=logits)


def timestep_embedding(t: np.ndarray, f: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape [len(t), f]."""
    half = f // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.zeros((len(t), f))
    emb[:, :half] = np.sin(args)
    emb[:, half:2 * half] = np.cos(args)
    return emb.astype(dtype)


@dataclass
class DiffusionOutput:
    """Noise prediction at continuous positions plus LM logits elsewhere."""

    mask: ModalityMask
    patch_positions: np.ndarray
    eps_hat: Tensor                    # [num_patches, continuous_dim]
    lm: LmOutput


def forward_diffusion_path(model: Model, tokens: np.ndarray,
                           noised_patches: np.ndarray, timesteps: np.ndarray,
                           mask: ModalityMask,
                           chunk_size: Optional[int] = None) -> DiffusionOutput:
    """One pass over an interleaved sequence with noised patches at image positions.

    `noised_patches` is [b, l, continuous_dim], read only at continuous
    positions; `timesteps` is [b, l] integer, read at the same positions and
    embedded additively. Text positions still produce LM logits.
    """
    cfg = model.cfg
    if not cfg.continuous_modalities:
        raise T.UsageError("model has no continuous modality (continuous_dim = 0)")
    cont_name = cfg.continuous_modalities[0]
    cont_id = cfg.modality_index(cont_name)
    tokens = np.asarray(tokens)
    noised_patches = np.asarray(noised_patches, dtype=cfg.np_dtype())
    b, l = mask.batch, mask.length
    if noised_patches.shape != (b, l, cfg.continuous_dim):
        raise T.ShapeError(
            f"noised_patches shape {noised_patches.shape} != {(b, l, cfg.continuous_dim)}")
    _validate_tokens(cfg, tokens, mask)

    total = b * l
    patch_idx = modality_partition(mask)[cont_id]
    x = _embed_discrete(model, tokens, mask)
    if patch_idx.size:
        rows = Tensor(noised_patches.reshape(total, -1)[patch_idx])
        projected = T.linear(rows, model.patch_in, flop_bucket="patch_in")
        x = T.add(x, T.scatter_rows(projected, patch_idx, total))
        t_emb = np.zeros((total, cfg.f), dtype=cfg.np_dtype())
        t_emb[patch_idx] = timestep_embedding(
            np.asarray(timesteps).reshape(-1)[patch_idx], cfg.f, cfg.np_dtype())
        x = T.add(x, Tensor(t_emb))

    h = backbone(model, T.reshape(x, (b, l, cfg.f)), mask, chunk_size=chunk_size)
    h2 = T.reshape(h, (total, cfg.f))

    eps_hat = T.linear(T.gather_rows(h2, patch_idx), model.noise_head,
                       flop_bucket="noise_head")

    positions: dict[str, np.ndarray] = {}
    logits: dict[str, Tensor] = {}
    for m, idx in enumerate(modality_partition(mask)):
        name = cfg.modalities[m]
        if name not in cfg.vocab_sizes or idx.size == 0:
            continue
        positions[name] = idx
        logits[name] = T.linear(T.gather_rows(h2, idx), model.lm_heads[name],
                                flop_bucket="head")
    lm = LmOutput(mask=mask, positions=positions, logits=logits)
    return DiffusionOutput(mask=mask, patch_positions=patch_idx,
                           eps_hat=eps_hat, lm=lm)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Flat npz container: key 'layer.{i}.{proj}.{modality}' -> array."""
    arrays = {k: t.data for k, t in model.named_parameters().items()}
    np.savez(path, **arrays)


def load_checkpoint(model: Model, path) -> None:
    """Load arrays into an existing model built from the same config."""
    with np.load(path) as ckpt:
        params = model.named_parameters()
        missing = set(params) - set(ckpt.files)
        extra = set(ckpt.files) - set(params)
        if missing or extra:
            raise T.ValidationError(
                f"checkpoint does not match model: missing={sorted(missing)}, "
                f"unexpected={sorted(extra)}")
        for key, t in params.items():
            arr = ckpt[key]
            if arr.shape != t.data.shape:
                raise T.ShapeError(
                    f"checkpoint key {key}: shape {arr.shape} != model {t.data.shape}")
            t.data = arr.astype(t.data.dtype)


# ---------------------------------------------------------------------------
# named presets
# ---------------------------------------------------------------------------

# Full-scale reference configurations, recorded for documentation only;
# CI never trains these. hidden/layers/seq/tokens-per-batch/steps.
REFERENCE_SCALE = {
    "37M": dict(hidden=256, layers=4, seq_len=4096, tokens_per_batch=524288, steps=160_000),
    "94M": dict(hidden=512, layers=8, seq_len=4096, tokens_per_batch=524288, steps=160_000),
    "443M": dict(hidden=1024, layers=24, seq_len=4096, tokens_per_batch=524288, steps=160_000),
    "880M": dict(hidden=1536, layers=24, seq_len=4096, tokens_per_batch=524288, steps=120_000),
    "1.5B": dict(hidden=2048, layers=24, seq_len=4096, tokens_per_batch=524288, steps=120_000),
    "163M": dict(hidden=768, layers=16, seq_len=4096, tokens_per_batch=1_048_576, steps=250_000),
    "760M": dict(hidden=1536, layers=24, seq_len=4096, tokens_per_batch=1_048_576, steps=250_000),
    "1.4B": dict(hidden=2048, layers=24, seq_len=4096, tokens_per_batch=1_048_576, steps=250_000),
}

# Desk-scale shapes mirror the hidden-dim ratios above at f <= 256.
DESK_SHAPES = {
    "37M-shape": (32, 4),
    "94M-shape": (64, 8),
    "443M-shape": (128, 24),
    "880M-shape": (192, 24),
    "1.5B-shape": (256, 24),
    "163M-shape": (96, 16),
    "760M-shape": (192, 24),
    "1.4B-shape": (256, 24),
}


def preset_model_config(name: str, modalities: tuple[str, ...],
                        vocab_sizes: dict[str, int], continuous_dim: int = 0,
                        **overrides) -> ModelConfig:
    if name not in DESK_SHAPES:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(DESK_SHAPES)}")
    f, layers = DESK_SHAPES[name]
    return ModelConfig(f=f, layers=layers, modalities=modalities,
                       vocab_sizes=vocab_sizes, continuous_dim=continuous_dim,
                       preset_name=name, **overrides)
