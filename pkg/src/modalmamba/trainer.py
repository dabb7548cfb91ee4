"""Deterministic training loop: AdamW with decoupled weight decay, linear
warmup + cosine decay, global-norm gradient clipping, per-modality loss rows
and cumulative FLOPs in every metrics row.

A run is a pure function of (model seed, configs): batches come from
(data config, seed, step), diffusion noise from (seed, step), and all
arithmetic is plain numpy, so two identical invocations produce identical
metrics files.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import analysis, tensor as T
from .data import Batch, DataConfig, gen_batch
from .metrics import MetricsLog, StepRow
from .model import ConfigError, Model, forward_diffusion_path, forward_lm, save_checkpoint
from .objectives import (DiffusionSchedule, LossBreakdown, autoregressive_loss,
                         ddpm_loss, ddpm_noise)
from .tensor import Tensor

OBJECTIVES = ("uniform", "transfusion")


class NumericsError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = -1              # -1 -> 2% of total_steps
    total_steps: int = 1000
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps >= 0:
            return self.warmup_steps
        return round(0.02 * self.total_steps)

    def lr_at(self, step: int) -> float:
        """1-based step; linear warmup then cosine decay to zero."""
        w = self.effective_warmup
        if w > 0 and step <= w:
            return self.lr * step / w
        span = self.total_steps - w
        if span <= 0:
            return self.lr
        frac = (step - w) / span
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))

    def with_seed(self, seed: int) -> "OptimConfig":
        return replace(self, seed=seed)

    def with_steps(self, total_steps: int) -> "OptimConfig":
        return replace(self, total_steps=total_steps)


class AdamState:
    def __init__(self, params: Sequence[Tensor]) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
               state: AdamState, cfg: OptimConfig, step: int,
               lr: Optional[float] = None) -> None:
    """One decoupled-weight-decay update with bias correction, in place.

    `step` is 1-based. Raises on non-finite gradients; clipping runs before
    this in the training loop.
    """
    if len(params) != len(grads):
        raise T.ShapeError(f"{len(params)} params vs {len(grads)} grads")
    lr_t = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise T.ShapeError(f"grad shape {g.shape} != param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError("non-finite gradient reached the optimizer")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr_t * update


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place when their global norm exceeds the bound;
    a norm at or under the bound leaves them bit-identical."""
    sq = sum(float((g * g).sum()) for g in grads)
    norm = math.sqrt(sq)
    if math.isfinite(norm) and max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# objective application
# ---------------------------------------------------------------------------


def _check_compat(model: Model, data_cfg: DataConfig) -> None:
    if model.cfg.modalities != data_cfg.names:
        raise ConfigError(
            f"model modalities {model.cfg.modalities} != data modalities {data_cfg.names}")
    for spec in data_cfg.modalities:
        if spec.kind == "discrete":
            v = model.cfg.vocab_sizes.get(spec.name)
            if v is None or v < spec.vocab:
                raise ConfigError(
                    f"modality {spec.name!r}: model vocab {v} < data vocab {spec.vocab}")
        else:
            if model.cfg.continuous_dim != spec.dim:
                raise ConfigError(
                    f"modality {spec.name!r}: model continuous_dim "
                    f"{model.cfg.continuous_dim} != data dim {spec.dim}")


def _image_runs(row_ids: np.ndarray, cont_id: int) -> list[tuple[int, int]]:
    runs = []
    in_run = False
    for t, v in enumerate(row_ids):
        if v == cont_id and not in_run:
            start, in_run = t, True
        elif v != cont_id and in_run:
            runs.append((start, t))
            in_run = False
    if in_run:
        runs.append((start, len(row_ids)))
    return runs


def _transfusion_losses(model: Model, batch: Batch, schedule: DiffusionSchedule,
                        lam: float, rng: np.random.Generator,
                        chunk_size: Optional[int]):
    cfg = model.cfg
    cont_name = cfg.continuous_modalities[0]
    cont_id = cfg.modality_index(cont_name)
    ids = batch.mask.ids
    noised = np.zeros_like(batch.patches)
    eps_true = np.zeros_like(batch.patches)
    timesteps = np.zeros(ids.shape, dtype=np.int64)
    for i in range(ids.shape[0]):
        for start, stop in _image_runs(ids[i], cont_id):
            t = int(rng.integers(1, schedule.total_steps + 1))
            x_t, eps = ddpm_noise(batch.patches[i, start:stop], t, schedule, rng)
            noised[i, start:stop] = x_t
            eps_true[i, start:stop] = eps
            timesteps[i, start:stop] = t

    out = forward_diffusion_path(model, batch.tokens, noised, timesteps,
                                 batch.mask, chunk_size=chunk_size)
    lm_bd = autoregressive_loss(out.lm, batch.targets, batch.mask)
    per_modality = dict(lm_bd.per_modality)

    terms = [lm_bd.tensor] if lm_bd.tensor is not None else []
    n_patches = int(out.patch_positions.size)
    if n_patches:
        flat_eps = eps_true.reshape(-1, cfg.continuous_dim)[out.patch_positions]
        dd = ddpm_loss(out.eps_hat, flat_eps)
        per_modality[cont_name] = (dd.item(), n_patches)
        terms.append(T.scale(dd, lam))
    else:
        per_modality[cont_name] = (None, 0)
    if not terms:
        raise ConfigError("batch contains neither text targets nor patches")
    loss_t = terms[0]
    for extra in terms[1:]:
        loss_t = T.add(loss_t, extra)

    bd = LossBreakdown(per_modality=per_modality, total=loss_t.item(),
                       lambda_weight=lam, continuous=(cont_name,), tensor=loss_t)
    losses: dict[str, Optional[float]] = {name: None for name in cfg.modalities}
    losses.update((k, v) for k, (v, _) in bd.per_modality.items())
    return loss_t, losses, bd.total


def _uniform_losses(model: Model, batch: Batch, chunk_size: Optional[int]):
    out = forward_lm(model, batch.tokens, batch.mask, chunk_size=chunk_size)
    bd = autoregressive_loss(out, batch.targets, batch.mask)
    losses: dict[str, Optional[float]] = {name: None for name in model.cfg.modalities}
    losses.update((k, v) for k, (v, _) in bd.per_modality.items())
    return bd.tensor, losses, bd.total


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def train(model: Model, data_cfg: DataConfig, objective: str,
          optim_cfg: OptimConfig,
          hooks: Sequence[Callable[[int, Model, StepRow], None]] = (),
          lambda_ddpm: float = 5.0, diffusion_steps: int = 1000,
          chunk_size: Optional[int] = None,
          record_timing: bool = False,
          abort_dir: Optional[Path] = None,
          extra_metadata: Optional[dict] = None) -> MetricsLog:
    """Run `optim_cfg.total_steps` steps and return the metrics log.

    On a non-finite loss or gradient the last good parameters and the
    offending batch key are dumped to `abort_dir` (when given) and
    NumericsError is raised.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    _check_compat(model, data_cfg)
    if objective == "transfusion" and not model.cfg.continuous_modalities:
        raise ConfigError("transfusion objective needs a continuous modality")

    metadata = {
        "objective": objective,
        "modalities": list(data_cfg.names),
        "seed": optim_cfg.seed,
        "total_steps": optim_cfg.total_steps,
        "lambda_ddpm": lambda_ddpm if objective == "transfusion" else None,
        "flops_convention": analysis.FLOPS_CONVENTION,
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    log = MetricsLog(metadata=metadata)

    params = list(model.named_parameters().values())
    state = AdamState(params)
    schedule = DiffusionSchedule(diffusion_steps) if objective == "transfusion" else None

    cum_flops = 0
    start = time.perf_counter()
    for step in range(1, optim_cfg.total_steps + 1):
        batch = gen_batch(data_cfg, optim_cfg.seed, step)
        tape = T.GradientTape()
        model.watch_all(tape)

        if objective == "uniform":
            loss_t, losses, total = _uniform_losses(model, batch, chunk_size)
        else:
            noise_rng = np.random.default_rng([optim_cfg.seed, 7243, step])
            loss_t, losses, total = _transfusion_losses(
                model, batch, schedule, lambda_ddpm, noise_rng, chunk_size)

        if not math.isfinite(total):
            _dump_abort(model, abort_dir, step, optim_cfg.seed)
            raise NumericsError(
                f"non-finite loss at step {step} (batch key seed={optim_cfg.seed}, step={step})")

        T.backward(tape, loss_t)
        grads = [tape.grad(p) for p in params]
        norm = clip_global_norm(grads, optim_cfg.grad_clip_norm)
        if not math.isfinite(norm):
            _dump_abort(model, abort_dir, step, optim_cfg.seed)
            raise NumericsError(
                f"non-finite gradient norm at step {step} "
                f"(batch key seed={optim_cfg.seed}, step={step})")
        adamw_step(params, grads, state, optim_cfg, step, lr=optim_cfg.lr_at(step))

        counts = {name: int(c) for name, c in
                  zip(model.cfg.modalities, batch.mask.counts())}
        cum_flops += analysis.train_step_flops(model.cfg, counts)
        row = StepRow(step=step, losses=losses, total=total, cum_flops=cum_flops,
                      seconds=(time.perf_counter() - start) if record_timing else 0.0)
        log.append(row)
        for hook in hooks:
            hook(step, model, row)
    return log


def _dump_abort(model: Model, abort_dir: Optional[Path], step: int, seed: int) -> None:
    if abort_dir is None:
        return
    abort_dir = Path(abort_dir)
    abort_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, abort_dir / "last_good.npz")
    with open(abort_dir / "abort.json", "w") as fp:
        json.dump({"step": step, "batch_seed": seed,
                   "note": "parameters are from before the failing update"}, fp)
        fp.write("\n")
