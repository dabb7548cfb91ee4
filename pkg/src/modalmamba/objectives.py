"""Training objectives: uniform autoregressive loss, DDPM noise prediction
with a cosine schedule, and their lambda-weighted combination.

The forward noising is x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps with
abar from the squared-cosine schedule, clipped at the endpoint so abar_T
stays positive. The noise-prediction loss is plain mean squared error on eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .model import LmOutput
from .routing import ModalityMask
from .tensor import Tensor

ENDPOINT_CLIP = 1e-3


class RangeError(ValueError):
    """Timestep outside [0, T]."""


def cosine_alpha_bar(t: int, total_steps: int) -> float:
    """abar_t = cos^2(min(t/T, 1 - clip) * pi/2); clip keeps abar_T > 0."""
    if not 0 <= t <= total_steps:
        raise RangeError(f"timestep {t} outside [0, {total_steps}]")
    frac = min(t / total_steps, 1.0 - ENDPOINT_CLIP)
    return math.cos(frac * math.pi / 2.0) ** 2


@dataclass
class DiffusionSchedule:
    """abar_t for t = 0..T: abar_0 = 1, strictly decreasing, abar_T > 0.

    The raw clipped cosine can go flat on the last grid point when T >=
    1/clip; those entries are nudged down by one part in 1e9 to keep the
    sequence strictly decreasing.
    """

    total_steps: int
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise T.ValidationError(f"total_steps must be >= 1, got {self.total_steps}")
        ab = np.array([cosine_alpha_bar(t, self.total_steps)
                       for t in range(self.total_steps + 1)])
        for t in range(1, len(ab)):
            ab[t] = min(ab[t], ab[t - 1] * (1.0 - 1e-9))
        self.alpha_bar = ab
        assert abs(ab[0] - 1.0) < 1e-12
        assert np.all(np.diff(ab) < 0) and ab[-1] >= 0.0


def forward_noise(x0: np.ndarray, alpha_bar_t: float,
                  eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(abar) x0 + sqrt(1 - abar) eps."""
    return math.sqrt(alpha_bar_t) * x0 + math.sqrt(1.0 - alpha_bar_t) * eps


def ddpm_noise(x0: np.ndarray, t: int, schedule: DiffusionSchedule,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw eps ~ N(0, I) and noise x0 to timestep t. Returns (x_t, eps)."""
    if not 0 <= t <= schedule.total_steps:
        raise RangeError(f"timestep {t} outside [0, {schedule.total_steps}]")
    x0 = np.asarray(x0)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype, copy=False)
    return forward_noise(x0, float(schedule.alpha_bar[t]), eps), eps


def reconstruct_x0(x_t: np.ndarray, eps: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    """Invert the forward noising. Unavailable when abar_t = 0."""
    if alpha_bar_t <= 0.0:
        raise T.UsageError("reconstruction unavailable: alpha_bar is zero at this step")
    return (x_t - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

IGNORE_TARGET = -1


@dataclass
class LossBreakdown:
    """Per-modality (mean loss, token count) plus the combined total.

    A modality absent from the batch reports count 0 and loss None, never 0.
    When `lambda_weight` is set, the modalities named in `continuous` carry a
    noise-prediction loss and enter the total lambda-weighted; everything
    else is token-count weighted. `tensor` carries the differentiable total
    when the inputs were on a tape.
    """

    per_modality: dict[str, tuple[Optional[float], int]]
    total: float
    lambda_weight: Optional[float] = None
    continuous: tuple[str, ...] = ()
    tensor: Optional[Tensor] = None

    def recombined(self) -> float:
        """Recompute the total from the parts."""
        present = {m: (v, c) for m, (v, c) in self.per_modality.items() if c > 0}
        lm = {m: vc for m, vc in present.items() if m not in self.continuous}
        count = sum(c for _, c in lm.values())
        total = sum(v * c for v, c in lm.values()) / count if count else 0.0
        if self.lambda_weight is not None:
            total += self.lambda_weight * sum(
                v for m, (v, _) in present.items() if m in self.continuous)
        return total


def autoregressive_loss(logits: LmOutput, targets: np.ndarray,
                        mask: ModalityMask) -> LossBreakdown:
    """Mean next-token negative log-likelihood per modality.

    `targets` is [b, l]; entries equal to IGNORE_TARGET (final positions and
    modality-segment boundaries) are excluded. Position t is attributed to
    the modality of the mask at t.
    """
    targets = np.asarray(targets)
    if targets.shape != (mask.batch, mask.length):
        raise T.ShapeError(
            f"targets shape {targets.shape} != mask {(mask.batch, mask.length)}")
    flat_targets = targets.reshape(-1)

    per_modality: dict[str, tuple[Optional[float], int]] = {}
    pieces: list[tuple[Tensor, int]] = []
    for name in logits.logits:
        idx = logits.positions[name]
        keep = flat_targets[idx] != IGNORE_TARGET
        count = int(keep.sum())
        if count == 0:
            per_modality[name] = (None, 0)
            continue
        rows = T.gather_rows(logits.logits[name], np.flatnonzero(keep))
        ce = T.cross_entropy_mean(rows, flat_targets[idx][keep])
        per_modality[name] = (ce.item(), count)
        pieces.append((ce, count))

    if not pieces:
        return LossBreakdown(per_modality=per_modality, total=float("nan"), tensor=None)
    total_count = sum(c for _, c in pieces)
    total_t = None
    for ce, c in pieces:
        term = T.scale(ce, c / total_count)
        total_t = term if total_t is None else T.add(total_t, term)
    return LossBreakdown(per_modality=per_modality, total=total_t.item(),
                         tensor=total_t)


def ddpm_loss(eps_hat: Union[Tensor, np.ndarray],
              eps: np.ndarray) -> Tensor:
    """Mean of (eps_hat - eps)^2."""
    if not isinstance(eps_hat, Tensor):
        eps_hat = Tensor(np.asarray(eps_hat))
    return T.mse_mean(eps_hat, np.asarray(eps))


def combined_loss(lm: LossBreakdown, ddpm: float, lam: float) -> float:
    """L = L_LM + lambda * L_DDPM over the discrete-text / continuous split."""
    if lam < 0:
        raise T.ValidationError(f"lambda must be >= 0, got {lam}")
    present = [(v, c) for v, c in lm.per_modality.values() if c > 0]
    count = sum(c for _, c in present)
    lm_mean = sum(v * c for v, c in present) / count if count else 0.0
    return lm_mean + lam * float(ddpm)
