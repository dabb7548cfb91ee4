"""Efficiency arithmetic: FLOPs accounting, performance gain, loss matching,
and the 16-configuration decoupling ablation.

FLOPs convention (also stamped into run metadata): one multiply-add = 2
FLOPs; embedding lookups, normalization, activations and loss arithmetic are
free; the discretize+scan pair costs 3 mul-adds per (d, n) lane per token;
the output gate costs one mul-add per channel per token; training steps cost
3x the forward count (one forward, two forward-equivalents of backward).
Per-token counts are identical for every sparsity configuration because all
modality copies of a projection share one shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .block import SparsityConfig
from .model import ConfigError, ModelConfig

FLOPS_CONVENTION = ("1 mul-add = 2 FLOPs; embedding lookups free; "
                    "discretize+scan = 3 mul-adds per (d,n) lane per token; "
                    "gate = 1 mul-add per channel per token; "
                    "train step = 3x forward")


class AnalysisError(ValueError):
    """Runs cannot be compared (different modalities, missing metrics, ...)."""


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def linear_flops_per_token(f_in: int, f_out: int) -> int:
    return 2 * f_in * f_out


def flops_per_token_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Per-layer and shared per-token FLOPs by bucket; modality-independent part."""
    d, f, n, r, k = cfg.d, cfg.f, cfg.n, cfg.dt_rank, cfg.k
    per_layer = {
        "in_proj": linear_flops_per_token(f, 2 * d),
        "conv": 2 * d * k,
        "x_proj": linear_flops_per_token(d, r + 2 * n),
        "dt_proj": linear_flops_per_token(r, d),
        "discretize+scan": 6 * d * n,
        "gate": 2 * d,
        "out_proj": linear_flops_per_token(d, f),
    }
    return {name: cfg.layers * v for name, v in per_layer.items()}


def modality_token_flops(cfg: ModelConfig, name: str) -> int:
    """Head-side FLOPs for one token of the given modality."""
    if name in cfg.vocab_sizes:
        return linear_flops_per_token(cfg.f, cfg.vocab_sizes[name])
    # continuous token: patch projection in, noise head out
    return (linear_flops_per_token(cfg.continuous_dim, cfg.f)
            + linear_flops_per_token(cfg.f, cfg.continuous_dim))


def flops_per_token(cfg: ModelConfig,
                    mix: Optional[dict[str, float]] = None) -> float:
    """Analytic forward FLOPs per token under a modality mix (uniform default).

    Independent of the sparsity configuration by construction.
    """
    if mix is None:
        mix = {m: 1.0 / cfg.num_modalities for m in cfg.modalities}
    if set(mix) != set(cfg.modalities):
        raise ConfigError(f"mix keys {sorted(mix)} != modalities {sorted(cfg.modalities)}")
    total = float(sum(flops_per_token_breakdown(cfg).values()))
    for name, frac in mix.items():
        total += frac * modality_token_flops(cfg, name)
    return total


def forward_flops_total(cfg: ModelConfig, counts: dict[str, int]) -> int:
    """Exact integer forward FLOPs for a batch with the given per-modality
    token counts."""
    n_tokens = sum(counts.values())
    total = n_tokens * sum(flops_per_token_breakdown(cfg).values())
    for name, c in counts.items():
        total += c * modality_token_flops(cfg, name)
    return int(total)


def train_step_flops(cfg: ModelConfig, counts: dict[str, int]) -> int:
    return 3 * forward_flops_total(cfg, counts)


# ---------------------------------------------------------------------------
# performance gain and loss matching
# ---------------------------------------------------------------------------


def performance_gain(loss_dense: float, loss_mixture: float) -> float:
    """(dense - mixture) / dense * 100."""
    if loss_dense <= 0:
        raise AnalysisError(f"dense loss must be positive, got {loss_dense}")
    return (loss_dense - loss_mixture) / loss_dense * 100.0


def default_smoothing_window(n_points: int) -> int:
    return max(1, round(0.02 * n_points))


@dataclass
class LossCurve:
    """Strictly-increasing x (steps or cumulative FLOPs) against loss."""

    xs: np.ndarray
    ys: np.ndarray
    window: int = 0          # 0 -> max(1, 2% of points)

    def __post_init__(self) -> None:
        self.xs = np.asarray(self.xs, dtype=float)
        self.ys = np.asarray(self.ys, dtype=float)
        if len(self.xs) < 2 or len(self.xs) != len(self.ys):
            raise AnalysisError(
                f"curve needs >= 2 aligned points, got {len(self.xs)}/{len(self.ys)}")
        if not np.all(np.diff(self.xs) > 0):
            raise AnalysisError("curve x values must be strictly increasing")
        if not np.all(np.isfinite(self.ys)):
            raise AnalysisError("curve losses must be finite")
        if self.window == 0:
            self.window = default_smoothing_window(len(self.xs))

    def smoothed(self) -> np.ndarray:
        w = self.window
        if w <= 1:
            return self.ys.copy()
        c = np.concatenate([[0.0], np.cumsum(self.ys)])
        out = np.empty_like(self.ys)
        for i in range(len(self.ys)):
            lo = max(0, i - w + 1)
            out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return out

@dataclass
class MatchResult:
    matched: bool
    target: float
    matching_x: Optional[float]
    relative_percent: Optional[float]
    candidate_best: float


def loss_match(baseline: LossCurve, candidate: LossCurve,
               target: Optional[float] = None) -> MatchResult:
    """First candidate x whose smoothed loss reaches the target (linear
    interpolation between points), as a percentage of the baseline's final x.

    Default target is the baseline's final smoothed loss. When per-step FLOPs
    are identical for both models, the step ratio and the FLOPs ratio agree.
    """
    if baseline.window != candidate.window:
        raise AnalysisError(
            f"curves must share a smoothing window, got {baseline.window} vs {candidate.window}")
    base_sm = baseline.smoothed()
    if target is None:
        target = float(base_sm[-1])
    elif not np.min(base_sm) <= target:
        raise AnalysisError(
            f"baseline never reaches target {target} (best {np.min(base_sm):.6g})")

    cand_sm = candidate.smoothed()
    below = np.flatnonzero(cand_sm <= target)
    if below.size == 0:
        return MatchResult(matched=False, target=target, matching_x=None,
                           relative_percent=None, candidate_best=float(np.min(cand_sm)))
    i = int(below[0])
    if i == 0:
        x_star = float(candidate.xs[0])
    else:
        y0, y1 = cand_sm[i - 1], cand_sm[i]
        x0, x1 = candidate.xs[i - 1], candidate.xs[i]
        x_star = float(x0 + (y0 - target) * (x1 - x0) / (y0 - y1))
    relative = x_star / float(baseline.xs[-1]) * 100.0
    return MatchResult(matched=True, target=target, matching_x=x_star,
                       relative_percent=relative,
                       candidate_best=float(np.min(cand_sm)))


# ---------------------------------------------------------------------------
# the 16-configuration decoupling ablation
# ---------------------------------------------------------------------------

_CIRCLED = ("①", "②", "③", "④")   # 1..4 for in/x/dt/out


def enumerate_sparsity_configs() -> list[SparsityConfig]:
    """All 16 configurations: baseline first, then by combination size."""
    bitmasks = sorted(range(16), key=lambda m: (bin(m).count("1"), m))
    return [SparsityConfig.from_flags(tuple(bool(m >> i & 1) for i in range(4)))
            for m in bitmasks]


def sparsity_label(cfg: SparsityConfig) -> str:
    parts = [_CIRCLED[i] for i, on in enumerate(cfg.flags()) if on]
    return "+".join(parts) if parts else "baseline"


@dataclass
class AblationResult:
    label: str
    sparsity: SparsityConfig
    avg_loss: float
    gain_percent: float
    per_seed_losses: list[float]
    failed: bool = False


def final_average_loss(log, tail_frac: float = 0.1) -> float:
    """Mean total loss over the trailing window (at least one step)."""
    totals = [r.total for r in log.rows]
    if not totals:
        raise AnalysisError("run has no metric rows")
    tail = max(1, round(tail_frac * len(totals)))
    return float(np.mean(totals[-tail:]))


def assemble_ablation(configs: Sequence[SparsityConfig],
                      per_config_losses: Sequence[Optional[Sequence[float]]]
                      ) -> list[AblationResult]:
    """Turn per-seed final losses into the 16-row report; the first entry is
    the all-shared baseline, whose gain is 0 by construction. A None loss
    list marks an aborted configuration."""
    base = per_config_losses[0]
    if base is None:
        raise AnalysisError("baseline run failed; nothing to compare against")
    base_avg = float(np.mean(base))
    out = []
    for sp, per_seed in zip(configs, per_config_losses):
        label = sparsity_label(sp)
        if per_seed is None:
            out.append(AblationResult(label=label, sparsity=sp, avg_loss=float("nan"),
                                      gain_percent=float("nan"), per_seed_losses=[],
                                      failed=True))
            continue
        avg = float(np.mean(per_seed))
        out.append(AblationResult(label=label, sparsity=sp, avg_loss=avg,
                                  gain_percent=performance_gain(base_avg, avg),
                                  per_seed_losses=list(per_seed)))
    return out


def ablation_sweep(model_cfg: ModelConfig, data_cfg, optim_cfg,
                   seeds: Sequence[int], objective: str = "uniform",
                   tail_frac: float = 0.1) -> list[AblationResult]:
    """Train every sparsity configuration on identical seeds and data; report
    the final-window loss and gain versus the all-shared baseline."""
    from .model import build_model
    from .trainer import NumericsError, train

    configs = enumerate_sparsity_configs()
    losses: list[Optional[list[float]]] = []
    for sp in configs:
        per_seed: list[float] = []
        ok = True
        for seed in seeds:
            cfg = model_cfg.with_sparsity(sp)
            model = build_model(cfg, seed=seed)
            try:
                log = train(model, data_cfg, objective,
                            optim_cfg.with_seed(seed))
            except NumericsError:
                ok = False
                break
            per_seed.append(final_average_loss(log, tail_frac))
        losses.append(per_seed if ok else None)
    return assemble_ablation(configs, losses)


def render_ablation_table(results: list[AblationResult]) -> str:
    lines = [f"{'Configuration':<16} {'Avg Training Loss':>18} {'Gain (%)':>10}"]
    for r in results:
        if r.failed:
            lines.append(f"{r.label:<16} {'FAILED':>18} {'--':>10}")
        else:
            lines.append(f"{r.label:<16} {r.avg_loss:>18.4f} {r.gain_percent:>10.2f}")
    return "\n".join(lines)


def write_ablation_csv(results: list[AblationResult], path) -> None:
    import csv

    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["label", "decouple_in_proj", "decouple_x_proj",
                    "decouple_dt_proj", "decouple_out_proj",
                    "avg_loss", "gain_percent", "per_seed_losses", "failed"])
        for r in results:
            flags = r.sparsity.flags()
            w.writerow([r.label, *[int(f) for f in flags],
                        "" if r.failed else format(r.avg_loss, ".6f"),
                        "" if r.failed else format(r.gain_percent, ".2f"),
                        ";".join(format(x, ".6f") for x in r.per_seed_losses),
                        int(r.failed)])
