"""Command-line surface: train, ablate, analyze, gen-data, flops.

Exit codes: 0 success, 2 configuration error, 3 numerical abort,
4 analysis incompatibility. The default output root is $MODALMAMBA_OUT
(falling back to ./runs); every run directory holds exactly one
manifest.json from which the whole run is reproducible.
"""

from __future__ import annotations

import argparse
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, plot
from .analysis import (AnalysisError, LossCurve, enumerate_sparsity_configs,
                       final_average_loss, flops_per_token_breakdown,
                       loss_match, modality_token_flops, performance_gain,
                       render_ablation_table, sparsity_label,
                       write_ablation_csv)
from .config import (MANIFEST_NAME, RunConfig, make_manifest, read_manifest,
                     resolve, resolve_raw, write_manifest)
from .data import gen_batch, save_batches
from .metrics import MetricsLog, read_metrics_csv
from .model import ConfigError, build_model, load_checkpoint, save_checkpoint
from .trainer import NumericsError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ANALYSIS = 4


def output_root() -> Path:
    return Path(os.environ.get("MODALMAMBA_OUT", "runs"))


def _run_dir_for(args, rc: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    stem = Path(args.config).stem if args.config else "run"
    return output_root() / f"{stem}-seed{rc.seed}"


def _load_run_config(args) -> RunConfig:
    config = Path(args.config) if args.config else None
    if config is None:
        raise ConfigError("a config file path is required")
    raw = resolve_raw(config, args.set or [])
    if getattr(args, "steps", None) is not None:
        raw["optim"]["total_steps"] = args.steps
    return resolve(raw)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    run_dir = _run_dir_for(args, rc)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir, make_manifest(rc.raw, rc.seed, run_dir))

    model = build_model(rc.model, seed=rc.seed)
    if args.init_from:
        load_checkpoint(model, args.init_from)
    log = train(model, rc.data, rc.objective, rc.optim,
                lambda_ddpm=rc.lambda_ddpm, diffusion_steps=rc.diffusion_steps,
                chunk_size=rc.chunk_size, record_timing=args.timing,
                abort_dir=run_dir,
                extra_metadata={"sparsity": list(rc.model.sparsity.flags())})
    log.write_csv(run_dir / "metrics.csv")
    log.write_json(run_dir / "metrics.json")
    save_checkpoint(model, run_dir / "checkpoint.npz")

    print(f"run directory: {run_dir}")
    if log.rows:
        final = log.rows[-1]
        for name in log.modalities:
            loss = final.losses.get(name)
            print(f"final {name} loss: " + (f"{loss:.6f}" if loss is not None else "n/a"))
        print(f"final total loss: {final.total:.6f}")
        print(f"cumulative train FLOPs: {final.cum_flops}")
    else:
        print("no steps requested; wrote manifest and empty metrics")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _ablation_run(payload) -> float:
    raw, flags, seed = payload
    from .config import apply_overrides

    names = ("in_proj", "x_proj", "dt_proj", "out_proj")
    sets = [f"model.sparsity.{n}={'true' if f else 'false'}"
            for n, f in zip(names, flags)]
    sets.append(f"run.seed={seed}")
    rc = resolve(apply_overrides(raw, sets))
    model = build_model(rc.model, seed=rc.seed)
    log = train(model, rc.data, rc.objective, rc.optim,
                lambda_ddpm=rc.lambda_ddpm, diffusion_steps=rc.diffusion_steps,
                chunk_size=rc.chunk_size)
    return final_average_loss(log, rc.tail_frac)


def cmd_ablate(args) -> int:
    rc = _load_run_config(args)
    run_dir = _run_dir_for(args, rc)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir, make_manifest(rc.raw, rc.seed, run_dir))

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [rc.seed]
    configs = enumerate_sparsity_configs()
    payloads = [(rc.raw, sp.flags(), seed) for sp in configs for seed in seeds]
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            flat = pool.map(_ablation_run, payloads)
    else:
        flat = [_ablation_run(p) for p in payloads]
    per_config = [flat[i * len(seeds):(i + 1) * len(seeds)] for i in range(len(configs))]

    results = analysis.assemble_ablation(configs, per_config)
    write_ablation_csv(results, run_dir / "ablation.csv")
    table = render_ablation_table(results)
    with open(run_dir / "ablation.txt", "w") as fp:
        fp.write(table + "\n")
    print(table)
    print(f"report written to {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _load_metrics(run_dir: Path) -> MetricsLog:
    csv_path = Path(run_dir) / "metrics.csv"
    if not csv_path.exists():
        raise AnalysisError(f"no metrics.csv in {run_dir}")
    meta = {}
    if (Path(run_dir) / MANIFEST_NAME).exists():
        meta = {"manifest": read_manifest(run_dir)}
    return read_metrics_csv(csv_path, metadata=meta)


def _check_compatible(base: MetricsLog, cand: MetricsLog) -> None:
    if base.modalities != cand.modalities:
        raise AnalysisError(
            f"runs are not comparable: modalities {base.modalities} vs {cand.modalities}")


def cmd_analyze(args) -> int:
    logs = [_load_metrics(Path(d)) for d in args.run_dirs]
    baseline = logs[0]
    candidates = logs[1:] or [baseline]
    for cand in candidates:
        _check_compatible(baseline, cand)

    keys = [None] + baseline.modalities          # None = total
    if args.mode == "gain":
        # mirrors the results-table layout: Loss pair, Gain %, Relative FLOPs %
        print(f"{'candidate':<24} {'modality':<10} {'base loss':>10} "
              f"{'cand loss':>10} {'gain %':>8} {'rel FLOPs %':>12}")
        for ci, cand in enumerate(candidates):
            label = args.run_dirs[1 + ci] if logs[1:] else args.run_dirs[0]
            for key in keys:
                name = key or "total"
                b = baseline.rows[-1].total if key is None else baseline.rows[-1].losses.get(key)
                c = cand.rows[-1].total if key is None else cand.rows[-1].losses.get(key)
                if b is None or c is None:
                    continue
                bx, by = baseline.curve(key)
                cx, cy = cand.curve(key)
                rel = "n/a"
                if len(bx) >= 2 and len(cx) >= 2:
                    base_curve = LossCurve(bx, by, window=args.window)
                    res = loss_match(base_curve,
                                     LossCurve(cx, cy, window=base_curve.window))
                    rel = f"{res.relative_percent:.2f}" if res.matched else "no match"
                print(f"{label:<24} {name:<10} {b:>10.4f} {c:>10.4f} "
                      f"{performance_gain(b, c):>8.2f} {rel:>12}")
        return EXIT_OK

    key = None if args.modality in (None, "total") else args.modality
    name = key or "total"
    window = args.window
    bx, by = baseline.curve(key)
    base_curve = LossCurve(bx, by, window=window)
    window = base_curve.window
    print(f"{'candidate':<28} {'modality':<10} {'match step':>12} {'relative %':>11}")
    for ci, cand in enumerate(candidates):
        cx, cy = cand.curve(key)
        cand_curve = LossCurve(cx, cy, window=window)
        res = loss_match(base_curve, cand_curve)
        label = args.run_dirs[1 + ci] if logs[1:] else args.run_dirs[0]
        if res.matched:
            print(f"{label:<28} {name:<10} {res.matching_x:>12.1f} "
                  f"{res.relative_percent:>11.2f}")
        else:
            print(f"{label:<28} {name:<10} {'no match':>12} "
                  f"(best {res.candidate_best:.4f} vs target {res.target:.4f})")
        if args.plot:
            curves = [("baseline", bx, base_curve.smoothed().tolist()),
                      (f"candidate {ci}", cx, cand_curve.smoothed().tolist())]
            marker = (res.matching_x, res.target) if res.matched else None
            plot.save_svg(args.plot, plot.render_curves(
                curves, title=f"{name} loss matching (window {window})",
                marker=marker))
            print(f"plot written to {args.plot}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-data / flops
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    rc = _load_run_config(args)
    batches = [gen_batch(rc.data, rc.seed, step) for step in range(1, args.batches + 1)]
    out = Path(args.out or "batches.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_batches(out, batches)
    print(f"wrote {len(batches)} batches "
          f"({rc.data.batch_size}x{rc.data.sequence_length} tokens each) to {out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    rc = _load_run_config(args)
    cfg = rc.model
    breakdown = flops_per_token_breakdown(cfg)
    print(f"forward FLOPs per token ({cfg.layers} layers, f={cfg.f}, d={cfg.d}, "
          f"n={cfg.n}, r={cfg.dt_rank}, k={cfg.k})")
    for name, v in breakdown.items():
        print(f"  {name:<16} {v:>12}")
    for name in cfg.modalities:
        print(f"  head[{name}]{'':<{max(0, 10 - len(name))}} "
              f"{modality_token_flops(cfg, name):>12}")
    print(f"  total (uniform modality mix): {analysis.flops_per_token(cfg):.1f}")
    print(f"  convention: {analysis.FLOPS_CONVENTION}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modalmamba",
                                description="modality-routed SSM training and analysis")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_opts(sp):
        sp.add_argument("config", help="TOML config file")
        sp.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                        help="override a config value")
        sp.add_argument("--out", help="output directory (default under $MODALMAMBA_OUT)")

    t = sub.add_parser("train", help="run one training job")
    add_config_opts(t)
    t.add_argument("--steps", type=int, help="override optim.total_steps")
    t.add_argument("--init-from", dest="init_from",
                   help="load a checkpoint.npz before training (resume)")
    t.add_argument("--timing", action="store_true",
                   help="record wall-clock seconds in metrics (breaks byte-level "
                        "reproducibility of the CSV)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train all 16 decoupling configurations")
    add_config_opts(a)
    a.add_argument("--seeds", help="comma-separated seeds (default: run.seed)")
    a.add_argument("--steps", type=int, help="override optim.total_steps")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.set_defaults(func=cmd_ablate)

    n = sub.add_parser("analyze", help="compare run directories")
    n.add_argument("run_dirs", nargs="+", help="baseline first, then candidates")
    n.add_argument("--mode", choices=("gain", "match"), default="gain")
    n.add_argument("--modality", help="modality for match mode (default total)")
    n.add_argument("--window", type=int, default=0,
                   help="smoothing window (0 = 2%% of points)")
    n.add_argument("--plot", help="write an SVG of the matched curves here")
    n.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gen-data", help="export fixture batches")
    add_config_opts(g)
    g.add_argument("--batches", type=int, default=4)
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("flops", help="print the per-token FLOPs breakdown")
    add_config_opts(f)
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AnalysisError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
