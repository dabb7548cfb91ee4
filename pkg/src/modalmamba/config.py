"""Run configuration: TOML files, dotted-path overrides, and the run manifest.

Every key below is optional and shows its default; `--set section.key=value`
overrides any of them from the CLI.

    [run]
    objective = "uniform"        # uniform | transfusion
    seed = 0
    lambda_ddpm = 5.0            # transfusion loss weight
    diffusion_steps = 1000       # T of the noise schedule
    chunk_size = 0               # 0 = sequential scan, >0 = chunked

    [model]
    preset = ""                  # named desk shape (sets f and layers)
    f = 64
    layers = 2
    n = 16
    r = 0                        # 0 -> ceil(f/16)
    k = 4
    expand = 2
    discretization = "zoh_exp"   # zoh_exp | literal
    per_modality_norm = false
    init_std = 0.02
    dtype = "float64"            # float64 | float32

    [model.sparsity]
    in_proj = false
    x_proj = false
    dt_proj = false
    out_proj = false

    [data]
    preset = "chameleon"         # chameleon | chameleon_speech | transfusion
    sequence_length = 256
    batch_size = 8
    heterogeneity = 1.0
    pattern_seed = 0
    # or fully explicit generator specs:
    # [[data.modalities]] with name/kind/vocab/dim/process/seg_range/...

    [optim]
    lr = 3e-4
    beta1 = 0.9
    beta2 = 0.95
    eps = 1e-8
    weight_decay = 0.1
    warmup_steps = -1            # -1 -> 2% of total_steps
    total_steps = 1000
    grad_clip_norm = 1.0

    [analysis]
    smooth_window = 0            # 0 -> max(1, 2% of points)
    tail_frac = 0.1              # final-loss averaging window

The manifest written into every run directory is the fully resolved config
plus tool version, seed, and output directory; it round-trips losslessly
through JSON.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:                       # Python 3.10
    import tomli as tomllib

from . import __version__
from .block import SparsityConfig
from .data import DATA_PRESETS, DataConfig, ModalitySpec
from .model import DESK_SHAPES, ConfigError, ModelConfig
from .trainer import OptimConfig

MANIFEST_NAME = "manifest.json"

DEFAULT_RAW: dict = {
    "run": {"objective": "uniform", "seed": 0, "lambda_ddpm": 5.0,
            "diffusion_steps": 1000, "chunk_size": 0},
    "model": {"preset": "", "f": 64, "layers": 2, "n": 16, "r": 0, "k": 4,
              "expand": 2, "discretization": "zoh_exp",
              "per_modality_norm": False, "init_std": 0.02, "dtype": "float64",
              "sparsity": {"in_proj": False, "x_proj": False,
                           "dt_proj": False, "out_proj": False}},
    "data": {"preset": "chameleon", "sequence_length": 256, "batch_size": 8,
             "heterogeneity": 1.0, "pattern_seed": 0},
    "analysis": {"smooth_window": 0, "tail_frac": 0.1},
    "optim": {"lr": 3e-4, "beta1": 0.9, "beta2": 0.95, "eps": 1e-8,
              "weight_decay": 0.1, "warmup_steps": -1, "total_steps": 1000,
              "grad_clip_norm": 1.0},
}


def load_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fp:
            return tomllib.load(fp)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} does not parse: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def apply_overrides(raw: dict, sets: list[str]) -> dict:
    """Apply `section.key=value` (arbitrary depth) assignments."""
    out = copy.deepcopy(raw)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        path, _, value = item.partition("=")
        keys = path.strip().split(".")
        if len(keys) < 2:
            raise ConfigError(f"override path {path!r} needs at least section.key")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a scalar")
        node[keys[-1]] = _parse_value(value.strip())
    return out


def resolve_raw(path: Optional[Path], sets: list[str]) -> dict:
    raw = DEFAULT_RAW
    if path is not None:
        raw = _merge(raw, load_toml(path))
    return apply_overrides(raw, sets)


# ---------------------------------------------------------------------------
# raw dict -> dataclasses
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    raw: dict
    objective: str
    seed: int
    lambda_ddpm: float
    diffusion_steps: int
    chunk_size: Optional[int]
    model: ModelConfig
    data: DataConfig
    optim: OptimConfig
    smooth_window: int
    tail_frac: float


def _data_config(raw: dict) -> DataConfig:
    d = raw["data"]
    if "modalities" in d:
        specs = []
        for m in d["modalities"]:
            m = dict(m)
            if "seg_range" in m:
                m["seg_range"] = tuple(m["seg_range"])
            specs.append(ModalitySpec(**m))
        return DataConfig(modalities=tuple(specs),
                          sequence_length=d["sequence_length"],
                          batch_size=d["batch_size"],
                          heterogeneity=d["heterogeneity"],
                          pattern_seed=d["pattern_seed"])
    preset = d.get("preset", "")
    if preset not in DATA_PRESETS:
        raise ConfigError(f"data.preset must be one of {sorted(DATA_PRESETS)} "
                          f"or explicit [[data.modalities]], got {preset!r}")
    cfg = DATA_PRESETS[preset](seq_len=d["sequence_length"],
                               batch_size=d["batch_size"])
    return DataConfig(modalities=cfg.modalities,
                      sequence_length=cfg.sequence_length,
                      batch_size=cfg.batch_size,
                      heterogeneity=d["heterogeneity"],
                      pattern_seed=d["pattern_seed"])


def _model_config(raw: dict, data: DataConfig) -> ModelConfig:
    m = raw["model"]
    f, layers = m["f"], m["layers"]
    preset = m.get("preset", "")
    preset_name = None
    if preset:
        if preset not in DESK_SHAPES:
            raise ConfigError(f"model.preset {preset!r} unknown; "
                              f"available: {sorted(DESK_SHAPES)}")
        f, layers = DESK_SHAPES[preset]
        preset_name = preset
    sp = m["sparsity"]
    sparsity = SparsityConfig(decouple_in_proj=sp["in_proj"],
                              decouple_x_proj=sp["x_proj"],
                              decouple_dt_proj=sp["dt_proj"],
                              decouple_out_proj=sp["out_proj"])
    vocab_sizes = {s.name: s.vocab for s in data.modalities if s.kind == "discrete"}
    return ModelConfig(f=f, layers=layers, modalities=data.names,
                       vocab_sizes=vocab_sizes,
                       continuous_dim=data.continuous_dim(),
                       n=m["n"], r=m["r"], k=m["k"], expand=m["expand"],
                       sparsity=sparsity, discretization=m["discretization"],
                       per_modality_norm=m["per_modality_norm"],
                       init_std=m["init_std"], dtype=m["dtype"],
                       preset_name=preset_name)


def resolve(raw: dict) -> RunConfig:
    for section in ("run", "model", "data", "optim", "analysis"):
        if not isinstance(raw.get(section), dict):
            raise ConfigError(f"config section [{section}] missing or not a table")
    data = _data_config(raw)
    model = _model_config(raw, data)
    o = raw["optim"]
    optim = OptimConfig(lr=o["lr"], betas=(o["beta1"], o["beta2"]), eps=o["eps"],
                        weight_decay=o["weight_decay"],
                        warmup_steps=o["warmup_steps"],
                        total_steps=o["total_steps"],
                        grad_clip_norm=o["grad_clip_norm"],
                        seed=raw["run"]["seed"])
    r = raw["run"]
    if r["objective"] not in ("uniform", "transfusion"):
        raise ConfigError(f"run.objective must be uniform|transfusion, got {r['objective']!r}")
    chunk = int(r.get("chunk_size", 0))
    return RunConfig(raw=raw, objective=r["objective"], seed=int(r["seed"]),
                     lambda_ddpm=float(r["lambda_ddpm"]),
                     diffusion_steps=int(r["diffusion_steps"]),
                     chunk_size=chunk if chunk > 0 else None,
                     model=model, data=data, optim=optim,
                     smooth_window=int(raw["analysis"]["smooth_window"]),
                     tail_frac=float(raw["analysis"]["tail_frac"]))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def make_manifest(raw: dict, seed: int, out_dir: str) -> dict:
    return {"tool_version": __version__, "seed": int(seed),
            "out_dir": str(out_dir), "config": raw}


def write_manifest(run_dir: Path, manifest: dict) -> Path:
    path = Path(run_dir) / MANIFEST_NAME
    with open(path, "w") as fp:
        json.dump(manifest, fp, indent=1, sort_keys=True)
        fp.write("\n")
    return path


def read_manifest(run_dir: Path) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    with open(path) as fp:
        return json.load(fp)
