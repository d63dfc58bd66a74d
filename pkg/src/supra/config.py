"""key = value run configuration files.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .attention import preset
from .data import VOCAB
from .model import ModelConfig
from .train import TrainPlan


class ConfigError(ValueError):
    pass


def _opt_float(s: str):
    return None if s.lower() in ("", "none", "default") else float(s)


def _opt_str(s: str):
    return None if s.lower() in ("", "none", "default") else s


# key: (parser, default, description)
KEYS: dict[str, tuple] = {
    "seed": (int, 0, "seed for init, data order and shuffling"),
    "d_model": (int, 64, "model width"),
    "n_layers": (int, 2, "number of transformer blocks"),
    "n_heads": (int, 4, "attention heads"),
    "d_ff": (int, 256, "MLP hidden width"),
    "max_seq": (int, 256, "packed chunk length (the model sees max_seq - 1 inputs)"),
    "rope_base": (float, 1e4, "rotary base; 1e6 for long-context runs"),
    "attention": (str, "softmax", "preset: softmax | supra | t2r | elu1"),
    "decay": (_opt_str, None, "override decay: none | lightning | retnet"),
    "qk_scale": (_opt_float, None, "key scale; default d_head^-0.5"),
    "dtype": (str, "f32", "training precision: f32 | f64"),
    "total_steps": (int, 500, "optimizer steps"),
    "warmup_steps": (int, 50, "linear warmup steps"),
    "lr_start": (float, 3e-4, "peak learning rate"),
    "lr_end": (float, 1e-5, "final cosine learning rate"),
    "batch_tokens": (int, 8192, "tokens per optimizer step"),
    "grad_clip": (float, 1.0, "global gradient-norm clip; 0 disables"),
    "weight_decay": (float, 0.0, "decoupled weight decay"),
    "freeze": (str, "none", "none | base_frozen | staged"),
    "stage_boundary": (int, 0, "staged: steps that train only new weights"),
    "eval_every": (int, 0, "validation perplexity every N steps; 0 disables"),
    "corpus": (str, "", "text file or directory; empty uses the bundled corpus"),
    "val_fraction": (float, 0.1, "held-out fraction of packed chunks"),
    "val_chunks": (int, 64, "cap on held-out chunks used for evaluation"),
    "out_dir": (str, "runs", "parent directory for run directories"),
}


def defaults() -> dict:
    return {k: v[1] for k, v in KEYS.items()}


def parse_text(text: str, base: dict | None = None) -> dict:
    cfg = dict(base or defaults())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, val)
    return cfg


def set_key(cfg: dict, key: str, val: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg[key] = KEYS[key][0](val)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {val!r}") from e


def load(path: str | Path | None, overrides=()) -> dict:
    cfg = defaults()
    if path:
        try:
            cfg = parse_text(Path(path).read_text(), cfg)
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), v.strip())
    return cfg


def dump(cfg: dict) -> str:
    lines = []
    for k, (_, _, desc) in KEYS.items():
        v = cfg[k]
        lines.append(f"# {desc}")
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def model_config(cfg: dict) -> ModelConfig:
    over = {}
    if cfg["decay"] is not None:
        over["decay"] = cfg["decay"]
    if cfg["qk_scale"] is not None:
        over["qk_scale"] = cfg["qk_scale"]
    try:
        att = preset(cfg["attention"], cfg["d_model"], cfg["n_heads"], cfg["rope_base"], **over)
        return ModelConfig(vocab=VOCAB, d_model=cfg["d_model"], n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
                           d_ff=cfg["d_ff"], attention=att, max_seq=cfg["max_seq"], rope_base=cfg["rope_base"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def train_plan(cfg: dict) -> TrainPlan:
    try:
        return TrainPlan(total_steps=cfg["total_steps"], warmup_steps=cfg["warmup_steps"], lr_start=cfg["lr_start"],
                         lr_end=cfg["lr_end"], batch_tokens=cfg["batch_tokens"], grad_clip=cfg["grad_clip"],
                         weight_decay=cfg["weight_decay"], freeze=cfg["freeze"],
                         stage_boundary=cfg["stage_boundary"], seed=cfg["seed"], eval_every=cfg["eval_every"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def numpy_dtype(cfg: dict):
    if cfg["dtype"] not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {cfg['dtype']!r}")
    return np.float32 if cfg["dtype"] == "f32" else np.float64
