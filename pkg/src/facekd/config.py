"""Flat dotted-key configuration files; one file fully describes a run."""

from __future__ import annotations

from pathlib import Path


class UsageError(ValueError):
    """Raised for unknown keys or malformed config/CLI input."""


DEFAULTS = {
    # synthetic dataset
    "data.image_size": 32,
    "data.identities": 20,
    "data.samples_per_identity": 50,
    "data.flip_prob": 0.5,
    "data.dense_landmarks": 26,
    "data.seed": 0,
    "data.eval_per_identity": 10,
    # teacher backbone
    "teacher.layers": 4,
    "teacher.window": 4,
    "teacher.heads": 2,
    "teacher.patch": 4,
    "teacher.t": 25,
    "teacher.merges": 1,
    "teacher.keep_final_prompts": False,
    "teacher.frozen": True,
    # student backbone
    "student.strides": "2,2,2",
    # shared embedding width
    "model.dim": 32,
    # URFM / positional encoding
    "urfm.L": 49,
    "urfm.head_heads": 2,
    "pe.mode": "SD",
    "pe.alpha": 4.0,
    "pe.beta": 16.0,
    "pe.gamma": -1.0,  # negative: use the grid-diagonal/2 default
    # losses
    "loss.lambda_cls": 1.0,
    "loss.lambda_attn": 1.0,
    "loss.lambda_feat": 1.0,
    "loss.scale": 64.0,
    "loss.margin": 0.5,
    # method preset: baseline | asa | apt | full
    "method": "full",
    # optimizer
    "opt.peak_lr": 0.05,
    "opt.momentum": 0.9,
    "opt.weight_decay": 5e-4,
    "opt.warmup_epochs": 4,
    "opt.total_epochs": 20,
    "opt.batch_size": 32,
    "opt.clip_norm": 5.0,
    # teacher pretraining
    "pretrain.peak_lr": 0.05,
    "pretrain.warmup_epochs": 2,
    "pretrain.total_epochs": 10,
    # analysis
    "perf.samples": 64,
    "seed": 0,
}


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str, base: dict | None = None) -> dict:
    cfg = dict(DEFAULTS if base is None else base)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise UsageError(f"line {lineno}: unknown config key {key!r}")
        cfg[key] = _parse_value(raw)
    return cfg


def load_config(path=None, overrides=None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), base=cfg)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(raw)
    return cfg


def serialize_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        lines.append(f"{key}={cfg[key]}")
    return "\n".join(lines) + "\n"


def strides_of(cfg: dict) -> tuple:
    raw = cfg["student.strides"]
    if isinstance(raw, int):
        return (raw,)
    return tuple(int(s) for s in str(raw).split(","))
