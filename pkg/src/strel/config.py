"""Sectioned key=value run configuration with a fixed schema."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _float_pair(text: str) -> tuple[float, float]:
    vals = tuple(float(t) for t in text.replace(",", " ").split())
    if len(vals) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return vals


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"{text!r} not one of {', '.join(options)}")
        return text
    return parse


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key(int, 0, "root seed; every component draws from named substreams of it"),
    },
    "data": {
        "num_videos": Key(int, 40, "annotated videos in the train split"),
        "clips_per_video": Key(int, 5, "consecutive clips per video"),
        "val_videos": Key(int, 40, "annotated videos in the val split"),
        "k_videos": Key(int, 0, "Kinetics-like videos (one labelled clip each) per split"),
        "min_persons": Key(int, 2),
        "max_persons": Key(int, 4),
        "T": Key(int, 4, "frames per clip"),
        "H": Key(int, 32),
        "W": Key(int, 32),
        "Q": Key(int, 8, "distinct signatures"),
        "persist_prob": Key(float, 0.9),
        "twin_scope": Key(_choice("clip", "neighbors"), "clip"),
        "bright_prob": Key(_opt_float, None, "mass of bright signatures; none keeps them uniform"),
        "val_bright_prob": Key(_opt_float, None),
        "grid": Key(int, 2),
        "box_scale": Key(_float_pair, (0.55, 0.85), "box side range as a fraction of the grid cell"),
        "clutter": Key(float, 0.0, "peak of the random blocky background in the signature channel"),
    },
    "model": {
        "head_type": Key(_choice("linear", "s_only", "t_only"), "t_only"),
        "agg": Key(_choice("mean", "max"), "mean"),
        "use_memory": Key(_bool, False),
        "window": Key(int, 4, "memory window in timestamps on each side"),
        "channels": Key(_ints, (3, 16, 32, 64)),
        "roi_size": Key(int, 7),
        "sampling_ratio": Key(int, 2),
    },
    "train": {
        "strategy": Key(_choice("none", "A", "B", "C"), "none"),
        "iters": Key(int, 600, "stage-1 (or only stage) iterations"),
        "stage2_iters": Key(int, 300),
        "base_lr": Key(float, 0.05),
        "stage2_lr": Key(float, 0.02),
        "batch_size": Key(int, 8),
        "weight_decay": Key(float, 1e-7),
        "momentum": Key(float, 0.9),
        "lr_gamma": Key(float, 0.66),
        "box_jitter": Key(float, 0.05),
        "color_jitter": Key(float, 0.1),
        "decoupled": Key(_choice("off", "before_stage2", "after_stage2"), "off"),
        "decoupled_iters": Key(int, 200),
        "decoupled_lr": Key(float, 0.01),
        "checkpoint_every": Key(int, 0, "write a resumable state every n iterations; 0 disables"),
    },
    "eval": {
        "scales": Key(_ints, (), "test scales (min side); empty evaluates at native size"),
        "flip": Key(_bool, True),
        "gt_boxes": Key(_bool, False),
        "jitter": Key(float, 0.1, "detector-box jitter magnitude when gt_boxes is false"),
        "split": Key(_choice("train", "val"), "val"),
        "domains": Key(str, "A K"),
    },
    "paths": {
        "data": Key(str, "", "dataset root written by gen-data"),
        "run": Key(str, "", "training output directory holding the checkpoint"),
    },
}

SECTIONS = {
    "gen-data": ("run", "data"),
    "train": ("run", "model", "train", "paths"),
    "eval": ("run", "eval", "paths"),
    "ensemble": ("run",),
    "report": ("run",),
}


def defaults(sections) -> dict[str, dict[str, Any]]:
    return {s: {k: key.default for k, key in SCHEMA[s].items()} for s in sections}


def parse_config(text: str, sections, source: str = "<config>") -> dict[str, dict[str, Any]]:
    """Parse INI text; only ``sections`` are allowed and every key must be known."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out = defaults(sections)
    for sec in cp.sections():
        if sec not in out:
            raise ConfigError(f"{source}: unknown section [{sec}] (allowed: {', '.join(sections) or 'none'})")
        for k, raw in cp.items(sec):
            if k not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {k!r} in [{sec}]")
            try:
                out[sec][k] = SCHEMA[sec][k].parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{sec}] {k}: {exc}") from None
    return out


def load_config(path, sections) -> dict[str, dict[str, Any]]:
    if path is None:
        return defaults(sections)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, sections, str(p))


def dump_config(cfg: dict[str, dict[str, Any]]) -> str:
    lines = []
    for sec, values in cfg.items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg, out_dir, name: str = "resolved.ini") -> Path:
    path = Path(out_dir) / name
    path.write_text(dump_config(cfg))
    return path
