"""Flat ``key = value`` run configuration shared by every subcommand.

Grammar: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines are ignored. Ranges are written ``lo, hi``; optional integers accept
``none``. Unknown keys are rejected, and later sources (command-line flags)
override earlier ones (the file).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .augment import AugmentationSpec
from .contrast import ContrastConfig
from .errors import ParameterError
from .evaluate import FewShotSpec
from .model import ViPFormerConfig
from .train import TrainConfig


@dataclass(frozen=True)
class Key:
    section: str
    kind: str  # int | float | str | bool | range | optint
    default: object


def _range(lo, hi):
    return (float(lo), float(hi))


SCHEMA = {
    # model
    "depth": Key("model", "int", 9), "heads": Key("model", "int", 6), "dim": Key("model", "int", 384),
    "mlp_ratio": Key("model", "float", 4.0), "length": Key("model", "int", 128), "k": Key("model", "int", 32),
    "patch": Key("model", "int", 12), "image_height": Key("model", "int", 144),
    "image_width": Key("model", "int", 144), "image_channels": Key("model", "int", 3),
    "point_channels": Key("model", "int", 3), "point_hidden": Key("model", "int", 128),
    "dropout": Key("model", "float", 0.1), "out_dim": Key("model", "optint", None),
    "dtype": Key("model", "str", "float32"),
    # contrast
    "tau": Key("contrast", "float", 0.1), "alpha": Key("contrast", "float", 1.0),
    "mode": Key("contrast", "str", "both"),
    # augmentation
    "rotation_axis": Key("augment", "str", "up"), "rotation_range": Key("augment", "range", _range(0, 2 * math.pi)),
    "translation_range": Key("augment", "range", _range(-0.2, 0.2)),
    "jitter_sigma": Key("augment", "float", 0.01), "jitter_clip": Key("augment", "float", 0.05),
    "scale_range": Key("augment", "range", _range(0.8, 1.2)), "image_flip": Key("augment", "bool", False),
    # optimization
    "epochs": Key("train", "int", 30), "batch_size": Key("train", "int", 32), "seed": Key("train", "int", 0),
    "lr_peak": Key("train", "float", 1e-3), "peak_decay": Key("train", "float", 0.6),
    "cycle_len": Key("train", "float", 100.0), "warmup_len": Key("train", "float", 5.0),
    "schedule": Key("train", "str", "step"), "beta1": Key("train", "float", 0.9),
    "beta2": Key("train", "float", 0.999), "eps": Key("train", "float", 1e-8),
    "weight_decay": Key("train", "float", 0.05), "probe_l2": Key("train", "float", 1e-4),
    "probe_loss": Key("train", "str", "softmax"), "probe_feature": Key("train", "str", "adapter"),
    "cmc_view": Key("train", "str", "t1"), "workers": Key("train", "int", 1),
    "max_steps": Key("train", "optint", None),
    # data
    "data_root": Key("data", "str", ""), "sample_size": Key("data", "int", 2048),
    "eval_sample_size": Key("data", "int", 1024), "class_count": Key("data", "int", 8),
    "per_class": Key("data", "int", 64), "n_points": Key("data", "int", 2048),
    "views": Key("data", "int", 4), "probe_fit_split": Key("data", "str", "train"),
    "probe_eval_split": Key("data", "str", "val"),
    # evaluation
    "n_way": Key("eval", "int", 5), "k_shot": Key("eval", "int", 10), "runs": Key("eval", "int", 10),
    "query_per_class": Key("eval", "int", 20), "eval_split": Key("eval", "str", "test"),
    "embed_feature": Key("eval", "str", "adapter"), "eval_seed": Key("eval", "int", 20220901),
    "freeze_encoder": Key("eval", "bool", False),
}


def parse_value(key: str, text: str):
    spec = SCHEMA.get(key)
    if spec is None:
        raise ParameterError(f"unknown configuration key {key!r}")
    text = text.strip()
    try:
        if spec.kind == "int":
            return int(text)
        if spec.kind == "float":
            return float(text)
        if spec.kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if spec.kind == "optint":
            return None if text.lower() in ("none", "") else int(text)
        if spec.kind == "range":
            lo, hi = (p for p in text.split(","))
            return _range(lo, hi)
    except ValueError:
        raise ParameterError(f"bad value {text!r} for {key} (expected {spec.kind})") from None
    return text


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, source="<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ParameterError(f"{source}:{lineno}: unknown configuration key {key!r}")
        out[key] = parse_value(key, value)
    return out


def preset_path(name: str):
    """Resolve a shipped preset such as ``tableI`` or ``tableII.cfg``."""
    fname = name if name.endswith(".cfg") else name + ".cfg"
    res = resources.files("vipformer") / "configs" / fname
    return res if res.is_file() else None


def load_config_file(name) -> dict:
    path = Path(name)
    if path.is_file():
        return parse_text(path.read_text(), str(path))
    res = preset_path(str(name))
    if res is None:
        raise FileNotFoundError(f"config file {name} not found (and no preset of that name)")
    return parse_text(res.read_text(), str(name))


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: s.default for k, s in SCHEMA.items()}
        if values:
            self.update(values)

    def update(self, values: dict):
        for k, v in values.items():
            if k not in SCHEMA:
                raise ParameterError(f"unknown configuration key {k!r}")
            self.values[k] = v
        return self

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        return {k: v for k, v in self.values.items() if SCHEMA[k].section == name}

    def model(self) -> ViPFormerConfig:
        return ViPFormerConfig(**self.section("model"))

    def contrast(self) -> ContrastConfig:
        return ContrastConfig(**self.section("contrast"))

    def augment(self) -> AugmentationSpec:
        return AugmentationSpec(**self.section("augment")).validate()

    def train(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def fewshot(self) -> FewShotSpec:
        v = self.values
        return FewShotSpec(v["n_way"], v["k_shot"], v["runs"], v["query_per_class"])

    def to_text(self) -> str:
        lines = ["# fully resolved run configuration"]
        current = None
        for k, spec in SCHEMA.items():
            if spec.section != current:
                current = spec.section
                lines.append(f"\n# {current}")
            lines.append(f"{k} = {format_value(self.values[k])}")
        return "\n".join(lines) + "\n"

    def validate(self):
        self.model()
        self.contrast()
        self.augment()
        self.train()
        return self
