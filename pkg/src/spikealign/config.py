"""Flat ``key = value`` run configuration.

Every key has a default whose Python type fixes how the text value is parsed.
Unknown keys are rejected.  Keys starting with ``_`` are internal snapshot
entries written into checkpoints and are only accepted when loading one.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "time_steps": 4,
    "lif.beta": 0.9,
    "lif.threshold": 1.0,
    "lif.attn_threshold": 0.25,
    "lif.surrogate_width": 1.0,
    "image.size": 32,
    "image.channels": 3,
    "image.mean": "0.5,0.5,0.5",
    "image.std": "0.5,0.5,0.5",
    "image.patch": 4,
    "image.depth": 4,
    "image.dim": 384,
    "image.heads": 8,
    "image.mlp_ratio": 4,
    "model.out_dim": 512,
    "model.readout": "TDW",
    "model.init": "random",
    "model.init_gain": 1.0,
    "text.hidden": "512",
    "text.max_len": 20,
    "text.word_embeddings": "",
    "text.train_embeddings": True,
    "data.train": "",
    "data.test": "",
    "data.labels": "",
    "data.templates": "",
    "data.limit": 0,
    "teacher.image": "",
    "teacher.text": "",
    "teacher.probs": "",
    "optim.name": "sgd",
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "pretrain.epochs_img": 200,
    "pretrain.batch_img": 196,
    "pretrain.epochs_txt": 100,
    "pretrain.batch_txt": 256,
    "pretrain.lr0": 5e-3,
    "pretrain.lr_final": 5e-4,
    "pretrain.decay_epochs": 50,
    "pretrain.text_lr": 5e-4,
    "finetune.lambda": 1.0,
    "finetune.eps": 1e-10,
    "finetune.epochs": 400,
    "finetune.batch": 196,
    "finetune.lr": 5e-4,
    "eval.prompt": "A photo of a {}.",
    "eval.temperature": 1.0,
    "ckpt.in": "",
    "robustness.expand": "1,2",
    "robustness.replace": "0,20,40,80,100",
    "robustness.seeds": "0,1,2",
    "robustness.distractors": "",
    "robustness.substitutes": "",
    "energy.sample": 16,
    "energy.force_gamma": "",
    "energy.per_layer_mean": False,
}


def _parse(key: str, raw: str, default: object) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class Config(Mapping):
    def __init__(self, values: Mapping[str, object] | None = None):
        self._values = dict(DEFAULTS)
        self._internal: dict[str, str] = {}
        if values:
            for key, value in values.items():
                self.set(key, value)

    def set(self, key: str, value: object, *, allow_internal: bool = False) -> None:
        if key.startswith("_"):
            if not allow_internal:
                raise ConfigError(f"unknown config key {key!r}")
            self._internal[key] = str(value)
            return
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        self._values[key] = _parse(key, value, default) if isinstance(value, str) else _coerce(key, value, default)

    def __getitem__(self, key: str):
        if key in self._internal:
            return self._internal[key]
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    @property
    def internal(self) -> dict[str, str]:
        return dict(self._internal)

    def _items(self, key: str, kind):
        try:
            return [kind(v) for v in str(self[key]).split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected a comma-separated list of "
                              f"{kind.__name__}, got {self[key]!r}") from None

    def floats(self, key: str) -> list[float]:
        return self._items(key, float)

    def ints(self, key: str) -> list[int]:
        return self._items(key, int)

    def path(self, key: str, required: bool = True) -> Path | None:
        value = str(self[key]).strip()
        if not value:
            if required:
                raise ConfigError(f"config key {key!r} must name a file")
            return None
        return Path(value)

    def copy(self) -> "Config":
        out = Config()
        out._values = dict(self._values)
        out._internal = dict(self._internal)
        return out

    def to_text(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in sorted(self._values.items())]
        lines += [f"{k} = {v}" for k, v in sorted(self._internal.items())]
        return "\n".join(lines) + "\n"


def _coerce(key: str, value: object, default: object) -> object:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key!r} expects a bool")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an int")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number")
        return float(value)
    return str(value)


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                *, allow_internal: bool = False) -> Config:
    cfg = Config()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        base = path.parent
        for key, value in parse_lines(text.splitlines(), str(path)):
            cfg.set(key, _resolve(key, value, base), allow_internal=allow_internal)
    for item in overrides:
        key, value = parse_override(item)
        cfg.set(key, value)
    return cfg


def _resolve(key: str, value: str, base: Path) -> str:
    # file-valued keys in a config file are relative to the config's directory
    if value and isinstance(DEFAULTS.get(key), str) and _is_path_key(key):
        p = Path(value)
        if not p.is_absolute():
            return str(base / p)
    return value


_PATH_KEYS = {
    "text.word_embeddings", "data.train", "data.test", "data.labels", "data.templates",
    "teacher.image", "teacher.text", "teacher.probs", "ckpt.in",
    "robustness.distractors", "robustness.substitutes",
}


def _is_path_key(key: str) -> bool:
    return key in _PATH_KEYS


def config_from_text(text: str) -> Config:
    cfg = Config()
    for key, value in parse_lines(text.splitlines(), "<snapshot>"):
        cfg.set(key, value, allow_internal=True)
    return cfg
