"""Flat ``key = value`` run configuration.

Grammar, one entry per line::

    # comment
    section.field = value

Sections are ``model``, ``train``, ``data`` and ``paths``. Values are parsed by
the field's type: integers, floats, ``true``/``false``, strings, and
comma-separated integer lists. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SyntheticSpec
from .training import TrainConfig

# ModelConfig fields that a run may set; vocab_size and labels_per_aspect come from the corpus.
MODEL_KEYS = {
    "hidden": 32,
    "num_heads": 2,
    "base_layers": 1,
    "layers_per_stage": 1,
    "d_z": 8,
    "max_response_len": 30,
    "max_len": 128,
    "dropout": 0.1,
    "label_injection": "query",
    "embedding_scale": 0.5,
}


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    run_dir: str = "runs/desk"
    corpus: str = ""


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: dict(MODEL_KEYS))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: Paths = field(default_factory=Paths)

    def items(self) -> list[tuple[str, object]]:
        out = [(f"model.{k}", v) for k, v in self.model.items()]
        for section in ("train", "data", "paths"):
            obj = getattr(self, section)
            out.extend((f"{section}.{f.name}", getattr(obj, f.name)) for f in fields(obj))
        return out

    def dumps(self) -> str:
        lines = ["# phed run configuration"]
        for key, value in self.items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, (list, tuple)):
            return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def loads(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    defaults = dict(cfg.items())
    updates: dict[str, dict] = {"model": {}, "train": {}, "data": {}, "paths": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        section, name = key.split(".", 1)
        updates[section][name] = _parse(raw, defaults[key], key)
    try:
        cfg.model.update(updates["model"])
        cfg.train = dataclasses.replace(cfg.train, **updates["train"])
        cfg.data = dataclasses.replace(cfg.data, **updates["data"])
        cfg.paths = dataclasses.replace(cfg.paths, **updates["paths"])
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text(encoding="utf-8"), str(path))
