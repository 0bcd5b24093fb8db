"""Line-oriented ``key = value`` config files with ``[section]`` headers.

Sections are ``[model]``, ``[attention]``, ``[train]`` and ``[loss]``.
``#`` starts a comment. Lists are comma separated. In ``[model]`` the
``preset`` key (if present) is applied first and the other keys override
it, wherever they appear in the section. ``[attention]`` takes
``head_dim``, ``eps`` and ``scales``; the per-stage head count follows from
the stage width. See ``configs/desk.cfg`` for every key and its default.
"""
from __future__ import annotations

from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

from ..attention import AttentionConfig
from ..backbone import PRESETS, ModelConfig
from ..training import LossConfig, TrainConfig


class ConfigError(ValueError):
    """Bad config text; ``line`` is the 1-based offending line when known."""

    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path}:{line}: " if line is not None and path is not None else (
            f"line {line}: " if line is not None else "")
        super().__init__(where + message)
        self.line = line


ATTENTION_KEYS = {"head_dim": int, "eps": float, "scales": tuple}


def reference_config_path() -> Path:
    return Path(str(resources.files("evsam") / "configs" / "desk.cfg"))


def _coerce(raw: str, default, line: int):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(v) for v in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", line) from None


def _read_sections(text: str):
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", no)
            current = line[1:-1].strip()
            if current not in ("model", "attention", "train", "loss"):
                raise ConfigError(f"unknown section [{current}]", no)
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", no)
        if current is None:
            raise ConfigError("key outside of any section", no)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r}", no)
        sections[current][key] = (value, no)
    return sections


def _build(cls, base, entries: dict, section: str):
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    updates = {}
    for key, (raw, no) in entries.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]", no)
        updates[key] = _coerce(raw, known[key], no)
    try:
        return replace(base, **updates)
    except (ValueError, TypeError) as exc:
        line = min(no for _, no in entries.values()) if entries else None
        raise ConfigError(f"[{section}] {exc}", line) from None


def parse_config_text(text: str):
    s = _read_sections(text)
    model_entries = dict(s.get("model", {}))
    base = ModelConfig()
    if "preset" in model_entries:
        name, no = model_entries.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})", no)
        base = PRESETS[name]
    model = _build(ModelConfig, base, model_entries, "model")
    train = _build(TrainConfig, TrainConfig(), s.get("train", {}), "train")
    loss = _build(LossConfig, LossConfig(), s.get("loss", {}), "loss")

    attn_entries = s.get("attention", {})
    default = AttentionConfig()
    values = {"head_dim": default.head_dim, "eps": default.eps, "scales": default.scales}
    for key, (raw, no) in attn_entries.items():
        if key not in ATTENTION_KEYS:
            raise ConfigError(f"unknown key {key!r} in [attention]", no)
        values[key] = _coerce(raw, values[key], no)
    first = min((no for _, no in attn_entries.values()), default=None)
    try:
        attention = AttentionConfig(dim=values["head_dim"], heads=1, eps=values["eps"],
                                    scales=values["scales"])
    except ValueError as exc:
        raise ConfigError(f"[attention] {exc}", first) from None
    for width, kind in zip(model.stage_widths, model.stage_kinds):
        if kind == "evit" and width % attention.head_dim:
            raise ConfigError(f"stage width {width} is not divisible by head_dim {attention.head_dim}", first)
    return model, train, loss, attention


def parse_config(path):
    """Parse ``path`` into (ModelConfig, TrainConfig, LossConfig, AttentionConfig)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        return parse_config_text(path.read_text())
    except ConfigError as exc:
        if exc.line is not None:
            raise ConfigError(str(exc).split(": ", 1)[1], exc.line, path) from None
        raise
