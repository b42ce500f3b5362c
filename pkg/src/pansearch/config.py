"""Run configuration: one flat ``section.field=value`` namespace over the module configs.

Precedence, lowest first: built-in defaults, the ``--config`` file, then
command-line flags. The canonical echo (sorted ``key=value`` lines) is hashed
and that hash is stamped on every artifact a command writes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Mapping

from .deform_unet import SegTrainConfig, UNetConfig
from .dqn import DqnConfig
from .env import EnvConfig

SCHEMA_VERSION = 1
DATA_ENV_VAR = "PANSEARCH_DATA_DIR"


class ConfigError(ValueError):
    """Unknown key, unparsable value or malformed config file."""


# Sections that influence trained artifacts. Phantom settings only matter to
# gen-data, which records them in the manifest instead.
_SECTIONS = {
    "env": EnvConfig,
    "dqn": DqnConfig,
    "unet": UNetConfig,
    "seg": SegTrainConfig,
}
_RUN_FIELDS = {"seed": 0, "loc_side": 64, "seg_negative_fraction": 0.25, "split": ""}
# keys a localizer depends on; its artifacts are hashed over these alone
LOC_SCOPE = ("env.", "dqn.", "seed", "loc_side", "split")
# module-level seeds are derived from the global seed, never set directly
_DERIVED = {"dqn.seed", "unet.seed", "seg.seed"}


def _parse_value(raw: str, default: Any):
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
        if isinstance(default, tuple):
            parts = [p for p in raw.strip("()").replace("x", ",").split(",") if p.strip()]
            return tuple(type(default[0])(p) if default else int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = EnvConfig()
    dqn: DqnConfig = DqnConfig()
    unet: UNetConfig = UNetConfig()
    seg: SegTrainConfig = SegTrainConfig()
    seed: int = 0
    loc_side: int = 64
    seg_negative_fraction: float = 0.25
    split: str = ""  # "FOLD/FOLDS" or empty for no held-out fold

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "RunConfig":
        cfg = cls()
        section_values: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
        top: dict[str, Any] = {}
        for key, raw in items.items():
            if key in _RUN_FIELDS:
                top[key] = _parse_value(raw, _RUN_FIELDS[key])
                continue
            section, _, field = key.partition(".")
            if section not in _SECTIONS or key in _DERIVED:
                raise ConfigError(f"unknown config key {key!r}")
            defaults = {f.name: getattr(getattr(cfg, section), f.name) for f in dataclasses.fields(_SECTIONS[section])}
            if field not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            section_values[section][field] = _parse_value(raw, defaults[field])
        seed = top.get("seed", cfg.seed)
        try:
            built = {
                "env": EnvConfig(**section_values["env"]),
                "dqn": DqnConfig(**section_values["dqn"], seed=seed),
                "unet": UNetConfig(**section_values["unet"], seed=seed),
                "seg": SegTrainConfig(**section_values["seg"], seed=seed),
            }
            built["unet"].validate()
            parse_split(top.get("split", ""))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**built, **{**{k: getattr(cfg, k) for k in _RUN_FIELDS}, **top})

    def items(self, scope: str | None = None) -> dict[str, str]:
        """Canonical key/value view; ``scope="loc"`` keeps only the localizer's keys."""
        out = {k: _fmt(getattr(self, k)) for k in _RUN_FIELDS}
        for section in _SECTIONS:
            sub = getattr(self, section)
            for f in dataclasses.fields(sub):
                key = f"{section}.{f.name}"
                if key not in _DERIVED:
                    out[key] = _fmt(getattr(sub, f.name))
        if scope == "loc":
            out = {k: v for k, v in out.items() if k.startswith(LOC_SCOPE)}
        elif scope is not None:
            raise ValueError(f"unknown config scope {scope!r}")
        return dict(sorted(out.items()))

    def echo(self, scope: str | None = None) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items(scope).items())

    def hash(self, scope: str | None = None) -> str:
        return hashlib.sha256(self.echo(scope).encode("utf-8")).hexdigest()[:16]

    def stamp(self, scope: str | None = None) -> dict[str, str]:
        return {"schema_version": str(SCHEMA_VERSION), "config_hash": self.hash(scope)}


def parse_split(text: str) -> tuple[int, int] | None:
    """``"k/n"`` -> ``(k, n)``: manifest rows with ``i % n == k`` are held out for evaluation."""
    if not text:
        return None
    try:
        k, n = (int(p) for p in text.split("/"))
    except ValueError as exc:
        raise ConfigError(f"split expects FOLD/FOLDS such as 0/5, got {text!r}") from exc
    if n < 2 or not 0 <= k < n:
        raise ConfigError(f"split needs 0 <= fold < folds and folds >= 2, got {text!r}")
    return k, n


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    items = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def load_run_config(path: str | Path | None, overrides: Mapping[str, str] = ()) -> RunConfig:
    items = read_config_file(path) if path else {}
    items.update(dict(overrides))
    return RunConfig.from_items(items)


def default_root() -> Path:
    return Path(os.environ.get(DATA_ENV_VAR, "pansearch_data"))


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path, rows: Iterable[Mapping], fields: Iterable[str], stamp: Mapping[str, str]) -> None:
    """UTF-8, LF-terminated CSV; every row carries the schema version and config hash."""
    fields = list(fields) + list(stamp)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**{k: _cell(r[k]) for k in fields if k not in stamp}, **stamp})


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str | Path, payload: Mapping) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")
