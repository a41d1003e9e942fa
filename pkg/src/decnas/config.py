"""Run configuration: flat ``key = value`` text grouped in ``[sections]``.

Every key is declared in ``SCHEMA``; unknown sections or keys, malformed
lines, and values that fail conversion raise ``ConfigError`` carrying the
offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .coordinator import CELEBA_ROUNDS, format_round_schedule, parse_round_schedule


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def convert(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return convert


def _factors(text: str) -> tuple[float, ...]:
    if not text.strip():
        return ()
    out = tuple(float(x) for x in text.split(","))
    if any(not 0 < f <= 1 for f in out):
        raise ValueError("width factors must lie in (0, 1]")
    return out


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {v}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise ValueError(f"expected a fraction in (0, 1], got {v}")
    return v


# section -> key -> (converter, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "seed": (int, 0),
        "model": (_choice("convnet-small", "convnet-celeba-shape"), "convnet-small"),
        "output_dir": (str, "runs/default"),
        "mode": (_choice("decnas", "oracle"), "decnas"),
        "pretrain_rounds": (int, 60),
        "fl_tune_rounds": (int, 60),
        "clients_per_round": (_positive_int, 50),
        "tune": (_choice("final", "all"), "final"),
        "threads": (_positive_int, 1),
        "seconds_per_mac": (float, 5e-8),
    },
    "data": {
        "source": (str, "synthetic"),
        "num_samples": (_positive_int, 4000),
        "class_count": (_positive_int, 8),
        "input_size": (_positive_int, 32),
        "channels": (_positive_int, 1),
        "noise": (float, 0.6),
        "num_clients": (_positive_int, 200),
        "shard_mode": (_choice("iid", "label_skew"), "label_skew"),
        "classes_per_client": (_positive_int, 2),
    },
    "search": {
        "groups": (_positive_int, 10),
        "balance_tolerance": (float, 1.1),
        "local_epochs": (_positive_int, 1),
        "drop_ratio": (float, 33.0),
        "round_schedule": (parse_round_schedule, CELEBA_ROUNDS),
        "lr": (float, 0.05),
        "batch_size": (_positive_int, 8),
        "delta": (float, 0.05),
        "decay": (float, 0.93),
        "final_budget": (float, 0.5),
        "grouping": (_bool, True),
        "dynamic_rounds": (_bool, True),
        "early_drop": (_bool, True),
    },
    "baseline": {
        "factors": (_factors, ()),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    path: str | None = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def set(self, section: str, key: str, value: Any) -> None:
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"unknown key [{section}] {key}")
        self.values[section][key] = value

    def echo(self) -> dict[str, dict[str, Any]]:
        out = {}
        for section, keys in self.values.items():
            out[section] = {}
            for k, v in keys.items():
                if k == "round_schedule":
                    v = format_round_schedule(v)
                elif isinstance(v, tuple):
                    v = list(v)
                out[section][k] = v
        return out

    def to_text(self) -> str:
        lines = []
        for section, keys in self.echo().items():
            lines.append(f"[{section}]")
            for k, v in keys.items():
                if isinstance(v, bool):
                    v = "on" if v else "off"
                elif isinstance(v, list):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def defaults() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse(text: str, path: str | None = None) -> RunConfig:
    cfg = defaults()
    cfg.path = path
    section = None
    seen: set[tuple[str, str]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"unterminated section header {raw.strip()!r}", lineno, path)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}", lineno, path)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno, path)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, path)
        seen.add((section, key))
        convert = SCHEMA[section][key][0]
        try:
            cfg.values[section][key] = convert(value)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}", lineno, path) from None
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=str(path)) from None
    return parse(text, str(path))
