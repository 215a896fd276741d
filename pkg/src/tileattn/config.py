"""Benchmark grid configuration: JSON file plus command-line overrides."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .tensors import ElemType
from .tiled import Layout, TileSchedule

MASK_MODES = ("none", "causal")

# keys accepted in a config file, mirroring the CLI flags
FILE_KEYS = {"methods", "s", "d", "dtype", "causal", "b", "h", "tm", "tn", "stages",
             "layout", "nw", "nr", "seed", "out", "threads", "masks"}


def _schedules(tm, tn, stages, layout) -> list[TileSchedule]:
    return [TileSchedule(m, n, st, lo) for m, n, st, lo in itertools.product(tm, tn, stages, layout)]


@dataclass
class GridConfig:
    methods: list[str] = field(default_factory=lambda: ["tiled", "eager"])
    S: list[int] = field(default_factory=lambda: [512, 1024, 2048, 4096, 8192])
    D: list[int] = field(default_factory=lambda: [64, 96, 128, 160])
    dtypes: list[str] = field(default_factory=lambda: ["f16emu", "bf16emu"])
    masks: list[str] = field(default_factory=lambda: ["none", "causal"])
    B: int = 1
    H: int = 8
    schedules: list[TileSchedule] = field(
        default_factory=lambda: _schedules([128, 64], [256, 128], [2], ["row"]))
    n_warmup: int = 10
    n_timed: int = 50
    seed: int = 0
    out: str = "results"
    threads: int | None = None

    def validate(self, known_methods=None) -> "GridConfig":
        for name in ("methods", "S", "D", "dtypes", "masks", "schedules"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be a non-empty list")
        if known_methods is not None:
            unknown = [m for m in self.methods if m not in known_methods]
            if unknown:
                raise ConfigError(f"unknown method(s) {unknown}; known: {sorted(known_methods)}")
        for name in ("S", "D"):
            if any(int(x) < 1 for x in getattr(self, name)):
                raise ConfigError(f"{name} entries must be positive")
        if self.B < 1 or self.H < 1:
            raise ConfigError("B and H must be positive")
        try:
            self.dtypes = [ElemType.parse(d).value for d in self.dtypes]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bad = [m for m in self.masks if m not in MASK_MODES]
        if bad:
            raise ConfigError(f"unknown mask mode(s) {bad}; expected {MASK_MODES}")
        if self.n_warmup < 1:
            raise ConfigError("nw (warmup iterations) must be >= 1")
        if self.n_timed < 3:
            raise ConfigError("nr (timed iterations) must be >= 3")
        if self.threads is not None and self.threads < 0:
            raise ConfigError("threads must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedules"] = [
            {"t_m": s.t_m, "t_n": s.t_n, "stages": s.stages, "layout": s.layout.value}
            for s in self.schedules
        ]
        return d

    @classmethod
    def from_sources(cls, file_values: dict | None = None, overrides: dict | None = None) -> "GridConfig":
        """Merge config-file values with flag overrides (flags win)."""
        merged = dict(file_values or {})
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = set(merged) - FILE_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        cfg = cls()
        simple = {"methods": "methods", "s": "S", "d": "D", "dtype": "dtypes", "masks": "masks",
                  "b": "B", "h": "H", "nw": "n_warmup", "nr": "n_timed", "seed": "seed",
                  "out": "out", "threads": "threads"}
        try:
            for key, attr in simple.items():
                if key in merged:
                    value = merged[key]
                    if attr in ("S", "D"):
                        value = [int(x) for x in _as_list(value)]
                    elif attr in ("methods", "dtypes", "masks"):
                        value = [str(x) for x in _as_list(value)]
                    elif attr in ("B", "H", "n_warmup", "n_timed", "seed", "threads"):
                        value = int(value)
                    setattr(cfg, attr, value)
            if "causal" in merged:
                cfg.masks = causal_modes(merged["causal"])
            if any(k in merged for k in ("tm", "tn", "stages", "layout")):
                base = cfg.schedules[0]
                tm = [int(x) for x in _as_list(merged.get("tm", [base.t_m]))]
                tn = [int(x) for x in _as_list(merged.get("tn", [base.t_n]))]
                st = [int(x) for x in _as_list(merged.get("stages", [base.stages]))]
                lo = [Layout.parse(x) for x in _layouts(merged.get("layout", [base.layout.value]))]
                cfg.schedules = _schedules(tm, tn, st, lo)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cfg


def _as_list(value):
    if isinstance(value, str):
        return [x for x in (p.strip() for p in value.split(",")) if x]
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def _layouts(value):
    out = []
    for item in _as_list(value):
        out.extend(["row", "col"] if str(item).lower() == "both" else [item])
    return out


def causal_modes(value) -> list[str]:
    if isinstance(value, bool):
        return ["causal"] if value else ["none"]
    mapping = {"on": ["causal"], "off": ["none"], "both": ["none", "causal"]}
    try:
        return mapping[str(value).lower()]
    except KeyError:
        raise ConfigError(f"causal must be one of on/off/both, got {value!r}") from None


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data
