"""Run configuration: an INI document with typed sections, strict keys.

Flags override file values; the effective config (defaults included) can be
dumped back out as INI, so a run is always reproducible from one document.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .preprocess import DEFAULT_BIAS_CMD, DEFAULT_REGISTER_CMD, DEFAULT_STRIP_CMD, ToolConfig
from .priors import AgingPriorParams
from .synth import SynthConfig
from .training import TrainConfig

# section -> key -> default (type of the default fixes the parse type)
SCHEMA: dict[str, dict[str, object]] = {
    "prior": {"zeta": 9.5, "tau": 4.5, "alpha": 1.0},
    "model": {"channels": 8},
    "train": {"stage": 1, "epochs": 30, "batch": 4, "lr": 1e-3, "weight_decay": 1e-3, "seed": 0},
    "data": {"cohort_manifest": "", "atlas_path": "", "relevance_csv": ""},
    "preprocess": {
        "strip_cmd": DEFAULT_STRIP_CMD,
        "bias_cmd": DEFAULT_BIAS_CMD,
        "register_cmd": DEFAULT_REGISTER_CMD,
        "template": "",
        "cache_dir": "preproc_cache",
        "jobs": 1,
    },
    "synth": {
        "n_subjects": 200,
        "dims": 32,
        "pd_fraction": 0.5,
        "age_min": 50.0,
        "age_max": 80.0,
        "acceleration": 12.0,
        "signal_gain": 0.15,
        "noise_std": 10.0,
        "baseline": 1.0,
        "healthy_fraction": 0.5,
        "region_count": 48,
        "seed": 7,
    },
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, raw: str):
    default = SCHEMA[section][key]
    try:
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}")


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(
        default_factory=lambda: {s: dict(keys) for s, keys in SCHEMA.items()}
    )

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = _coerce(section, key, str(raw))

    def prior(self) -> AgingPriorParams:
        p = self.values["prior"]
        return AgingPriorParams(zeta=p["zeta"], tau=p["tau"], alpha=p["alpha"])

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"], batch=t["batch"], lr=t["lr"], weight_decay=t["weight_decay"], seed=t["seed"]
        )

    def synth_config(self) -> SynthConfig:
        s = self.values["synth"]
        d = int(s["dims"])
        return SynthConfig(
            n_subjects=s["n_subjects"],
            dims=(d, d, d),
            pd_fraction=s["pd_fraction"],
            age_min=s["age_min"],
            age_max=s["age_max"],
            acceleration=s["acceleration"],
            signal_gain=s["signal_gain"],
            noise_std=s["noise_std"],
            baseline=s["baseline"],
            healthy_fraction=s["healthy_fraction"],
            region_count=s["region_count"],
            seed=s["seed"],
        )

    def tool_config(self) -> ToolConfig:
        p = self.values["preprocess"]
        return ToolConfig(
            strip_cmd=p["strip_cmd"],
            bias_cmd=p["bias_cmd"],
            register_cmd=p["register_cmd"],
            template_path=p["template"],
            cache_dir=p["cache_dir"],
            jobs=p["jobs"],
        )

    def dump(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                v = self.values[section][key]
                lines.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if parser.defaults():
        raise ConfigError(f"unknown config keys in [DEFAULT]: {sorted(parser.defaults())}")
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            cfg.values[section][key] = _coerce(section, key, raw)
    return cfg
