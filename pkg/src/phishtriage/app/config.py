"""Pipeline configuration: a flat ``key = value`` text file.

Format (version 1)::

    # comments start with '#'
    config_version = 1
    org_name = org
    org_domains = org.com, org.nl
    seed_dedup = 1
    ...

Relative paths are resolved against the config file's directory.  Every
stage seed must be present; a missing seed is a configuration error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

CONFIG_VERSION = 1
SEED_KEYS = ("seed_dedup", "seed_llda", "seed_urls", "seed_bootstrap", "seed_predict")
PATH_KEYS = ("allowlist", "competitors", "stopwords", "no_stem", "dedup_labels", "llda_labels",
             "redirect_fixture", "clicks")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    org_name: str
    org_domains: tuple[str, ...]
    llda_labels: str
    clicks: str
    redirect_fixture: str | None = None
    allowlist: str | None = None
    competitors: str | None = None
    language: str = "english"
    stopwords: str | None = None
    no_stem: str | None = None
    sms_max_length: int = 200
    dedup_threshold: float | None = None
    dedup_labels: str | None = None
    dedup_bootstrap_n: int = 10_000
    dedup_sample_size: int = 300
    llda_alpha: float = 1.0
    llda_beta: float = 0.001
    llda_iterations: int = 1000
    llda_burn_in: int = 900
    llda_average_last: int = 0
    llda_infer_iterations: int | None = None
    vuln_margin: float = 0.05
    resolver: str = "fixture"
    allow_network: bool = False
    click_strategy: str = "avg"
    model: str = "PM1"
    min_clicks: float = 10
    bootstrap_b: int = 5000
    predict_draws: int = 50_000
    spoof_cutoff: int = 3
    robustness_min_group: int = 5
    workers: int = 1
    seed_dedup: int = 0
    seed_llda: int = 0
    seed_urls: int = 0
    seed_bootstrap: int = 0
    seed_predict: int = 0
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not self.org_name.strip():
            raise ConfigError("org_name must be set")
        if self.dedup_threshold is None and self.dedup_labels is None:
            raise ConfigError("set dedup_threshold or dedup_labels")
        if self.dedup_threshold is not None and not 0.0 <= self.dedup_threshold <= 1.0:
            raise ConfigError("dedup_threshold must lie in [0, 1]")
        if self.resolver not in ("fixture", "live"):
            raise ConfigError("resolver must be 'fixture' or 'live'")
        if self.resolver == "fixture" and not self.redirect_fixture:
            raise ConfigError("fixture resolver needs redirect_fixture")
        if self.model not in ("PM1", "PM2"):
            raise ConfigError("model must be PM1 or PM2")
        if self.click_strategy not in ("avg", "sum", "max"):
            raise ConfigError("click_strategy must be avg, sum or max")

    def path(self, key: str) -> Path | None:
        value = getattr(self, key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def check_files(self) -> None:
        for key in PATH_KEYS:
            p = self.path(key)
            if p is not None and not p.exists():
                raise ConfigError(f"{key}: file not found: {p}")

    def to_text(self) -> str:
        lines = [f"config_version = {CONFIG_VERSION}"]
        for f in dataclasses.fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ", ".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, ftype) -> object:
    t = str(ftype)
    try:
        if "tuple" in t:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if "bool" in t:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if "float" in t:
            return float(raw)
        if "int" in t:
            return int(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, base_dir: str | Path = ".") -> PipelineConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val.strip()
    version = values.pop("config_version", None)
    if version is None:
        raise ConfigError("missing config_version")
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"unsupported config_version {version}")
    missing = [k for k in SEED_KEYS if k not in values]
    if missing:
        raise ConfigError("missing stage seeds: " + ", ".join(missing))
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError("unknown keys: " + ", ".join(unknown))
    kwargs = {k: _coerce(k, v, fields[k].type) for k, v in values.items() if v != ""}
    return PipelineConfig(base_dir=str(base_dir), **kwargs)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), path.parent)
    cfg.check_files()
    return cfg


def config_from_mapping(d: Mapping[str, object], base_dir: str | Path = ".") -> PipelineConfig:
    return dataclasses.replace(PipelineConfig(**d), base_dir=str(base_dir))  # type: ignore[arg-type]
