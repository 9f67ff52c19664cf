"""Run configuration: flat dotted-key JSON files plus command-line overrides."""

import json
import os
from dataclasses import dataclass, field, fields

from .backbone import SCORERS, TrainConfig
from .metrics import DEFAULT_KS
from .search import SearchConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None  # TSV interaction file or saved dataset directory
    num_users: int = 1000
    num_items: int = 2000
    interactions: int = 30000
    popularity_exponent: float = 1.0
    clusters: int = 8
    taste: float = 0.8
    activity_exponent: float = 0.5
    ratios: tuple = (0.5, 0.25, 0.25)
    seed: int | None = None  # split seed; defaults to the master seed


@dataclass
class BackboneConfig:
    kind: str = "mf"
    layers: int = 3


@dataclass
class MetricsConfig:
    ks: tuple = DEFAULT_KS


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    SECTIONS = ("data", "backbone", "train", "search", "metrics")

    def __post_init__(self):
        self.search.seed = self.seed

    @property
    def data_seed(self):
        return self.seed if self.data.seed is None else self.data.seed

    def to_flat(self):
        self.search.seed = self.seed
        out = {"seed": self.seed}
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if sec == "search" and f.name == "seed":
                    continue
                val = getattr(obj, f.name)
                out[f"{sec}.{f.name}"] = list(val) if isinstance(val, tuple) else val
        return out

    def set(self, key, value):
        if key == "seed":
            self.seed = _coerce(int, value, key)
            self.search.seed = self.seed
            return
        sec, _, name = key.partition(".")
        if sec not in self.SECTIONS or not name or (sec == "search" and name == "seed"):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, sec)
        types = {f.name: f.type for f in fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(types[name], value, key))

    def validate(self):
        try:
            self.train.validate()
            self.search.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.backbone.kind not in SCORERS:
            raise ConfigError(f"backbone.kind must be one of {SCORERS}")
        if self.backbone.layers < 0:
            raise ConfigError("backbone.layers must be >= 0")
        if not self.metrics.ks or min(self.metrics.ks) < 1:
            raise ConfigError("metrics.ks must be positive integers")
        if len(self.data.ratios) != 3:
            raise ConfigError("data.ratios needs three fractions")
        return self


def _coerce(typ, value, key):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if value is None or (isinstance(value, str) and value in ("null", "None")):
            if "None" in str(typ):
                return None
            raise ConfigError(f"{key} may not be null")
        if "tuple" in name:
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else value.split(",")
            conv = float if key.endswith("ratios") else int
            return tuple(conv(v) for v in value)
        if "int" in name:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if "float" in name:
            return float(value)
        if "str" in name:
            return str(value)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def from_flat(flat):
    cfg = RunConfig()
    # seed first so sections that depend on it see the final value
    if "seed" in flat:
        cfg.set("seed", flat["seed"])
    for key, value in flat.items():
        if key != "seed":
            cfg.set(key, value)
    return cfg


def load_config(path=None, overrides=(), base=None):
    """Resolve a RunConfig from ``base`` (flat dict), a JSON file and ``key=value`` overrides.

    The ``BET_SEED`` environment variable, when set, wins over every other
    source for the master seed.
    """
    flat = dict(base or {})
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        flat.update(loaded)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        flat[key.strip()] = value.strip()
    if os.environ.get("BET_SEED"):
        flat["seed"] = os.environ["BET_SEED"]
    return from_flat(flat).validate()


def write_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_flat(), fh, indent=2, sort_keys=True)
        fh.write("\n")
