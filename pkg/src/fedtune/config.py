"""Experiment configuration: YAML loading, validation and CLI overrides."""

import os
from dataclasses import dataclass, field

import yaml

from .common import ConfigurationError
from .hpo import HpDim, SearchSpace, default_search_space

SAMPLERS = ("random", "adaptive", "halving")
GROUP_MODES = ("sync", "async")

_DEFAULTS = {
    "dataset": {
        "type": "synthetic",
        "num_classes": 10,
        "input_dim": 16,
        "n": 2000,
        "class_sep": 3.0,
    },
    "n_clients": 20,
    "alpha": 0.5,
    "split": [0.6, 0.2, 0.2],
    "server_val_fraction": 0.1,
    "model": {"kind": "mlp", "hidden_dim": 16, "dropout_rate": 0.0},
    "search_space": "default",
    "tuned": ["learning_rate", "weight_decay", "epochs"],
    "hp_defaults": {
        "learning_rate": 0.001,
        "weight_decay": 0.0001,
        "epochs": 1,
        "batch_size": 32,
        "dropout": 0.1,
    },
    "sampler": "random",
    "epsilon": 0.1,
    "budget_configs": 10,
    "rounds_per_trial": 20,
    "eval_cadence": 5,
    "grouping": {"mode": "sync", "window": "auto"},
    "latency": {"base_min": 0.5, "base_max": 2.0, "jitter_sigma": 0.25},
    "aggregation": "weighted",
    "early_stop_patience": 0,
    "seeds": [1],
    "output_dir": "fedtune_out",
}


@dataclass
class ExperimentConfig:
    """Validated experiment description; round-trips through to_dict()."""

    raw: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.raw[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.raw == other.raw

    def to_dict(self) -> dict:
        return _deep_copy(self.raw)

    def search_space(self) -> SearchSpace:
        spec = self.raw["search_space"]
        if spec == "default":
            return default_search_space()
        dims = []
        for d in spec:
            dims.append(HpDim(
                name=d["name"],
                scale=d["scale"],
                low=float(d["low"]),
                high=float(d["high"]),
                step=float(d["step"]),
                integer=bool(d.get("integer", False)),
            ))
        return SearchSpace(tuple(dims))


def _deep_copy(obj):
    if isinstance(obj, dict):
        return {k: _deep_copy(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_deep_copy(v) for v in obj]
    return obj


def _merge(base: dict, override: dict) -> dict:
    out = _deep_copy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = _deep_copy(v)
    return out


def _require(cond: bool, field_name: str, message: str):
    if not cond:
        raise ConfigurationError(f"{field_name}: {message}")


def validate_config(raw: dict) -> dict:
    """Check every field; error messages name the offending field."""
    known = set(_DEFAULTS)
    for key in raw:
        _require(key in known, key, "unknown configuration field")
    cfg = _merge(_DEFAULTS, raw)

    ds = cfg["dataset"]
    _require(ds.get("type") in ("synthetic", "csv"), "dataset.type",
             "must be 'synthetic' or 'csv'")
    if ds["type"] == "synthetic":
        _require(int(ds.get("num_classes", 0)) >= 2, "dataset.num_classes", "must be >= 2")
        _require(int(ds.get("input_dim", 0)) >= 1, "dataset.input_dim", "must be >= 1")
        _require(int(ds.get("n", 0)) >= int(ds["num_classes"]), "dataset.n",
                 "must be >= num_classes")
        _require(float(ds.get("class_sep", 0)) > 0, "dataset.class_sep", "must be > 0")
    else:
        _require(bool(ds.get("path")), "dataset.path", "required for csv datasets")

    _require(int(cfg["n_clients"]) >= 1, "n_clients", "must be >= 1")
    _require(float(cfg["alpha"]) > 0, "alpha", "must be > 0")
    split = cfg["split"]
    _require(isinstance(split, list) and len(split) == 3, "split",
             "must be [train, val, test]")
    _require(abs(sum(float(f) for f in split) - 1.0) <= 1e-9, "split",
             "fractions must sum to 1")
    _require(0.0 <= float(cfg["server_val_fraction"]) < 1.0, "server_val_fraction",
             "must be in [0, 1)")

    model = cfg["model"]
    _require(model.get("kind") in ("logistic", "mlp"), "model.kind",
             "must be 'logistic' or 'mlp'")
    if model["kind"] == "mlp":
        _require(int(model.get("hidden_dim", 0)) >= 1, "model.hidden_dim",
                 "must be >= 1 for mlp")
    _require(0.0 <= float(model.get("dropout_rate", 0.0)) < 1.0, "model.dropout_rate",
             "must be in [0, 1)")

    _require(cfg["sampler"] in SAMPLERS, "sampler", f"must be one of {SAMPLERS}")
    _require(0.0 <= float(cfg["epsilon"]) <= 1.0, "epsilon", "must be in [0, 1]")
    _require(int(cfg["budget_configs"]) >= 1, "budget_configs", "must be >= 1")
    _require(int(cfg["rounds_per_trial"]) >= 1, "rounds_per_trial", "must be >= 1")
    _require(int(cfg["eval_cadence"]) >= 1, "eval_cadence", "must be >= 1")
    _require(int(cfg["early_stop_patience"]) >= 0, "early_stop_patience", "must be >= 0")

    grouping = cfg["grouping"]
    _require(grouping.get("mode") in GROUP_MODES, "grouping.mode",
             f"must be one of {GROUP_MODES}")
    window = grouping.get("window", "auto")
    if window != "auto":
        _require(float(window) > 0, "grouping.window", "must be > 0 or 'auto'")

    lat = cfg["latency"]
    _require(float(lat.get("base_min", 0)) > 0, "latency.base_min", "must be > 0")
    _require(float(lat.get("base_max", 0)) >= float(lat["base_min"]), "latency.base_max",
             "must be >= base_min")
    _require(float(lat.get("jitter_sigma", 0)) >= 0, "latency.jitter_sigma",
             "must be >= 0")

    _require(cfg["aggregation"] in ("weighted", "uniform"), "aggregation",
             "must be 'weighted' or 'uniform'")
    seeds = cfg["seeds"]
    _require(isinstance(seeds, list) and len(seeds) >= 1, "seeds",
             "must be a nonempty list")
    _require(all(isinstance(s, int) for s in seeds), "seeds", "must be integers")

    tuned = cfg["tuned"]
    _require(isinstance(tuned, list), "tuned", "must be a list of HP names")
    space_names = {d["name"] for d in cfg["search_space"]} \
        if cfg["search_space"] != "default" else \
        {"learning_rate", "weight_decay", "epochs", "batch_size", "dropout"}
    for name in tuned:
        _require(name in space_names, "tuned", f"unknown hyperparameter {name!r}")
    for name in ("learning_rate", "weight_decay", "epochs", "batch_size", "dropout"):
        _require(name in cfg["hp_defaults"], "hp_defaults", f"missing {name!r}")
    return cfg


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigurationError(f"--set {text!r}: expected key=value")
    key, value = text.split("=", 1)
    parsed = yaml.safe_load(value)
    node: dict = {}
    leaf = node
    parts = key.split(".")
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = parsed
    return node


def load_config(path, overrides=(), env=None) -> ExperimentConfig:
    """Load YAML config, apply --set overrides, then FEDTUNE_SEED, then validate."""
    env = os.environ if env is None else env
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as err:
        raise ConfigurationError(f"config file: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigurationError(f"config file: invalid YAML: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigurationError("config file: top level must be a mapping")
    for text in overrides:
        raw = _merge(raw, _parse_override(text))
    seed_env = env.get("FEDTUNE_SEED")
    if seed_env:
        try:
            raw["seeds"] = [int(seed_env)]
        except ValueError:
            raise ConfigurationError("FEDTUNE_SEED: must be an integer")
    return ExperimentConfig(validate_config(raw))


def config_from_dict(raw: dict) -> ExperimentConfig:
    return ExperimentConfig(validate_config(raw))
