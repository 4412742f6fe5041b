"""Run configuration: defaults, JSON files, and dotted overrides.

Precedence is defaults < config file < ``--set key=value`` overrides.
The document layout mirrors the published protocol tables (epoch,
window length, filters, kernel size, strides, basic/advanced capsule
blocks, LSTM units, FNN widths and dropout) so a protocol run is a
plain JSON file.  Validation collects every problem before failing.
"""

from __future__ import annotations

import copy
import json
from typing import Any

from .data import SyntheticSpec
from .network import ModelConfig
from .pipeline import FeatureSettings
from .training import TrainConfig, derive_hyperparams

__all__ = [
    "ConfigError",
    "default_config",
    "load_config",
    "apply_overrides",
    "validate_config",
    "feature_settings_from",
    "train_config_from",
    "synthetic_spec_from",
    "resolve_model_config",
    "config_digest",
]


class ConfigError(ValueError):
    """Raised with the full list of validation problems."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_DEFAULTS: dict[str, Any] = {
    "dataset": "synthetic",
    "rul_max": 125.0,
    "features": {
        "num_slow": None,
        "ridge_scale": 1e-8,
        "constant_tol": 1e-10,
        "max_lag": None,
        "per_condition": False,
    },
    "model": {
        "epoch": 50,
        "window_length": None,
        "filters": 64,
        "kernel_size": [1, 2],
        "strides": [1, 2],
        "basic_capsule": {
            "dimensions": None,
            "channels": None,
            "kernel_size": None,
            "strides": [1, 1],
        },
        "advanced_capsule": {"number": None, "dimensions": None},
        "routing_iterations": 3,
        "lstm_units": 16,
        "sequence_length": 5,
        "fnn": {"widths": [200, 100, 1], "dropout": 0.2},
    },
    "training": {
        "batch_size": 64,
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "patience": 10,
        "min_delta": 1e-4,
        "validation_fraction": 0.1,
        "scale_labels": True,
        "shuffle": True,
    },
    "evaluation": {
        "clip": True,
        "histogram_edges": [-50.0, -40.0, -30.0, -20.0, -10.0, 0.0,
                            10.0, 20.0, 30.0, 40.0, 50.0],
    },
    "tune": {
        "filter_candidates": [16, 32, 64],
        "lstm_candidates": [8, 16, 32],
        "explore": "greedy",
        "epochs": 10,
    },
    "synthetic": {
        "channels": 6,
        "latents": 2,
        "periods": [430.0, 170.0],
        "drift_latent": 0,
        "drift_slope": 0.02,
        "noise_scale": 0.1,
        "units": 20,
        "test_units": 10,
        "length_range": [280, 320],
        "rul_max": 120.0,
        "mixing": None,
    },
}

_DATASETS = ("synthetic", "FD001", "FD002", "FD003", "FD004", "milling")


def default_config() -> dict:
    return copy.deepcopy(_DEFAULTS)


def _deep_merge(base: dict, over: dict, path: str, problems: list[str]) -> None:
    for key, value in over.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            problems.append(f"unknown config key {here!r}")
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_merge(base[key], value, here, problems)
        elif isinstance(base[key], dict) and value is not None:
            problems.append(f"{here!r} must be an object")
        else:
            base[key] = value


def load_config(path: str | None = None) -> dict:
    """Defaults merged with an optional JSON file; unknown keys rejected."""
    cfg = default_config()
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path}: invalid JSON ({exc})"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError([f"config file {path}: top level must be an object"])
    problems: list[str] = []
    _deep_merge(cfg, doc, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    """Apply dotted ``key.path=value`` assignments; values parse as JSON."""
    problems: list[str] = []
    for item in assignments:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        ok = True
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                problems.append(f"override {item!r}: unknown key {dotted!r}")
                ok = False
                break
            node = node[k]
        if not ok:
            continue
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            problems.append(f"override {item!r}: unknown key {dotted!r}")
            continue
        if isinstance(node[leaf], dict):
            problems.append(f"override {item!r}: {dotted!r} is an object")
            continue
        node[leaf] = value
    if problems:
        raise ConfigError(problems)
    return cfg


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _check_pair(value, name, problems) -> None:
    if value is None:
        return
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(_is_int(v) and v >= 1 for v in value)):
        problems.append(f"{name} must be a pair of positive integers")


def validate_config(cfg: dict) -> None:
    """Check every field; raise ConfigError listing all problems."""
    p: list[str] = []
    if cfg.get("dataset") not in _DATASETS:
        p.append(f"dataset must be one of {_DATASETS}")
    if not _is_num(cfg.get("rul_max")) or cfg["rul_max"] <= 0:
        p.append("rul_max must be a positive number")

    f = cfg.get("features", {})
    if f.get("num_slow") is not None and (not _is_int(f["num_slow"]) or f["num_slow"] < 1):
        p.append("features.num_slow must be null or a positive integer")
    if not _is_num(f.get("ridge_scale")) or f["ridge_scale"] < 0:
        p.append("features.ridge_scale must be a number >= 0")
    if not _is_num(f.get("constant_tol")) or f["constant_tol"] < 0:
        p.append("features.constant_tol must be a number >= 0")
    if f.get("max_lag") is not None and (not _is_int(f["max_lag"]) or f["max_lag"] < 1):
        p.append("features.max_lag must be null or a positive integer")
    if not isinstance(f.get("per_condition"), bool):
        p.append("features.per_condition must be a boolean")

    m = cfg.get("model", {})
    if not _is_int(m.get("epoch")) or m["epoch"] < 1:
        p.append("model.epoch must be a positive integer")
    if m.get("window_length") is not None and (
            not _is_int(m["window_length"]) or m["window_length"] < 1):
        p.append("model.window_length must be null or a positive integer")
    if not _is_int(m.get("filters")) or m["filters"] < 1:
        p.append("model.filters must be a positive integer")
    _check_pair(m.get("kernel_size"), "model.kernel_size", p)
    _check_pair(m.get("strides"), "model.strides", p)
    bc = m.get("basic_capsule", {})
    for key in ("dimensions", "channels"):
        v = bc.get(key)
        if v is not None and (not _is_int(v) or v < 1):
            p.append(f"model.basic_capsule.{key} must be null or a positive integer")
    _check_pair(bc.get("kernel_size"), "model.basic_capsule.kernel_size", p)
    _check_pair(bc.get("strides"), "model.basic_capsule.strides", p)
    ac = m.get("advanced_capsule", {})
    for key in ("number", "dimensions"):
        v = ac.get(key)
        if v is not None and (not _is_int(v) or v < 1):
            p.append(f"model.advanced_capsule.{key} must be null or a positive integer")
    if not _is_int(m.get("routing_iterations")) or m["routing_iterations"] < 1:
        p.append("model.routing_iterations must be a positive integer")
    if not _is_int(m.get("lstm_units")) or m["lstm_units"] < 1:
        p.append("model.lstm_units must be a positive integer")
    if not _is_int(m.get("sequence_length")) or m["sequence_length"] < 1:
        p.append("model.sequence_length must be a positive integer")
    fnn = m.get("fnn", {})
    widths = fnn.get("widths")
    if (not isinstance(widths, (list, tuple)) or not widths
            or not all(_is_int(w) and w >= 1 for w in widths)
            or widths[-1] != 1):
        p.append("model.fnn.widths must be positive integers ending in 1")
    if not _is_num(fnn.get("dropout")) or not 0 <= fnn["dropout"] < 1:
        p.append("model.fnn.dropout must be in [0, 1)")

    t = cfg.get("training", {})
    if not _is_int(t.get("batch_size")) or t["batch_size"] < 1:
        p.append("training.batch_size must be a positive integer")
    if not _is_num(t.get("learning_rate")) or t["learning_rate"] <= 0:
        p.append("training.learning_rate must be a positive number")
    for key in ("beta1", "beta2"):
        if not _is_num(t.get(key)) or not 0 <= t[key] < 1:
            p.append(f"training.{key} must be in [0, 1)")
    if not _is_num(t.get("eps")) or t["eps"] <= 0:
        p.append("training.eps must be a positive number")
    if not _is_int(t.get("patience")) or t["patience"] < 1:
        p.append("training.patience must be a positive integer")
    if not _is_num(t.get("min_delta")) or t["min_delta"] < 0:
        p.append("training.min_delta must be a number >= 0")
    if not _is_num(t.get("validation_fraction")) or not 0 < t["validation_fraction"] < 1:
        p.append("training.validation_fraction must be in (0, 1)")
    for key in ("scale_labels", "shuffle"):
        if not isinstance(t.get(key), bool):
            p.append(f"training.{key} must be a boolean")

    e = cfg.get("evaluation", {})
    if not isinstance(e.get("clip"), bool):
        p.append("evaluation.clip must be a boolean")
    edges = e.get("histogram_edges")
    if (not isinstance(edges, (list, tuple)) or len(edges) < 2
            or not all(_is_num(x) for x in edges)
            or any(b <= a for a, b in zip(edges, edges[1:]))):
        p.append("evaluation.histogram_edges must be strictly increasing numbers")

    tu = cfg.get("tune", {})
    for key in ("filter_candidates", "lstm_candidates"):
        v = tu.get(key)
        if (not isinstance(v, (list, tuple)) or not v
                or not all(_is_int(x) and x >= 1 for x in v)):
            p.append(f"tune.{key} must be a non-empty list of positive integers")
    if tu.get("explore") not in ("greedy", "full"):
        p.append("tune.explore must be 'greedy' or 'full'")
    if not _is_int(tu.get("epochs")) or tu["epochs"] < 1:
        p.append("tune.epochs must be a positive integer")

    s = cfg.get("synthetic", {})
    for key in ("channels", "latents", "units", "test_units"):
        if not _is_int(s.get(key)) or s[key] < 1:
            p.append(f"synthetic.{key} must be a positive integer")
    periods = s.get("periods")
    if (not isinstance(periods, (list, tuple)) or not periods
            or not all(_is_num(x) and x > 0 for x in periods)):
        p.append("synthetic.periods must be positive numbers")
    if not _is_int(s.get("drift_latent")) or s["drift_latent"] < 0:
        p.append("synthetic.drift_latent must be an integer >= 0")
    if not _is_num(s.get("drift_slope")):
        p.append("synthetic.drift_slope must be a number")
    if not _is_num(s.get("noise_scale")) or s["noise_scale"] < 0:
        p.append("synthetic.noise_scale must be a number >= 0")
    lr = s.get("length_range")
    if (not isinstance(lr, (list, tuple)) or len(lr) != 2
            or not all(_is_int(x) and x >= 2 for x in lr) or lr[0] > lr[1]):
        p.append("synthetic.length_range must be [lo, hi] integers with lo <= hi")
    if not _is_num(s.get("rul_max")) or s["rul_max"] <= 0:
        p.append("synthetic.rul_max must be a positive number")
    if s.get("mixing") is not None and s["mixing"] != "identity" \
            and not isinstance(s["mixing"], list):
        p.append("synthetic.mixing must be null, 'identity', or a matrix")

    if p:
        raise ConfigError(p)


def feature_settings_from(cfg: dict) -> FeatureSettings:
    f = cfg["features"]
    return FeatureSettings(
        rul_max=float(cfg["rul_max"]),
        ridge_scale=float(f["ridge_scale"]),
        constant_tol=float(f["constant_tol"]),
        num_slow=f["num_slow"],
        window=cfg["model"]["window_length"],
        max_lag=f["max_lag"],
        per_condition=f["per_condition"],
    )


def train_config_from(cfg: dict, seed: int, epochs: int | None = None) -> TrainConfig:
    t = cfg["training"]
    scale = float(cfg["rul_max"]) if t["scale_labels"] else 1.0
    return TrainConfig(
        epochs=int(epochs if epochs is not None else cfg["model"]["epoch"]),
        batch_size=int(t["batch_size"]),
        learning_rate=float(t["learning_rate"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        eps=float(t["eps"]),
        patience=int(t["patience"]),
        min_delta=float(t["min_delta"]),
        validation_fraction=float(t["validation_fraction"]),
        label_scale=scale,
        shuffle=bool(t["shuffle"]),
        seed=int(seed),
    )


def synthetic_spec_from(cfg: dict) -> tuple[SyntheticSpec, int]:
    """Spec covering train + test units, and the train-unit count."""
    s = cfg["synthetic"]
    mixing = s["mixing"]
    if isinstance(mixing, list):
        import numpy as np

        mixing = np.asarray(mixing, dtype=np.float64)
    spec = SyntheticSpec(
        channels=int(s["channels"]),
        latents=int(s["latents"]),
        periods=tuple(float(x) for x in s["periods"]),
        drift_latent=int(s["drift_latent"]),
        drift_slope=float(s["drift_slope"]),
        noise_scale=float(s["noise_scale"]),
        units=int(s["units"]) + int(s["test_units"]),
        length_range=(int(s["length_range"][0]), int(s["length_range"][1])),
        rul_max=float(s["rul_max"]),
        mixing=mixing,
    )
    return spec, int(s["units"])


def resolve_model_config(
    cfg: dict,
    frame_channels: int,
    num_slow: int,
    plain_channels: int,
    window: int,
    use_lstm: bool = True,
) -> ModelConfig:
    """Fill the architecture from the config, deriving unset fields.

    ``frame_channels`` is the input width of each frame;
    ``plain_channels`` is the retained sensor-channel count feeding the
    derivation rules.  Capsule dimensionality, advanced capsule
    count/size and channel split default to the coupling rules on
    (plain channels, slow count); explicit config values win.
    """
    m = cfg["model"]
    base = derive_hyperparams(
        num_slow=num_slow,
        n_channels=plain_channels,
        window=window,
        conv_filters=int(m["filters"]),
        lstm_units=int(m["lstm_units"]),
    )
    bc = m["basic_capsule"]
    ac = m["advanced_capsule"]
    caps_dim = int(bc["dimensions"]) if bc["dimensions"] is not None else base.caps_dim
    filters = int(m["filters"])
    if filters % caps_dim != 0:
        filters = base.conv_filters if base.conv_filters % caps_dim == 0 \
            else caps_dim * max(1, round(filters / caps_dim))
    caps_channels = int(bc["channels"]) if bc["channels"] is not None \
        else filters // caps_dim
    try:
        config = ModelConfig(
            window_length=int(window),
            in_channels=int(frame_channels),
            conv_filters=filters,
            conv_kernel=tuple(m["kernel_size"]),
            conv_stride=tuple(m["strides"]),
            caps_dim=caps_dim,
            caps_channels=caps_channels,
            caps_kernel=tuple(bc["kernel_size"]) if bc["kernel_size"] is not None else None,
            caps_stride=tuple(bc["strides"]),
            num_advanced=int(ac["number"]) if ac["number"] is not None
            else base.num_advanced,
            advanced_dim=int(ac["dimensions"]) if ac["dimensions"] is not None
            else base.advanced_dim,
            routing_iterations=int(m["routing_iterations"]),
            lstm_units=int(m["lstm_units"]),
            sequence_length=int(m["sequence_length"]) if use_lstm else 1,
            use_lstm=use_lstm,
            fnn_widths=tuple(int(w) for w in m["fnn"]["widths"]),
            dropout=float(m["fnn"]["dropout"]),
        )
    except ValueError as exc:
        raise ConfigError([f"model: {exc}"]) from None
    return config


def config_digest(cfg: dict) -> str:
    import hashlib

    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
