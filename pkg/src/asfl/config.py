"""Run configuration: JSON file + CLI overrides, resolved against defaults."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from pathlib import Path

from .netsim import RsuProfile, VehicleProfile, reference_fleet
from .orchestrator import AGGREGATION_MODES, SelectionThresholds, TrainConfig


class ConfigError(ValueError):
    """Invalid or incomplete run configuration; the message names the field."""


DEFAULTS = {
    "scheme": None,
    "model": "resmini",
    "dataset": {
        "synth": {"num_classes": 10, "per_class": 200, "test_per_class": 50, "noise": 0.3,
                  "input_shape": [1, 16, 16]},
    },
    "partition": {"mode": "noniid", "labels_per_vehicle": 6, "power_alpha": 1.0},
    "n_vehicles": 4,
    "rounds": 10,
    "local_epochs": 5,
    "batch_size": 16,
    "lr": 1e-4,
    "cut": None,
    "thresholds": [50e6, 100e6, 200e6, 400e6],
    "aggregation": "fedavg-mean",
    "fleet": None,
    "rsu": {"compute_capacity": 2e10, "broadcast_rate": 1e9},
    "seed": 0,
    "out": None,
}

# SL without an explicit cut keeps only the first stage on the vehicle
DEFAULT_SL_CUT = 1

_SCHEME_RE = re.compile(r"^(cl|fl|sl|sfl|asfl)(\d+)?$")


def parse_scheme(token: str) -> tuple[str, int | None]:
    """``"sfl4"`` -> ``("sfl", 4)``; ``"fl"`` -> ``("fl", None)``."""
    m = _SCHEME_RE.match(str(token).strip().lower())
    if not m:
        raise ConfigError(f"scheme: unknown scheme {token!r}")
    scheme, cut = m.group(1), m.group(2)
    if cut is not None and scheme not in ("sl", "sfl"):
        raise ConfigError(f"scheme: only sl/sfl take a cut suffix, got {token!r}")
    return scheme, None if cut is None else int(cut)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        replace = k == "model" or (k == "dataset" and isinstance(v, dict) and "csv" in v)
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not replace:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(d.get(k), dict):
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config: {path} must hold a JSON object")
    return raw


def combine(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Layer defaults < file < overrides without validating."""
    cfg = _merge(DEFAULTS, file_values or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            set_path(cfg, key, value)
    return cfg


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Apply defaults < file < overrides, then validate. Returns a plain dict."""
    cfg = combine(file_values, overrides)
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    validate(cfg)
    return cfg


def _positive_int(cfg, key, allow_zero=False):
    v = cfg[key]
    if not isinstance(v, int) or isinstance(v, bool) or v < (0 if allow_zero else 1):
        raise ConfigError(f"{key}: expected a {'non-negative' if allow_zero else 'positive'} integer, got {v!r}")


def validate(cfg: dict) -> None:
    if cfg["scheme"] is None:
        raise ConfigError("scheme: required (one of cl, fl, sl, sfl, asfl)")
    scheme, suffix = parse_scheme(cfg["scheme"])
    if suffix is not None:
        if cfg["cut"] is not None and cfg["cut"] != suffix:
            raise ConfigError(f"cut: {cfg['cut']} conflicts with scheme {cfg['scheme']!r}")
        cfg["scheme"], cfg["cut"] = scheme, suffix
    else:
        cfg["scheme"] = scheme
    if scheme == "sfl" and cfg["cut"] is None:
        raise ConfigError("cut: required for scheme sfl")
    if scheme == "sl" and cfg["cut"] is None:
        cfg["cut"] = DEFAULT_SL_CUT
    if scheme not in ("sl", "sfl"):
        cfg["cut"] = None
    for key in ("n_vehicles", "local_epochs", "batch_size"):
        _positive_int(cfg, key)
    _positive_int(cfg, "rounds", allow_zero=True)
    _positive_int(cfg, "seed", allow_zero=True)
    if not isinstance(cfg["lr"], (int, float)) or cfg["lr"] < 0:
        raise ConfigError(f"lr: expected a non-negative number, got {cfg['lr']!r}")
    if cfg["aggregation"] not in AGGREGATION_MODES:
        raise ConfigError(f"aggregation: expected one of {AGGREGATION_MODES}, got {cfg['aggregation']!r}")
    thr = cfg["thresholds"]
    if not isinstance(thr, (list, tuple)) or len(thr) != 4:
        raise ConfigError("thresholds: expected four rates r1..r4")
    try:
        SelectionThresholds(*map(float, thr))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"thresholds: {exc}") from None
    part = cfg["partition"]
    if part.get("mode") not in ("iid", "noniid"):
        raise ConfigError(f"partition.mode: expected iid or noniid, got {part.get('mode')!r}")
    ds = cfg["dataset"]
    if not isinstance(ds, dict) or not ({"synth", "csv"} & set(ds)):
        raise ConfigError("dataset: expected {'synth': {...}} or {'csv': path, ...}")
    if "csv" in ds and ("input_shape" not in ds or "num_classes" not in ds):
        raise ConfigError("dataset: csv source needs input_shape and num_classes")
    if cfg["fleet"] is not None and len(cfg["fleet"]) != cfg["n_vehicles"]:
        raise ConfigError(f"fleet: {len(cfg['fleet'])} profiles for n_vehicles={cfg['n_vehicles']}")
    try:
        fleet_profiles(cfg)
        RsuProfile(**cfg["rsu"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fleet/rsu: {exc}") from None


def scheme_label(cfg: dict) -> str:
    if cfg["scheme"] == "sfl" or (cfg["scheme"] == "sl" and cfg["cut"] != DEFAULT_SL_CUT):
        return f"{cfg['scheme']}{cfg['cut']}"
    return cfg["scheme"]


def fleet_profiles(cfg: dict) -> list[VehicleProfile]:
    if cfg["fleet"] is None:
        return reference_fleet(cfg["n_vehicles"])
    out = []
    for n, p in enumerate(cfg["fleet"]):
        p = dict(p)
        p.setdefault("id", n)
        dwell = p.get("dwell_time")
        p["dwell_time"] = math.inf if dwell is None else float(dwell)
        out.append(VehicleProfile(**p))
    return out


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(lr=float(cfg["lr"]), local_epochs=cfg["local_epochs"], batch_size=cfg["batch_size"],
                       aggregation=cfg["aggregation"], seed=cfg["seed"], rsu=RsuProfile(**cfg["rsu"]))


def thresholds(cfg: dict) -> SelectionThresholds:
    return SelectionThresholds(*map(float, cfg["thresholds"]))


def fingerprint(cfg: dict) -> str:
    """Stable hash of the resolved config (output location excluded)."""
    canon = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
