"""Experiment harness: build a run from a resolved config, emit CSV + JSON, compare runs."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

from . import config as C
from . import data as D
from . import nn
from . import orchestrator as O
from .models import get_model

METRIC_COLUMNS = (
    "fingerprint", "scheme", "round", "cuts", "participants",
    "bytes_model_down", "bytes_smashed_up", "bytes_gradient_down", "bytes_model_up", "bytes_data_up",
    "bytes_total", "per_vehicle_bytes",
    "time_vehicle_compute", "time_rsu_compute", "time_comm", "wall_clock",
    "train_loss", "test_loss", "test_accuracy",
)


@dataclass
class Setup:
    spec: nn.ModelSpec
    train: D.Dataset
    test: D.Dataset
    partition: D.Partition
    fleet: list[O.Vehicle]


def load_data(cfg: dict) -> tuple[D.Dataset, D.Dataset]:
    ds_cfg = cfg["dataset"]
    if "csv" in ds_cfg:
        shape, k = tuple(ds_cfg["input_shape"]), int(ds_cfg["num_classes"])
        train = D.load_csv(ds_cfg["csv"], shape, k)
        if ds_cfg.get("test_csv"):
            return train, D.load_csv(ds_cfg["test_csv"], shape, k)
        return D.train_test_split(train, int(ds_cfg.get("test_per_class", 10)), cfg["seed"])
    s = ds_cfg["synth"]
    test_per_class = int(s.get("test_per_class", 50))
    full = D.synth_dataset(s["num_classes"], s["per_class"] + test_per_class, tuple(s["input_shape"]),
                           int(s.get("seed", cfg["seed"])), noise=float(s.get("noise", 0.3)))
    return D.train_test_split(full, test_per_class, cfg["seed"])


def build(cfg: dict) -> Setup:
    train, test = load_data(cfg)
    spec = get_model(cfg["model"], train.input_shape, train.num_classes)
    if spec.input_shape != train.input_shape:
        raise C.ConfigError(f"model: input shape {spec.input_shape} does not match data {train.input_shape}")
    L = spec.num_layers
    if cfg["cut"] is not None and not 0 <= cfg["cut"] <= L:
        raise C.ConfigError(f"cut: {cfg['cut']} outside [0, {L}] for this model")
    if cfg["scheme"] == "asfl" and L < max(O.BAND_CUTS) + 1:
        raise C.ConfigError(f"model: asfl selects cuts up to {max(O.BAND_CUTS)}, model has {L} layers")
    p = cfg["partition"]
    n = cfg["n_vehicles"]
    if p["mode"] == "iid":
        part = D.partition_iid(train, n, cfg["seed"])
    else:
        part = D.partition_noniid(train, n, int(p.get("labels_per_vehicle", 6)),
                                  float(p.get("power_alpha", 1.0)), cfg["seed"])
    part.validate(len(train))
    fleet = [O.Vehicle(prof, train.subset(ix)) for prof, ix in zip(C.fleet_profiles(cfg), part.indices)]
    return Setup(spec, train, test, part, fleet)


def run_rounds(cfg: dict, setup: Setup | None = None):
    """Run every round of a resolved config; yields ``(state, record)`` per round."""
    setup = setup or build(cfg)
    tc = C.train_config(cfg)
    state = O.RoundState(0, nn.build_model(setup.spec, cfg["seed"]))
    scheme, cut = cfg["scheme"], cfg["cut"]
    for _ in range(cfg["rounds"]):
        if scheme == "fl":
            state, rec = O.run_round_fl(state, setup.fleet, tc)
        elif scheme == "sl":
            state, rec = O.run_round_sl(state, setup.fleet, tc, cut)
        elif scheme == "sfl":
            state, rec = O.run_round_sfl(state, setup.fleet, tc, cut)
        elif scheme == "asfl":
            state, rec = O.run_round_asfl(state, setup.fleet, tc, C.thresholds(cfg))
        else:
            state, rec = O.run_round_cl(state, setup.fleet, tc)
        rec.test_loss, rec.test_accuracy = O.evaluate(state.params, setup.test)
        yield state, rec


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def record_row(rec: O.RoundRecord, fp: str, label: str) -> dict:
    row = {
        "fingerprint": fp,
        "scheme": label,
        "round": rec.round,
        "cuts": ";".join(f"{k}:{v}" for k, v in sorted(rec.cuts.items())),
        "participants": ";".join(str(v) for v in rec.participants),
        "bytes_total": rec.total_bytes,
        "per_vehicle_bytes": ";".join(f"{k}:{v}" for k, v in sorted(rec.per_vehicle_bytes.items())),
        "time_vehicle_compute": rec.time_vehicle_compute,
        "time_rsu_compute": rec.time_rsu_compute,
        "time_comm": rec.time_comm,
        "wall_clock": rec.wall_clock,
        "train_loss": rec.train_loss,
        "test_loss": rec.test_loss,
        "test_accuracy": rec.test_accuracy,
    }
    for k, v in rec.bytes.items():
        row[f"bytes_{k}"] = v
    return {k: _fmt(row[k]) for k in METRIC_COLUMNS}


def run_experiment(cfg: dict, out_dir=None) -> dict:
    """Run one resolved config and write ``<label>.metrics.csv`` / ``<label>.summary.json``.

    Returns the summary dict with the written paths added under ``files``.
    """
    out = Path(out_dir or cfg.get("out") or "runs")
    out.mkdir(parents=True, exist_ok=True)
    label = C.scheme_label(cfg)
    fp = C.fingerprint(cfg)
    setup = build(cfg)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    total_bytes, total_time, last = 0, 0.0, None
    for _, rec in run_rounds(cfg, setup):
        writer.writerow(record_row(rec, fp, label))
        total_bytes += rec.total_bytes
        total_time += rec.wall_clock
        last = rec
    summary = {
        "scheme": label,
        "fingerprint": fp,
        "rounds": cfg["rounds"],
        "final_accuracy": last.test_accuracy if last else 0.0,
        "final_test_loss": last.test_loss if last else 0.0,
        "total_bytes": total_bytes,
        "total_wall_clock": total_time,
        "partition_sizes": setup.partition.sizes(),
        "config": {k: v for k, v in cfg.items() if k != "out"},
    }
    metrics_path = out / f"{label}.metrics.csv"
    summary_path = out / f"{label}.summary.json"
    partition_path = out / f"{label}.partition.json"
    metrics_path.write_text(buf.getvalue())
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    partition_path.write_text(setup.partition.to_json() + "\n")
    return {**summary, "files": [str(metrics_path), str(summary_path), str(partition_path)]}


def sweep(base: dict, schemes: list[str], out_dir=None) -> list[dict]:
    """Run an unresolved config once per scheme token (e.g. ``fl``, ``sfl4``, ``asfl``).

    Every config is resolved before the first run starts so a bad token fails fast.
    """
    cfgs = []
    for token in schemes:
        raw = copy.deepcopy(base)
        raw["scheme"] = token
        if C.parse_scheme(token)[1] is not None:
            raw["cut"] = None
        cfgs.append(C.resolve(raw))
    return [run_experiment(cfg, out_dir) for cfg in cfgs]


# ---------------------------------------------------------------------------
# comparison


class SchemaError(ValueError):
    pass


def read_metrics(path) -> tuple[list[str], list[dict]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def compare(paths) -> tuple[str, str]:
    """Totals per metrics file plus pairwise ratios. Returns ``(text table, csv text)``."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two metrics files")
    runs = []
    for p in paths:
        header, rows = read_metrics(p)
        if tuple(header) != METRIC_COLUMNS:
            raise SchemaError(f"{p}: unexpected metrics columns")
        name = rows[0]["scheme"] if rows else Path(p).name.split(".")[0]
        runs.append({
            "name": name,
            "path": str(p),
            "bytes": sum(int(r["bytes_total"]) for r in rows),
            "time": sum(float(r["wall_clock"]) for r in rows),
            "acc": float(rows[-1]["test_accuracy"]) if rows else 0.0,
        })
    lines = [f"{'run':<12}{'total_bytes':>16}{'wall_clock_s':>16}{'final_acc':>12}"]
    for r in runs:
        lines.append(f"{r['name']:<12}{r['bytes']:>16d}{r['time']:>16.4f}{r['acc']:>12.4f}")
    lines.append("")
    lines.append(f"{'a/b':<24}{'bytes':>12}{'wall_clock':>12}{'accuracy':>12}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a", "b", "a_bytes", "b_bytes", "a_wall_clock", "b_wall_clock", "a_accuracy", "b_accuracy",
                "bytes_ratio", "wall_clock_ratio", "accuracy_ratio"])
    for a in runs:
        for b in runs:
            if a is b:
                continue
            ratios = (_ratio(a["bytes"], b["bytes"]), _ratio(a["time"], b["time"]), _ratio(a["acc"], b["acc"]))
            lines.append(f"{a['name'] + '/' + b['name']:<24}" + "".join(f"{x:>12.4f}" for x in ratios))
            w.writerow([a["name"], b["name"], a["bytes"], b["bytes"], repr(a["time"]), repr(b["time"]),
                        repr(a["acc"]), repr(b["acc"]), *map(repr, ratios)])
    return "\n".join(lines) + "\n", buf.getvalue()
