"""Round protocols for CL, FL, SL, SFL and ASFL with byte and time accounting.

Every scheme trains with the same per-vehicle batch order, drawn from
``(seed, round, vehicle, epoch)``, so trajectories of different schemes are
directly comparable. Vehicle work inside a round never shares mutable state;
vehicles are processed in ascending id order and the simulated clock, not the
host, decides what ran in parallel.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .netsim import (
    RsuProfile,
    VehicleProfile,
    check_dwell,
    comm_time,
    comp_time,
    downlink_rate,
    sample_rate,
)
from .split import SplitModel, label_bytes, merge, smashed_bytes, split

BYTE_CATEGORIES = ("model_down", "smashed_up", "gradient_down", "model_up", "data_up")
AGGREGATION_MODES = ("fedavg-mean", "paper-literal", "data-weighted")
SCHEMES = ("cl", "fl", "sl", "sfl", "asfl")


# ---------------------------------------------------------------------------
# cut selection


@dataclass(frozen=True)
class SelectionThresholds:
    r1: float
    r2: float
    r3: float
    r4: float

    def __post_init__(self):
        if not 0 < self.r1 <= self.r2 <= self.r3 <= self.r4:
            raise ValueError(f"thresholds must satisfy 0 < r1 <= r2 <= r3 <= r4, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.r1, self.r2, self.r3, self.r4)


# cut for each right-closed band (0, r1], (r1, r2], (r2, r3], (r3, r4]
BAND_CUTS = (8, 6, 4, 2)


def select_cut(rate, thr: SelectionThresholds) -> int:
    """Map a transmission rate to a cut: slower links keep more layers on the vehicle.

    Rates above ``r4`` reuse the last band (cut 2).
    """
    r = getattr(rate, "rate", rate)
    if not r > 0:
        raise ValueError(f"rate must be > 0, got {r}")
    for bound, cut in zip(thr.as_tuple(), BAND_CUTS):
        if r <= bound:
            return cut
    return BAND_CUTS[-1]


# ---------------------------------------------------------------------------
# aggregation


def aggregate(global_params: nn.ParameterSet, models: list[nn.ParameterSet], mode: str = "fedavg-mean",
              weights=None) -> nn.ParameterSet:
    """Combine whole vehicle models into the next global model.

    ``fedavg-mean`` is the uniform mean of the models. ``paper-literal`` applies
    ``w - mean(w_n - w)``, i.e. the update with its sign as printed, which steps
    away from the vehicles' mean. ``data-weighted`` weights model ``n`` by
    ``weights[n]`` (typically the local sample count).
    """
    if not models:
        raise ValueError("nothing to aggregate")
    for m in models:
        if not m.same_layout(global_params):
            raise nn.ShapeError("model layout differs from the global model")
    stack = np.stack([m.values for m in models])
    if mode == "fedavg-mean":
        values = stack.mean(axis=0)
    elif mode == "paper-literal":
        values = global_params.values - (stack - global_params.values).mean(axis=0)
    elif mode == "data-weighted":
        if weights is None or len(weights) != len(models):
            raise ValueError("data-weighted aggregation needs one weight per model")
        w = np.asarray(weights, dtype=np.float64)
        values = (w[:, None] * stack).sum(axis=0) / w.sum()
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}; choose from {AGGREGATION_MODES}")
    return global_params.with_values(values)


# ---------------------------------------------------------------------------
# state and records


@dataclass(frozen=True, eq=False)
class Vehicle:
    profile: VehicleProfile
    data: Dataset

    @property
    def id(self) -> int:
        return self.profile.id


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    local_epochs: int = 5
    batch_size: int = 16
    aggregation: str = "fedavg-mean"
    seed: int = 0
    rsu: RsuProfile = field(default_factory=RsuProfile)

    def __post_init__(self):
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {self.aggregation!r}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


@dataclass(frozen=True, eq=False)
class RoundState:
    round: int
    params: nn.ParameterSet


@dataclass
class RoundRecord:
    round: int
    scheme: str
    bytes: dict = field(default_factory=lambda: dict.fromkeys(BYTE_CATEGORIES, 0))
    per_vehicle_bytes: dict = field(default_factory=lambda: defaultdict(int))
    cuts: dict = field(default_factory=dict)
    participants: list = field(default_factory=list)
    time_vehicle_compute: float = 0.0
    time_rsu_compute: float = 0.0
    time_comm: float = 0.0
    wall_clock: float = 0.0
    train_loss: float = math.nan
    test_loss: float = math.nan
    test_accuracy: float = math.nan

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    def send(self, vid: int, category: str, nbytes: int, rate: float) -> float:
        """Log one message and return its transfer time."""
        self.bytes[category] += nbytes
        self.per_vehicle_bytes[vid] += nbytes
        t = comm_time(nbytes, rate)
        self.time_comm += t
        return t

    def vehicle_compute(self, flops: float, capacity: float) -> float:
        t = comp_time(flops, capacity)
        self.time_vehicle_compute += t
        return t

    def rsu_compute(self, flops: float, capacity: float) -> float:
        t = comp_time(flops, capacity)
        self.time_rsu_compute += t
        return t


# ---------------------------------------------------------------------------
# shared training helpers


def epoch_batches(n_samples: int, batch_size: int, seed: int, round: int, vehicle_id: int,
                  epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batch index lists for one local epoch of one vehicle."""
    perm = np.random.default_rng([seed, 1, round, vehicle_id, epoch]).permutation(n_samples)
    return [perm[i:i + batch_size] for i in range(0, n_samples, batch_size)]


def central_batches(n_samples: int, batch_size: int, seed: int, round: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, 2, round, epoch]).permutation(n_samples)
    return [perm[i:i + batch_size] for i in range(0, n_samples, batch_size)]


def _local_schedule(v: Vehicle, cfg: TrainConfig, round: int):
    for epoch in range(cfg.local_epochs):
        yield from epoch_batches(len(v.data), cfg.batch_size, cfg.seed, round, v.id, epoch)


def sgd_full_step(spec, params, x, y, lr):
    logits, cache = nn.forward(spec, params, x)
    loss, g = nn.loss_and_grad(logits, y)
    grads, _ = nn.backward(spec, params, cache, g)
    return nn.sgd_step(params, grads, lr), loss


def split_step(spec, vside, rside, x, y, lr):
    """One smashed-data exchange: vehicle forward, RSU forward/backward/update,
    gradient back to the vehicle, vehicle backward/update."""
    cut = vside.hi
    smashed, vcache = nn.forward(spec, vside, x, 0, cut)
    logits, rcache = nn.forward(spec, rside, smashed, cut, spec.num_layers)
    loss, g = nn.loss_and_grad(logits, y)
    rgrads, smashed_grad = nn.backward(spec, rside, rcache, g)
    rside = nn.sgd_step(rside, rgrads, lr)
    vgrads, _ = nn.backward(spec, vside, vcache, smashed_grad)
    vside = nn.sgd_step(vside, vgrads, lr)
    return vside, rside, loss


def channel_rates(fleet: list[Vehicle], round: int, seed: int) -> dict[int, float]:
    return {v.id: sample_rate(v.profile, round, seed).rate for v in fleet}


def assign_cuts(fleet: list[Vehicle], round: int, seed: int, thr: SelectionThresholds) -> dict[int, int]:
    return {v.id: select_cut(sample_rate(v.profile, round, seed), thr) for v in fleet}


def _aggregation_time(rec: RoundRecord, spec, n_models: int, rsu: RsuProfile) -> float:
    return rec.rsu_compute(n_models * spec.num_params, rsu.compute_capacity) if n_models else 0.0


def _sorted(fleet):
    return sorted(fleet, key=lambda v: v.id)


# ---------------------------------------------------------------------------
# schemes


def run_round_fl(state: RoundState, fleet: list[Vehicle], cfg: TrainConfig):
    """FedAvg round: every vehicle trains the whole model locally, RSU averages."""
    spec, t = state.params.spec, state.round
    rec = RoundRecord(t, "fl")
    rates = channel_rates(fleet, t, cfg.seed)
    full_bytes = nn.param_bytes(spec, 0, spec.num_layers)
    models, weights, finish = [], [], []
    loss_sum, n_seen = 0.0, 0
    for v in _sorted(fleet):
        r = rates[v.id]
        rec.cuts[v.id] = spec.num_layers
        elapsed = rec.send(v.id, "model_down", full_bytes, downlink_rate(cfg.rsu, r))
        params = state.params
        for idx in _local_schedule(v, cfg, t):
            params, loss = sgd_full_step(spec, params, v.data.samples[idx], v.data.labels[idx], cfg.lr)
            loss_sum += loss * len(idx)
            n_seen += len(idx)
            elapsed += rec.vehicle_compute(nn.train_flops(spec, 0, spec.num_layers, len(idx)),
                                           v.profile.compute_capacity)
        up = comm_time(full_bytes, r)
        if check_dwell(v.profile, elapsed + up):
            elapsed += rec.send(v.id, "model_up", full_bytes, r)
            models.append(params)
            weights.append(len(v.data))
            rec.participants.append(v.id)
        finish.append(elapsed)
    new = aggregate(state.params, models, cfg.aggregation, weights) if models else state.params
    rec.wall_clock = max(finish, default=0.0) + _aggregation_time(rec, spec, len(models), cfg.rsu)
    rec.train_loss = loss_sum / n_seen if n_seen else math.nan
    return RoundState(t + 1, new), rec


def run_round_sl(state: RoundState, fleet: list[Vehicle], cfg: TrainConfig, cut: int):
    """Sequential split learning: one vehicle-side model relayed through the RSU,
    one shared RSU-side model. Nothing overlaps in time."""
    spec, t = state.params.spec, state.round
    rec = RoundRecord(t, "sl")
    rates = channel_rates(fleet, t, cfg.seed)
    sm = split(state.params, cut)
    vside, rside = sm.vehicle_side, sm.rsu_side
    vbytes = nn.param_bytes(spec, 0, cut)
    rsu_cap = cfg.rsu.compute_capacity
    clock = 0.0
    loss_sum, n_seen = 0.0, 0
    for v in _sorted(fleet):
        r, cap = rates[v.id], v.profile.compute_capacity
        down = downlink_rate(cfg.rsu, r)
        rec.cuts[v.id] = cut
        clock += rec.send(v.id, "model_down", vbytes, down)
        v_new, r_new = vside, rside
        v_loss, v_seen = 0.0, 0
        for idx in _local_schedule(v, cfg, t):
            b = len(idx)
            v_new, r_new, loss = split_step(spec, v_new, r_new, v.data.samples[idx], v.data.labels[idx], cfg.lr)
            v_loss += loss * b
            v_seen += b
            clock += rec.vehicle_compute(nn.flops(spec, 0, cut, b), cap)
            clock += rec.send(v.id, "smashed_up", smashed_bytes(spec, cut, b) + label_bytes(spec, cut, b), r)
            clock += rec.rsu_compute(nn.train_flops(spec, cut, spec.num_layers, b), rsu_cap)
            clock += rec.send(v.id, "gradient_down", smashed_bytes(spec, cut, b), down)
            clock += rec.vehicle_compute(nn.BACKWARD_FLOP_FACTOR * nn.flops(spec, 0, cut, b), cap)
        loss_sum += v_loss
        n_seen += v_seen
        up = comm_time(vbytes, r)
        if check_dwell(v.profile, clock + up):
            clock += rec.send(v.id, "model_up", vbytes, r)
            vside, rside = v_new, r_new
            rec.participants.append(v.id)
    new = merge(SplitModel(vside, rside, cut))
    rec.wall_clock = clock
    rec.train_loss = loss_sum / n_seen if n_seen else math.nan
    return RoundState(t + 1, new), rec


def run_round_sfl(state: RoundState, fleet: list[Vehicle], cfg: TrainConfig, cuts, scheme: str = "sfl"):
    """Parallel split federated round.

    ``cuts`` is one cut for every vehicle (SFL) or a ``{vehicle id: cut}`` map
    (ASFL). Each vehicle gets its own RSU-side replica; after local training the
    RSU merges every vehicle side with its replica and aggregates the whole
    models. The clock runs one exchange step at a time: vehicle forwards and
    uploads overlap, RSU replicas are served one after another, gradient
    downloads and vehicle backwards overlap again.
    """
    spec, t = state.params.spec, state.round
    L = spec.num_layers
    rec = RoundRecord(t, scheme)
    rates = channel_rates(fleet, t, cfg.seed)
    if not isinstance(cuts, dict):
        cuts = {v.id: cuts for v in fleet}
    rsu_cap = cfg.rsu.compute_capacity
    # per vehicle: list of (forward+upload, rsu, download+backward) seconds per step
    traces: dict[int, list[tuple[float, float, float]]] = {}
    downloads, uploads, trained = {}, {}, {}
    loss_sum, n_seen = 0.0, 0
    for v in _sorted(fleet):
        cut = cuts[v.id]
        r, cap = rates[v.id], v.profile.compute_capacity
        down = downlink_rate(cfg.rsu, r)
        rec.cuts[v.id] = cut
        sm = split(state.params, cut)
        vside, rside = sm.vehicle_side, sm.rsu_side
        vbytes = nn.param_bytes(spec, 0, cut)
        downloads[v.id] = rec.send(v.id, "model_down", vbytes, down)
        steps = []
        for idx in _local_schedule(v, cfg, t):
            b = len(idx)
            vside, rside, loss = split_step(spec, vside, rside, v.data.samples[idx], v.data.labels[idx], cfg.lr)
            loss_sum += loss * b
            n_seen += b
            fwd = rec.vehicle_compute(nn.flops(spec, 0, cut, b), cap)
            fwd += rec.send(v.id, "smashed_up", smashed_bytes(spec, cut, b) + label_bytes(spec, cut, b), r)
            mid = rec.rsu_compute(nn.train_flops(spec, cut, L, b), rsu_cap)
            bwd = rec.send(v.id, "gradient_down", smashed_bytes(spec, cut, b), down)
            bwd += rec.vehicle_compute(nn.BACKWARD_FLOP_FACTOR * nn.flops(spec, 0, cut, b), cap)
            steps.append((fwd, mid, bwd))
        traces[v.id] = steps
        uploads[v.id] = comm_time(vbytes, r)
        trained[v.id] = (vside, rside, cut, vbytes, r)

    clock = max(downloads.values(), default=0.0)
    n_steps = max((len(s) for s in traces.values()), default=0)
    for k in range(n_steps):
        active = [s[k] for s in traces.values() if k < len(s)]
        clock += max(a[0] for a in active) + sum(a[1] for a in active) + max(a[2] for a in active)

    models, weights, finish = [], [], [clock]
    for v in _sorted(fleet):
        vside, rside, cut, vbytes, r = trained[v.id]
        if check_dwell(v.profile, clock + uploads[v.id]):
            finish.append(clock + rec.send(v.id, "model_up", vbytes, r))
            models.append(merge(SplitModel(vside, rside, cut)))
            weights.append(len(v.data))
            rec.participants.append(v.id)
    new = aggregate(state.params, models, cfg.aggregation, weights) if models else state.params
    rec.wall_clock = max(finish) + _aggregation_time(rec, spec, len(models), cfg.rsu)
    rec.train_loss = loss_sum / n_seen if n_seen else math.nan
    return RoundState(t + 1, new), rec


def run_round_asfl(state: RoundState, fleet: list[Vehicle], cfg: TrainConfig, thresholds: SelectionThresholds):
    """SFL round with cuts re-selected per vehicle from this round's channel rates."""
    cuts = assign_cuts(fleet, state.round, cfg.seed, thresholds)
    return run_round_sfl(state, fleet, cfg, cuts, scheme="asfl")


def run_round_cl(state: RoundState, fleet: list[Vehicle], cfg: TrainConfig):
    """Centralized round: vehicles ship raw data once (round 0), the RSU trains on the pool."""
    spec, t = state.params.spec, state.round
    rec = RoundRecord(t, "cl")
    pooled = pool_datasets([v.data for v in _sorted(fleet)])
    clock = 0.0
    if t == 0:
        rates = channel_rates(fleet, t, cfg.seed)
        uploads = []
        for v in _sorted(fleet):
            nbytes = v.data.samples.size * nn.BYTES_PER_VALUE + len(v.data) * 4
            uploads.append(rec.send(v.id, "data_up", nbytes, rates[v.id]))
        clock = max(uploads, default=0.0)
    params = state.params
    loss_sum, n_seen = 0.0, 0
    for epoch in range(cfg.local_epochs):
        for idx in central_batches(len(pooled), cfg.batch_size, cfg.seed, t, epoch):
            params, loss = sgd_full_step(spec, params, pooled.samples[idx], pooled.labels[idx], cfg.lr)
            loss_sum += loss * len(idx)
            n_seen += len(idx)
            clock += rec.rsu_compute(nn.train_flops(spec, 0, spec.num_layers, len(idx)),
                                     cfg.rsu.compute_capacity)
    rec.participants = [v.id for v in _sorted(fleet)]
    rec.wall_clock = clock
    rec.train_loss = loss_sum / n_seen if n_seen else math.nan
    return RoundState(t + 1, params), rec


def pool_datasets(parts: list[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("no data to pool")
    return Dataset(np.concatenate([p.samples for p in parts]), np.concatenate([p.labels for p in parts]),
                   parts[0].num_classes)


def evaluate(params: nn.ParameterSet, test: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``params`` on ``test``."""
    if len(test) == 0:
        raise ValueError("empty test set")
    spec = params.spec
    loss_sum, correct = 0.0, 0
    for i in range(0, len(test), batch_size):
        x, y = test.samples[i:i + batch_size], test.labels[i:i + batch_size]
        logits = nn.predict(spec, params, x)
        loss, _ = nn.loss_and_grad(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return loss_sum / len(test), correct / len(test)
