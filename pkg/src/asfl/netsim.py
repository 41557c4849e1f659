"""Simulated vehicular channel and the communication/computation time model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VehicleProfile:
    id: int
    compute_capacity: float  # FLOPs per second
    mean_rate: float  # bits per second
    jitter: float = 0.0
    dwell_time: float = math.inf  # seconds inside RSU range

    def __post_init__(self):
        if self.compute_capacity <= 0:
            raise ValueError(f"vehicle {self.id}: compute_capacity must be > 0")
        if self.mean_rate <= 0:
            raise ValueError(f"vehicle {self.id}: mean_rate must be > 0")
        if not 0 <= self.jitter < 1:
            raise ValueError(f"vehicle {self.id}: jitter must lie in [0, 1)")
        if not self.dwell_time > 0:
            raise ValueError(f"vehicle {self.id}: dwell_time must be > 0")


@dataclass(frozen=True)
class RsuProfile:
    compute_capacity: float = 2e10
    broadcast_rate: float = 1e9

    def __post_init__(self):
        if self.compute_capacity <= 0 or self.broadcast_rate <= 0:
            raise ValueError("RSU capacity and broadcast rate must be > 0")


@dataclass(frozen=True)
class ChannelSample:
    vehicle_id: int
    round: int
    rate: float


def sample_rate(profile: VehicleProfile, round: int, seed: int) -> ChannelSample:
    """Rate for one round: ``mean_rate * u`` with ``u ~ U[1 - jitter, 1 + jitter]``."""
    if profile.jitter == 0:
        return ChannelSample(profile.id, round, profile.mean_rate)
    rng = np.random.default_rng([seed, profile.id, round])
    u = rng.uniform(1.0 - profile.jitter, 1.0 + profile.jitter)
    return ChannelSample(profile.id, round, profile.mean_rate * u)


def comm_time(nbytes: float, rate: float) -> float:
    if rate <= 0:
        raise ValueError("rate must be > 0")
    if nbytes < 0:
        raise ValueError("byte count must be >= 0")
    return 8.0 * nbytes / rate


def comp_time(flops: float, capacity: float) -> float:
    if capacity <= 0:
        raise ValueError("capacity must be > 0")
    return flops / capacity


def check_dwell(profile: VehicleProfile, elapsed: float) -> bool:
    return elapsed < profile.dwell_time


def downlink_rate(rsu: RsuProfile, uplink: float) -> float:
    """RSU-to-vehicle rate, limited by both the broadcast radio and the vehicle's channel."""
    return min(rsu.broadcast_rate, uplink)


def reference_fleet(n_vehicles: int = 4, capacity: float = 1e9,
                    rates=(40e6, 80e6, 160e6, 320e6), jitter: float = 0.1) -> list[VehicleProfile]:
    """Identical vehicles whose mean rates cycle through ``rates``."""
    return [
        VehicleProfile(n, capacity, rates[n % len(rates)], jitter)
        for n in range(n_vehicles)
    ]
