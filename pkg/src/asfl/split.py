"""Vehicle-side / RSU-side partitioning of a model at a cut boundary."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import BYTES_PER_VALUE, ModelSpec, ParameterSet, ShapeError, concat_params

LABEL_BYTES = 4


class LayoutMismatch(ShapeError):
    pass


def check_cut(spec: ModelSpec, cut: int) -> int:
    if not isinstance(cut, (int, np.integer)) or not (0 <= cut <= spec.num_layers):
        raise ValueError(f"cut {cut!r} out of range [0, {spec.num_layers}]")
    return int(cut)


@dataclass(frozen=True, eq=False)
class SplitModel:
    vehicle_side: ParameterSet
    rsu_side: ParameterSet
    cut: int

    @property
    def spec(self) -> ModelSpec:
        return self.vehicle_side.spec


@dataclass(frozen=True, eq=False)
class SmashedBatch:
    """Activations at the cut plus the labels, as uploaded by one vehicle."""

    activations: np.ndarray
    labels: np.ndarray
    producer: int
    cut: int

    @property
    def nbytes(self) -> int:
        return self.activations.size * BYTES_PER_VALUE + self.labels.size * LABEL_BYTES


def split(params: ParameterSet, cut: int) -> SplitModel:
    spec = params.spec
    if params.lo != 0 or params.hi != spec.num_layers:
        raise LayoutMismatch("split needs a full-model parameter set")
    cut = check_cut(spec, cut)
    k = spec.offsets[cut]
    vehicle = ParameterSet(spec, params.values[:k].copy(), 0, cut)
    rsu = ParameterSet(spec, params.values[k:].copy(), cut, spec.num_layers)
    return SplitModel(vehicle, rsu, cut)


def merge(sm: SplitModel) -> ParameterSet:
    v, r = sm.vehicle_side, sm.rsu_side
    if v.spec != r.spec:
        raise LayoutMismatch("sides come from different model specs")
    if not (v.lo == 0 and v.hi == sm.cut == r.lo and r.hi == v.spec.num_layers):
        raise LayoutMismatch(
            f"vehicle side [{v.lo}, {v.hi}) and RSU side [{r.lo}, {r.hi}) do not meet at cut {sm.cut}"
        )
    return concat_params([v, r])


def boundary_numel(spec: ModelSpec, cut: int) -> int:
    return math.prod(spec.boundary_shapes[check_cut(spec, cut)])


def smashed_bytes(spec: ModelSpec, cut: int, batch_size: int) -> int:
    """Bytes of the activation message at ``cut`` for ``batch_size`` samples.

    Cut 0 ships the raw input; cut ``L`` ships nothing because the vehicle holds
    the whole model. The gradient message has the same size.
    """
    cut = check_cut(spec, cut)
    if cut == spec.num_layers:
        return 0
    return boundary_numel(spec, cut) * batch_size * BYTES_PER_VALUE


gradient_bytes = smashed_bytes


def label_bytes(spec: ModelSpec, cut: int, batch_size: int) -> int:
    """Labels travel with the smashed data unless the vehicle computes the loss itself."""
    return 0 if check_cut(spec, cut) == spec.num_layers else batch_size * LABEL_BYTES
