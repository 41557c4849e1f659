"""Small numpy neural-network engine with exact backprop and cost accounting.

Tensors are batch-first (``NCHW`` for images). Compute runs in float64 so that
finite-difference checks are meaningful; byte accounting always assumes 32-bit
reals (``BYTES_PER_VALUE``) independent of the compute dtype.

A model is a chain of top-level layers. Boundary ``i`` is the tensor between
layer ``i - 1`` and layer ``i``; boundary 0 is the input and boundary ``L`` the
logits. Composite layers (residual blocks, the classifier head) are atomic, so
no boundary ever falls inside a skip connection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import ClassVar, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BYTES_PER_VALUE = 4
BACKWARD_FLOP_FACTOR = 2
DTYPE = np.float64

Shape = tuple[int, ...]


class ShapeError(ValueError):
    """Raised when tensors or layers do not compose."""


class StaleCacheError(RuntimeError):
    """Raised when backward receives a cache that does not match its inputs."""


@dataclass(frozen=True)
class TensorShape:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ShapeError("tensor shape needs rank >= 1")
        if any(d < 1 for d in dims):
            raise ShapeError(f"non-positive extent in {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def numel(self) -> int:
        return math.prod(self.dims)


# ---------------------------------------------------------------------------
# primitive kernels


def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5)


def _conv_forward(x, w, b, stride, pad):
    out_ch, in_ch, k, _ = w.shape
    cols = _im2col(x, k, stride, pad)
    bsz, ho, wo = cols.shape[:3]
    cols = cols.reshape(bsz * ho * wo, in_ch * k * k)
    y = cols @ w.reshape(out_ch, -1).T + b
    return y.reshape(bsz, ho, wo, out_ch).transpose(0, 3, 1, 2), cols


def _conv_backward(x_shape, w, stride, pad, cols, gy):
    out_ch, in_ch, k, _ = w.shape
    bsz, _, ho, wo = gy.shape
    gy2 = gy.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    gw = (gy2.T @ cols).reshape(w.shape)
    gb = gy2.sum(axis=0)
    gcols = (gy2 @ w.reshape(out_ch, -1)).reshape(bsz, ho, wo, in_ch, k, k)
    gcols = np.ascontiguousarray(gcols.transpose(4, 5, 0, 3, 1, 2))
    _, _, h, wd = x_shape
    gx = np.zeros((bsz, in_ch, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gw, gb, gx


def _glorot(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# layer kinds


class Layer:
    """Base class for layer kinds. Subclasses are frozen dataclasses."""

    kind: ClassVar[str]

    def out_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def param_shapes(self) -> list[Shape]:
        return []

    def init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        return []

    def forward(self, params: list[np.ndarray], x: np.ndarray):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, params: list[np.ndarray], cache, gy: np.ndarray):
        """Return ``(param_grads, gx)``."""
        raise NotImplementedError

    def flops(self, in_shape: Shape) -> int:
        """Forward FLOPs for one sample with per-sample input shape ``in_shape``."""
        return 0

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes())

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    kind: ClassVar[str] = "dense"

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def param_shapes(self):
        return [(self.in_features, self.out_features), (self.out_features,)]

    def init_params(self, rng):
        w = _glorot(rng, (self.in_features, self.out_features), self.in_features, self.out_features)
        return [w, np.zeros(self.out_features)]

    def forward(self, params, x):
        w, b = params
        return x @ w + b, x

    def backward(self, params, cache, gy):
        w, _ = params
        x = cache
        return [x.T @ gy, gy.sum(axis=0)], gy @ w.T

    def flops(self, in_shape):
        return 2 * self.in_features * self.out_features


@dataclass(frozen=True)
class Conv2d(Layer):
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    kind: ClassVar[str] = "conv2d"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {in_shape}")
        ho = _conv_out(in_shape[1], self.kernel, self.stride, self.pad)
        wo = _conv_out(in_shape[2], self.kernel, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} too large for {in_shape}")
        return (self.out_channels, ho, wo)

    def param_shapes(self):
        k = self.kernel
        return [(self.out_channels, self.in_channels, k, k), (self.out_channels,)]

    def init_params(self, rng):
        k2 = self.kernel ** 2
        w = _glorot(rng, self.param_shapes()[0], self.in_channels * k2, self.out_channels * k2)
        return [w, np.zeros(self.out_channels)]

    def forward(self, params, x):
        w, b = params
        y, cols = _conv_forward(x, w, b, self.stride, self.pad)
        return y, (x.shape, cols)

    def backward(self, params, cache, gy):
        w, _ = params
        x_shape, cols = cache
        gw, gb, gx = _conv_backward(x_shape, w, self.stride, self.pad, cols, gy)
        return [gw, gb], gx

    def flops(self, in_shape):
        _, ho, wo = self.out_shape(in_shape)
        return 2 * self.kernel ** 2 * self.in_channels * self.out_channels * ho * wo


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, gy):
        return [], gy * cache

    def flops(self, in_shape):
        return math.prod(in_shape)


@dataclass(frozen=True)
class MaxPool2d(Layer):
    k: int
    stride: int
    kind: ClassVar[str] = "maxpool"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {in_shape}")
        ho = _conv_out(in_shape[1], self.k, self.stride, 0)
        wo = _conv_out(in_shape[2], self.k, self.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"maxpool window {self.k} too large for {in_shape}")
        return (in_shape[0], ho, wo)

    def forward(self, params, x):
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        flat = win.reshape(*win.shape[:4], -1)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, params, cache, gy):
        x_shape, arg = cache
        gx = np.zeros(x_shape, dtype=gy.dtype)
        ho, wo = gy.shape[2:]
        s = self.stride
        for i in range(self.k):
            for j in range(self.k):
                hit = arg == i * self.k + j
                gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += gy * hit
        return [], gx

    def flops(self, in_shape):
        return math.prod(in_shape)


@dataclass(frozen=True)
class GlobalAvgPool(Layer):
    kind: ClassVar[str] = "avgpool_global"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"avgpool_global expects (C, H, W), got {in_shape}")
        return (in_shape[0],)

    def forward(self, params, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, params, cache, gy):
        b, c, h, w = cache
        return [], np.broadcast_to((gy / (h * w))[:, :, None, None], cache).copy()

    def flops(self, in_shape):
        return math.prod(in_shape)


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, gy):
        return [], gy.reshape(cache)


@dataclass(frozen=True)
class ResidualBlock(Layer):
    """``relu(x + conv(relu(conv(x))))`` with two 3x3, stride-1, pad-1 convs."""

    channels: int
    kind: ClassVar[str] = "residual_block"

    @property
    def _conv(self) -> Conv2d:
        return Conv2d(self.channels, self.channels, 3, 1, 1)

    def out_shape(self, in_shape):
        return self._conv.out_shape(in_shape)

    def param_shapes(self):
        return self._conv.param_shapes() * 2

    def init_params(self, rng):
        return self._conv.init_params(rng) + self._conv.init_params(rng)

    def forward(self, params, x):
        w1, b1, w2, b2 = params
        conv = self._conv
        h, c1 = conv.forward([w1, b1], x)
        a, m1 = ReLU().forward([], h)
        z, c2 = conv.forward([w2, b2], a)
        y, m2 = ReLU().forward([], x + z)
        return y, (c1, m1, c2, m2)

    def backward(self, params, cache, gy):
        w1, b1, w2, b2 = params
        c1, m1, c2, m2 = cache
        conv = self._conv
        gs = gy * m2
        (gw2, gb2), ga = conv.backward([w2, b2], c2, gs)
        (gw1, gb1), gx = conv.backward([w1, b1], c1, ga * m1)
        return [gw1, gb1, gw2, gb2], gx + gs

    def flops(self, in_shape):
        n = math.prod(in_shape)
        return 2 * self._conv.flops(in_shape) + 3 * n


@dataclass(frozen=True)
class Classifier(Layer):
    """Global average pool followed by a dense layer, kept as one atomic stage."""

    in_channels: int
    num_classes: int
    kind: ClassVar[str] = "classifier"

    @property
    def _dense(self) -> Dense:
        return Dense(self.in_channels, self.num_classes)

    def out_shape(self, in_shape):
        return self._dense.out_shape(GlobalAvgPool().out_shape(in_shape))

    def param_shapes(self):
        return self._dense.param_shapes()

    def init_params(self, rng):
        return self._dense.init_params(rng)

    def forward(self, params, x):
        p, pc = GlobalAvgPool().forward([], x)
        y, dc = self._dense.forward(params, p)
        return y, (pc, dc)

    def backward(self, params, cache, gy):
        pc, dc = cache
        grads, gp = self._dense.backward(params, dc, gy)
        _, gx = GlobalAvgPool().backward([], pc, gp)
        return grads, gx

    def flops(self, in_shape):
        return math.prod(in_shape) + self._dense.flops((self.in_channels,))


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (Dense, Conv2d, ReLU, MaxPool2d, GlobalAvgPool, Flatten, ResidualBlock, Classifier)
}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


# ---------------------------------------------------------------------------
# model description and parameters


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    boundary_shapes: tuple[Shape, ...] = field(init=False, repr=False, compare=False)
    offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", TensorShape(self.input_shape).dims)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.out_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"layer {len(self.layers) - 1} ({self.layers[-1].kind if self.layers else '-'}): "
                f"model ends in {shapes[-1]}, expected ({self.num_classes},)"
            )
        offsets = [0]
        for layer in self.layers:
            offsets.append(offsets[-1] + layer.num_params)
        object.__setattr__(self, "boundary_shapes", tuple(shapes))
        object.__setattr__(self, "offsets", tuple(offsets))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_split_points(self) -> int:
        """Interior boundaries, i.e. cuts that leave both sides nonempty."""
        return max(self.num_layers - 1, 0)

    @property
    def num_params(self) -> int:
        return self.offsets[-1]

    def check_range(self, lo: int, hi: int) -> None:
        if not (0 <= lo <= hi <= self.num_layers):
            raise ValueError(f"invalid layer range [{lo}, {hi}) for {self.num_layers} layers")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=tuple(layer_from_dict(x) for x in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
        )


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Flat parameters for the contiguous layer range ``[lo, hi)`` of ``spec``."""

    spec: ModelSpec
    values: np.ndarray
    lo: int = 0
    hi: int | None = None

    def __post_init__(self):
        hi = self.spec.num_layers if self.hi is None else self.hi
        object.__setattr__(self, "hi", hi)
        self.spec.check_range(self.lo, hi)
        expected = self.spec.offsets[hi] - self.spec.offsets[self.lo]
        if self.values.shape != (expected,):
            raise ShapeError(f"expected {expected} values for layers [{self.lo}, {hi}), got {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def layer_slice(self, i: int) -> slice:
        if not (self.lo <= i < self.hi):
            raise IndexError(f"layer {i} not in [{self.lo}, {self.hi})")
        base = self.spec.offsets[self.lo]
        return slice(self.spec.offsets[i] - base, self.spec.offsets[i + 1] - base)

    def layer_params(self, i: int) -> list[np.ndarray]:
        flat = self.values[self.layer_slice(i)]
        out, pos = [], 0
        for shape in self.spec.layers[i].param_shapes():
            n = math.prod(shape)
            out.append(flat[pos:pos + n].reshape(shape))
            pos += n
        return out

    def same_layout(self, other: "ParameterSet") -> bool:
        return self.spec == other.spec and self.lo == other.lo and self.hi == other.hi

    def with_values(self, values: np.ndarray) -> "ParameterSet":
        return ParameterSet(self.spec, values, self.lo, self.hi)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(eq=False)
class ForwardCache:
    lo: int
    hi: int
    values: np.ndarray
    caches: list
    out_shape: Shape


def build_model(spec: ModelSpec, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    chunks = [p.ravel() for layer in spec.layers for p in layer.init_params(rng)]
    values = np.concatenate(chunks).astype(DTYPE) if chunks else np.zeros(0, dtype=DTYPE)
    return ParameterSet(spec, values)


def _check_params_cover(spec: ModelSpec, params: ParameterSet, lo: int, hi: int) -> None:
    if params.spec != spec:
        raise ShapeError("parameters belong to a different model spec")
    if not (params.lo <= lo and hi <= params.hi):
        raise ValueError(f"parameters cover [{params.lo}, {params.hi}), need [{lo}, {hi})")


def forward(spec: ModelSpec, params: ParameterSet, x: np.ndarray, from_layer: int = 0,
            to_layer: int | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Run layers ``[from_layer, to_layer)`` on ``x``; returns output and backward cache."""
    to_layer = spec.num_layers if to_layer is None else to_layer
    spec.check_range(from_layer, to_layer)
    _check_params_cover(spec, params, from_layer, to_layer)
    expected = spec.boundary_shapes[from_layer]
    if x.ndim < 1 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"input at boundary {from_layer} must be (B, {expected}), got {x.shape}")
    caches = []
    for i in range(from_layer, to_layer):
        x, c = spec.layers[i].forward(params.layer_params(i), x)
        caches.append(c)
    return x, ForwardCache(from_layer, to_layer, params.values, caches, x.shape)


def backward(spec: ModelSpec, params: ParameterSet, cache: ForwardCache,
             upstream: np.ndarray) -> tuple[ParameterSet, np.ndarray]:
    """Reverse-mode pass matching ``cache``. Returns grads shaped like ``params``."""
    if cache.values is not params.values:
        raise StaleCacheError("cache was produced with different parameters")
    if upstream.shape != cache.out_shape:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {cache.out_shape}")
    _check_params_cover(spec, params, cache.lo, cache.hi)
    grads = np.zeros_like(params.values)
    g = upstream
    for i in range(cache.hi - 1, cache.lo - 1, -1):
        pg, g = spec.layers[i].backward(params.layer_params(i), cache.caches[i - cache.lo], g)
        if pg:
            grads[params.layer_slice(i)] = np.concatenate([a.ravel() for a in pg])
    return params.with_values(grads), g


def loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs {labels.shape[0]} labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def sgd_step(params: ParameterSet, grads: ParameterSet, lr: float) -> ParameterSet:
    if not params.same_layout(grads):
        raise ShapeError("parameter and gradient layouts differ")
    return params.with_values(params.values - lr * grads.values)


def predict(spec: ModelSpec, params: ParameterSet, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(spec, params, x)
    return logits


def param_count(spec: ModelSpec, from_layer: int, to_layer: int) -> int:
    spec.check_range(from_layer, to_layer)
    return spec.offsets[to_layer] - spec.offsets[from_layer]


def param_bytes(spec: ModelSpec, from_layer: int, to_layer: int) -> int:
    return param_count(spec, from_layer, to_layer) * BYTES_PER_VALUE


def flops(spec: ModelSpec, from_layer: int, to_layer: int, batch_size: int) -> int:
    """Forward FLOPs of layers ``[from_layer, to_layer)`` for ``batch_size`` samples.

    Backward costs ``BACKWARD_FLOP_FACTOR`` times the forward count; see
    :func:`train_flops`.
    """
    spec.check_range(from_layer, to_layer)
    if batch_size < 0:
        raise ValueError("batch_size must be >= 0")
    per_sample = sum(spec.layers[i].flops(spec.boundary_shapes[i]) for i in range(from_layer, to_layer))
    return per_sample * batch_size


def train_flops(spec: ModelSpec, from_layer: int, to_layer: int, batch_size: int) -> int:
    return (1 + BACKWARD_FLOP_FACTOR) * flops(spec, from_layer, to_layer, batch_size)


def concat_params(parts: Sequence[ParameterSet]) -> ParameterSet:
    """Join adjacent parameter ranges into one set."""
    if not parts:
        raise ValueError("nothing to concatenate")
    spec = parts[0].spec
    for a, b in zip(parts, parts[1:]):
        if b.spec != spec or a.hi != b.lo:
            raise ShapeError(f"ranges [{a.lo}, {a.hi}) and [{b.lo}, {b.hi}) are not adjacent")
    return ParameterSet(spec, np.concatenate([p.values for p in parts]), parts[0].lo, parts[-1].hi)
