"""Feed-forward networks evaluated over a flat float64 parameter vector.

Supports Dense, ReLU, Conv2d, BatchNorm, MaxPool, Flatten and identity-skip
residual blocks, with hand-written reverse-mode gradients. Image tensors are
channel-first ``(N, C, H, W)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when a layer receives an input of the wrong shape."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


class NumericError(FloatingPointError):
    pass


def _check_positive(name, *values):
    for v in values:
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ValueError(f"{name} dimensions must be positive integers, got {values}")


# --------------------------------------------------------------------------
# layer specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def __post_init__(self):
        _check_positive("Dense", self.in_features, self.out_features)


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        _check_positive("Conv2d", self.in_ch, self.out_ch, self.k, self.stride)
        if self.padding < 0:
            raise ValueError("Conv2d padding must be >= 0")


@dataclass(frozen=True)
class BatchNorm:
    features: int
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        _check_positive("BatchNorm", self.features)


@dataclass(frozen=True)
class MaxPool:
    window: int

    def __post_init__(self):
        _check_positive("MaxPool", self.window)


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class ResidualBlock:
    layers: tuple
    skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("ResidualBlock needs at least one inner layer")


LayerSpec = Union[Dense, ReLU, Conv2d, BatchNorm, MaxPool, Flatten, ResidualBlock]


def _out_shape(layer, shape: tuple, where: str) -> tuple:
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise DimensionError(where, f"Dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise DimensionError(where, f"Conv2d expects ({layer.in_ch}, H, W), got {shape}")
        h = (shape[1] + 2 * layer.padding - layer.k) // layer.stride + 1
        w = (shape[2] + 2 * layer.padding - layer.k) // layer.stride + 1
        if h < 1 or w < 1:
            raise DimensionError(where, f"kernel {layer.k} too large for input {shape}")
        return (layer.out_ch, h, w)
    if isinstance(layer, BatchNorm):
        if len(shape) not in (1, 3) or shape[0] != layer.features:
            raise DimensionError(where, f"BatchNorm expects {layer.features} features, got {shape}")
        return shape
    if isinstance(layer, MaxPool):
        if len(shape) != 3 or shape[1] % layer.window or shape[2] % layer.window:
            raise DimensionError(where, f"MaxPool({layer.window}) needs divisible (C, H, W), got {shape}")
        return (shape[0], shape[1] // layer.window, shape[2] // layer.window)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ResidualBlock):
        inner = shape
        for i, sub in enumerate(layer.layers):
            inner = _out_shape(sub, inner, f"{where}.{i}")
        if inner != shape:
            raise DimensionError(where, f"residual inner output {inner} != input {shape}")
        return shape
    raise TypeError(f"unknown layer kind {type(layer).__name__}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, str(i))
        if shape != (self.output_dim,):
            raise DimensionError(str(len(self.layers) - 1), f"network output {shape} != ({self.output_dim},)")

    @classmethod
    def mlp(cls, widths: Sequence[int]) -> "NetworkSpec":
        """ReLU MLP with layer widths ``[m, n_1, ..., n_{L-1}, n]``."""
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        layers: list = []
        for i in range(len(widths) - 1):
            layers.append(Dense(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(ReLU())
        return cls(tuple(layers), (widths[0],), widths[-1])

    def dense_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]

    def is_mlp(self) -> bool:
        """True for alternating Dense/ReLU stacks ending in a Dense layer."""
        if len(self.layers) % 2 == 0:
            return False
        for i, layer in enumerate(self.layers):
            want = Dense if i % 2 == 0 else ReLU
            if not isinstance(layer, want):
                return False
        return True

    def widths(self) -> list[int]:
        """Layer widths ``n_0 = m, n_1, ..., n_L = n`` of an MLP."""
        dense = [self.layers[i] for i in self.dense_layers()]
        return [dense[0].in_features] + [d.out_features for d in dense]

    @property
    def min_width(self) -> int:
        return min(self.widths()[1:-1] or self.widths())

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_shape": list(self.input_shape),
                "output_dim": self.output_dim,
                "layers": [_layer_to_dict(l) for l in self.layers],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        doc = json.loads(text)
        return cls(
            tuple(_layer_from_dict(d) for d in doc["layers"]),
            tuple(doc["input_shape"]),
            int(doc["output_dim"]),
        )


def layer_input_shapes(spec: NetworkSpec) -> dict:
    """Map every layer path (``"3"``, ``"5.0"``, ...) to ``(layer, per-sample input shape)``."""
    out = {}

    def walk(layers, shape, prefix):
        for i, layer in enumerate(layers):
            path = f"{prefix}{i}"
            out[path] = (layer, shape)
            if isinstance(layer, ResidualBlock):
                walk(layer.layers, shape, path + ".")
            shape = _out_shape(layer, shape, path)

    walk(spec.layers, spec.input_shape, "")
    return out


_KINDS = {c.__name__: c for c in (Dense, ReLU, Conv2d, BatchNorm, MaxPool, Flatten, ResidualBlock)}


def _layer_to_dict(layer) -> dict:
    d = {"kind": type(layer).__name__}
    if isinstance(layer, ResidualBlock):
        d["layers"] = [_layer_to_dict(l) for l in layer.layers]
        d["skip"] = layer.skip
    else:
        d.update(layer.__dict__)
    return d


def _layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind == "ResidualBlock":
        return ResidualBlock(tuple(_layer_from_dict(x) for x in d["layers"]), bool(d.get("skip", True)))
    return _KINDS[kind](**d)


# --------------------------------------------------------------------------
# parameter vector
# --------------------------------------------------------------------------

ROLES = ("weight", "bias", "bn-scale", "bn-shift")


@dataclass(frozen=True)
class Segment:
    layer: str
    role: str
    start: int
    stop: int
    shape: tuple

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass
class ParamVector:
    values: np.ndarray
    segments: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.segments = tuple(self.segments)
        total = sum(s.size for s in self.segments)
        if self.values.shape != (total,):
            raise ValueError(f"values length {self.values.shape} does not match segments ({total})")

    def __len__(self) -> int:
        return self.values.shape[0]

    def segment(self, layer: str, role: str) -> Segment:
        for s in self.segments:
            if s.layer == layer and s.role == role:
                return s
        raise KeyError((layer, role))

    def view(self, layer, role: str) -> np.ndarray:
        s = self.segment(str(layer), role)
        return self.values[s.start : s.stop].reshape(s.shape)

    def mask(self, *roles: str) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        for s in self.segments:
            if s.role in roles:
                m[s.start : s.stop] = True
        return m

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.segments)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def unflatten(self) -> dict:
        return {(s.layer, s.role): self.values[s.start : s.stop].reshape(s.shape).copy() for s in self.segments}

    @classmethod
    def flatten(cls, arrays: dict, segments: Iterable[Segment]) -> "ParamVector":
        segments = tuple(segments)
        total = sum(s.size for s in segments)
        values = np.empty(total)
        for s in segments:
            a = np.asarray(arrays[(s.layer, s.role)], dtype=np.float64)
            if a.shape != s.shape:
                raise DimensionError(s.layer, f"{s.role} shape {a.shape} != {s.shape}")
            values[s.start : s.stop] = a.ravel()
        return cls(values, segments)

    def save(self, path) -> None:
        Path(path).write_bytes(dump_params(self))

    @classmethod
    def load(cls, path) -> "ParamVector":
        return load_params(Path(path).read_bytes())


MAGIC = b"LPPARAM1"


def dump_params(params: ParamVector) -> bytes:
    """Checkpoint layout: magic, segment table, then little-endian float64 values."""
    out = [MAGIC, struct.pack("<I", len(params.segments))]
    for s in params.segments:
        name = f"{s.layer}/{s.role}".encode()
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<I", len(s.shape)))
        out.append(struct.pack(f"<{len(s.shape)}Q", *s.shape))
    out.append(struct.pack("<Q", len(params)))
    out.append(params.values.astype("<f8").tobytes())
    return b"".join(out)


def load_params(blob: bytes) -> ParamVector:
    if blob[:8] != MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    segments = []
    start = 0
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        layer, role = blob[pos : pos + ln].decode().rsplit("/", 1)
        pos += ln
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape))
        segments.append(Segment(layer, role, start, start + size, tuple(int(d) for d in shape)))
        start += size
    (total,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if total != start or len(blob) - pos != 8 * total:
        raise ValueError("checkpoint truncated or segment table inconsistent")
    values = np.frombuffer(blob, dtype="<f8", count=total, offset=pos).astype(np.float64)
    return ParamVector(values, tuple(segments))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] < 1 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("batch needs N >= 1 inputs with one label each")
        if self.num_classes is not None and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx], self.num_classes)


# --------------------------------------------------------------------------
# compiled plan: one op per layer, bound to its parameter slices
# --------------------------------------------------------------------------


class _Ctx:
    def __init__(self, mode, stats, preacts, per_sample=False, momentum=None):
        self.mode = mode
        self.stats = stats
        self.preacts = preacts
        self.per_sample = per_sample
        self.momentum = momentum


def _accumulate(gout, seg, g, per_sample):
    if per_sample:
        gout[:, seg.start : seg.stop] += g.reshape(g.shape[0], -1)
    else:
        gout[seg.start : seg.stop] += g.ravel()


class _DenseOp:
    def __init__(self, layer, path, w, b):
        self.layer, self.path, self.w, self.b = layer, path, w, b

    def forward(self, x, v, ctx):
        W = v[self.w.start : self.w.stop].reshape(self.w.shape)
        return x @ W.T + v[self.b.start : self.b.stop], x

    def backward(self, dy, x, v, gout, ctx):
        W = v[self.w.start : self.w.stop].reshape(self.w.shape)
        if ctx.per_sample:
            _accumulate(gout, self.w, np.einsum("no,ni->noi", dy, x), True)
            _accumulate(gout, self.b, dy, True)
        else:
            _accumulate(gout, self.w, dy.T @ x, False)
            _accumulate(gout, self.b, dy.sum(0), False)
        return dy @ W


class _ReLUOp:
    def __init__(self, path):
        self.path = path

    def forward(self, x, v, ctx):
        if ctx.preacts is not None:
            ctx.preacts.append(x)
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, mask, v, gout, ctx):
        return dy * mask


class _ConvOp:
    def __init__(self, layer, path, w, b):
        self.layer, self.path, self.w, self.b = layer, path, w, b

    def _cols(self, x):
        p, s, k = self.layer.padding, self.layer.stride, self.layer.k
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]  # (N, C, Ho, Wo, k, k)
        n, c, ho, wo = win.shape[:4]
        # rows are output positions, columns follow the (C, k, k) weight layout
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k), ho, wo

    def forward(self, x, v, ctx):
        W = v[self.w.start : self.w.stop].reshape(self.w.shape[0], -1)
        cols, ho, wo = self._cols(x)
        y = cols @ W.T + v[self.b.start : self.b.stop]
        y = y.transpose(0, 2, 1).reshape(x.shape[0], -1, ho, wo)
        return y, (x.shape, cols)

    def backward(self, dy, cache, v, gout, ctx):
        in_shape, cols = cache
        W = v[self.w.start : self.w.stop].reshape(self.w.shape[0], -1)
        n, o, ho, wo = dy.shape
        dyr = dy.reshape(n, o, ho * wo)
        if ctx.per_sample:
            _accumulate(gout, self.w, np.matmul(dyr, cols), True)
            _accumulate(gout, self.b, dyr.sum(2), True)
        else:
            _accumulate(gout, self.w, dyr.transpose(1, 0, 2).reshape(o, -1) @ cols.reshape(-1, cols.shape[2]), False)
            _accumulate(gout, self.b, dyr.sum((0, 2)), False)
        k, s, p = self.layer.k, self.layer.stride, self.layer.padding
        _, c, h, w = in_shape
        dcols = (dyr.transpose(0, 2, 1) @ W).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[..., i, j].transpose(
                    0, 3, 1, 2
                )
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class _BatchNormOp:
    def __init__(self, layer, path, g, b):
        self.layer, self.path, self.g, self.b = layer, path, g, b

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, a, x):
        return a if x.ndim == 2 else a[None, :, None, None]

    def forward(self, x, v, ctx):
        gamma = v[self.g.start : self.g.stop]
        beta = v[self.b.start : self.b.stop]
        axes = self._axes(x)
        if ctx.mode == "train":
            mean = x.mean(axes)
            var = x.var(axes)
            st = ctx.stats.get(self.path) if ctx.stats is not None else None
            if st is not None:
                m = self.layer.momentum if ctx.momentum is None else ctx.momentum
                count = x.size // x.shape[1]
                unbiased = var * count / max(count - 1, 1)
                st["mean"] = (1 - m) * st["mean"] + m * mean
                st["var"] = (1 - m) * st["var"] + m * unbiased
        else:
            st = (ctx.stats or {}).get(self.path)
            if st is None:
                mean, var = np.zeros(self.layer.features), np.ones(self.layer.features)
            else:
                mean, var = st["mean"], st["var"]
        inv = 1.0 / np.sqrt(var + self.layer.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        y = xhat * self._bcast(gamma, x) + self._bcast(beta, x)
        return y, (xhat, inv, ctx.mode)

    def backward(self, dy, cache, v, gout, ctx):
        xhat, inv, mode = cache
        gamma = v[self.g.start : self.g.stop]
        axes = self._axes(dy)
        if ctx.per_sample:
            red = tuple(a for a in axes if a != 0)
            _accumulate(gout, self.g, (dy * xhat).sum(red) if red else dy * xhat, True)
            _accumulate(gout, self.b, dy.sum(red) if red else dy, True)
        else:
            _accumulate(gout, self.g, (dy * xhat).sum(axes), False)
            _accumulate(gout, self.b, dy.sum(axes), False)
        dxhat = dy * self._bcast(gamma, dy)
        if mode != "train":
            return dxhat * self._bcast(inv, dy)
        m = dy.size // dy.shape[1]
        s1 = self._bcast(dxhat.sum(axes), dy)
        s2 = self._bcast((dxhat * xhat).sum(axes), dy)
        return self._bcast(inv, dy) * (dxhat - s1 / m - xhat * s2 / m)


class _MaxPoolOp:
    def __init__(self, layer, path):
        self.layer, self.path = layer, path

    def forward(self, x, v, ctx):
        n, c, h, w = x.shape
        k = self.layer.window
        blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        idx = blocks.argmax(-1)
        y = np.take_along_axis(blocks, idx[..., None], -1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache, v, gout, ctx):
        (n, c, h, w), idx = cache
        k = self.layer.window
        blocks = np.zeros((n, c, h // k, w // k, k * k))
        np.put_along_axis(blocks, idx[..., None], dy[..., None], -1)
        return blocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class _FlattenOp:
    def __init__(self, path):
        self.path = path

    def forward(self, x, v, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, v, gout, ctx):
        return dy.reshape(shape)


class _ResidualOp:
    def __init__(self, layer, path, ops):
        self.layer, self.path, self.ops = layer, path, ops

    def forward(self, x, v, ctx):
        h, caches = _run_forward(self.ops, x, v, ctx)
        return (h + x if self.layer.skip else h), caches

    def backward(self, dy, caches, v, gout, ctx):
        dx = _run_backward(self.ops, caches, dy, v, gout, ctx)
        return dx + dy if self.layer.skip else dx


def _run_forward(ops, x, v, ctx):
    caches = []
    for op in ops:
        x, cache = op.forward(x, v, ctx)
        caches.append(cache)
    return x, caches


def _run_backward(ops, caches, dy, v, gout, ctx):
    for op, cache in zip(reversed(ops), reversed(caches)):
        dy = op.backward(dy, cache, v, gout, ctx)
    return dy


def _compile(layers, prefix, offset, segments):
    ops = []

    def seg(path, role, shape):
        nonlocal offset
        size = int(np.prod(shape))
        s = Segment(path, role, offset, offset + size, tuple(shape))
        offset += size
        segments.append(s)
        return s

    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        if isinstance(layer, Dense):
            w = seg(path, "weight", (layer.out_features, layer.in_features))
            ops.append(_DenseOp(layer, path, w, seg(path, "bias", (layer.out_features,))))
        elif isinstance(layer, Conv2d):
            w = seg(path, "weight", (layer.out_ch, layer.in_ch, layer.k, layer.k))
            ops.append(_ConvOp(layer, path, w, seg(path, "bias", (layer.out_ch,))))
        elif isinstance(layer, BatchNorm):
            g = seg(path, "bn-scale", (layer.features,))
            ops.append(_BatchNormOp(layer, path, g, seg(path, "bn-shift", (layer.features,))))
        elif isinstance(layer, ReLU):
            ops.append(_ReLUOp(path))
        elif isinstance(layer, MaxPool):
            ops.append(_MaxPoolOp(layer, path))
        elif isinstance(layer, Flatten):
            ops.append(_FlattenOp(path))
        elif isinstance(layer, ResidualBlock):
            inner, offset = _compile(layer.layers, path + ".", offset, segments)
            ops.append(_ResidualOp(layer, path, inner))
        else:
            raise TypeError(f"unknown layer kind {type(layer).__name__}")
    return ops, offset


@lru_cache(maxsize=256)
def _plan(spec: NetworkSpec):
    segments: list = []
    ops, total = _compile(spec.layers, "", 0, segments)
    return ops, tuple(segments), total


def segments_of(spec: NetworkSpec) -> tuple:
    return _plan(spec)[1]


def param_count(spec: NetworkSpec) -> int:
    return _plan(spec)[2]


def _iter_ops(ops):
    for op in ops:
        yield op
        if isinstance(op, _ResidualOp):
            yield from _iter_ops(op.ops)


def calibrate_stats(spec: NetworkSpec, params, inputs, stats: dict | None = None) -> dict:
    """Set BatchNorm running statistics to the batch statistics of ``inputs``.

    One train-mode pass with momentum 1; parameters are untouched.
    """
    stats = init_stats(spec) if stats is None else stats
    ops = _plan(spec)[0]
    _run_forward(ops, _inputs_of(spec, inputs), _values_of(spec, params), _Ctx("train", stats, None, momentum=1.0))
    return stats


def init_stats(spec: NetworkSpec) -> dict:
    """Fresh BatchNorm running statistics (mean 0, variance 1) keyed by layer path."""
    return {
        op.path: {"mean": np.zeros(op.layer.features), "var": np.ones(op.layer.features)}
        for op in _iter_ops(_plan(spec)[0])
        if isinstance(op, _BatchNormOp)
    }


def has_batchnorm(spec: NetworkSpec) -> bool:
    return any(isinstance(op, _BatchNormOp) for op in _iter_ops(_plan(spec)[0]))


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def _inputs_of(spec, data):
    x = data.inputs if isinstance(data, Batch) else np.asarray(data, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise DimensionError("input", f"expected inputs of shape (N, {spec.input_shape}), got {x.shape}")
    return x


def _values_of(spec, params):
    v = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    if v.shape != (param_count(spec),):
        raise DimensionError("params", f"expected {param_count(spec)} parameters, got {v.shape}")
    return v


def forward(spec: NetworkSpec, params, data, mode: str = "eval", stats: dict | None = None, return_preacts=False):
    """Logits ``(N, n)`` of the network on ``data`` (a Batch or raw input array).

    In train mode BatchNorm normalizes with batch statistics and, when ``stats``
    is given, updates the running statistics in place. With
    ``return_preacts=True`` also returns the list of ReLU inputs in order.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ops = _plan(spec)[0]
    ctx = _Ctx(mode, stats, [] if return_preacts else None)
    out, _ = _run_forward(ops, _inputs_of(spec, data), _values_of(spec, params), ctx)
    return (out, ctx.preacts) if return_preacts else out


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_value(logits, labels) -> float:
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    labels = np.asarray(labels)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _loss_grad_logits(logits, labels):
    logp = _log_softmax(logits)
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def loss_and_grad(spec: NetworkSpec, params, batch: Batch, mode: str = "train", stats: dict | None = None):
    """Mean cross-entropy and its exact gradient as a flat array."""
    ops, _, total = _plan(spec)
    v = _values_of(spec, params)
    ctx = _Ctx(mode, stats, None)
    logits, caches = _run_forward(ops, _inputs_of(spec, batch), v, ctx)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    loss, dlogits = _loss_grad_logits(logits, batch.labels)
    g = np.zeros(total)
    _run_backward(ops, caches, dlogits, v, g, ctx)
    return loss, g


def grad(spec: NetworkSpec, params: ParamVector, batch: Batch, mode: str = "train", stats: dict | None = None):
    _, g = loss_and_grad(spec, params, batch, mode, stats)
    return ParamVector(g, segments_of(spec))


def input_grad(spec: NetworkSpec, params, inputs, labels, mode: str = "eval", stats: dict | None = None):
    """Gradient of the mean loss with respect to the inputs, plus the loss."""
    ops, _, total = _plan(spec)
    v = _values_of(spec, params)
    ctx = _Ctx(mode, stats, None)
    logits, caches = _run_forward(ops, _inputs_of(spec, inputs), v, ctx)
    loss, dlogits = _loss_grad_logits(logits, np.asarray(labels))
    dx = _run_backward(ops, caches, dlogits, v, np.zeros(total), ctx)
    return dx, loss


def param_jacobians(spec: NetworkSpec, params, inputs, stats: dict | None = None) -> np.ndarray:
    """Per-input output/parameter Jacobians, shape ``(N, n, P)``, in eval mode.

    One reverse sweep per output row: every input is replicated ``n`` times
    and seeded with a one-hot cotangent, keeping per-sample parameter
    gradients separate.
    """
    ops, _, total = _plan(spec)
    v = _values_of(spec, params)
    x = _inputs_of(spec, inputs)
    n_in, n_out = x.shape[0], spec.output_dim
    rep = np.repeat(x, n_out, axis=0)
    ctx = _Ctx("eval", stats, None, per_sample=True)
    _, caches = _run_forward(ops, rep, v, ctx)
    seed = np.tile(np.eye(n_out), (n_in, 1))
    J = np.zeros((n_in * n_out, total))
    _run_backward(ops, caches, seed, v, J, ctx)
    return J.reshape(n_in, n_out, total)


def per_output_param_jacobian(spec: NetworkSpec, params, x, stats: dict | None = None) -> np.ndarray:
    """``n x P`` Jacobian of the logits at a single input ``x`` (eval mode)."""
    x = np.asarray(x, dtype=np.float64)
    return param_jacobians(spec, params, x[None], stats)[0]


def init(spec: NetworkSpec, scheme: str = "he_uniform", seed: int = 0) -> ParamVector:
    """Initialize parameters.

    ``he_uniform``: weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases 0.
    ``default``: weights and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    ``zero``: everything 0. BatchNorm scale starts at 1 except under ``zero``.
    """
    if scheme not in ("he_uniform", "default", "zero"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    segments = segments_of(spec)
    values = np.zeros(param_count(spec))
    if scheme == "zero":
        return ParamVector(values, segments)
    rng = np.random.default_rng(seed)
    fan_in = {}
    for s in segments:
        if s.role == "weight":
            fan_in[s.layer] = int(np.prod(s.shape[1:]))
    for s in segments:
        sl = slice(s.start, s.stop)
        if s.role == "weight":
            bound = np.sqrt(6.0 / fan_in[s.layer]) if scheme == "he_uniform" else 1.0 / np.sqrt(fan_in[s.layer])
            values[sl] = rng.uniform(-bound, bound, s.size)
        elif s.role == "bias" and scheme == "default":
            bound = 1.0 / np.sqrt(fan_in[s.layer])
            values[sl] = rng.uniform(-bound, bound, s.size)
        elif s.role == "bn-scale":
            values[sl] = 1.0
    return ParamVector(values, segments)
