"""Small dense/conv network core with hand-written backpropagation.

Tensors are plain ``numpy.ndarray`` objects laid out batch-first:
``(batch, features)`` for dense layers and ``(batch, channels, height, width)``
for convolution and pooling layers.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "relu", "sigmoid", "flatten")
PARAM_KINDS = ("dense", "conv2d")


class ShapeError(ValueError):
    """Input or gradient shape does not fit the layer chain."""


class DivergenceError(FloatingPointError):
    """Non-finite value in a loss or gradient."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pool: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        d = {"kind": self.kind}
        default = LayerSpec(self.kind)
        for key, value in asdict(self).items():
            if key != "kind" and value != getattr(default, key):
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(**d)


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride)


def maxpool2d(pool: int) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=pool)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def conv_chain(in_channels: int, n_outputs: int, *, channels: Sequence[int] = (16, 32, 64),
               kernel: int = 2, pool: int = 2, hidden: int = 64, view: int = 7,
               sigmoid_heads: bool = False) -> list[LayerSpec]:
    """Conv trunk used for GridRooms: three 2x2 convs, one pool after the first,
    one hidden fully-connected layer and a linear (or sigmoid) head."""
    layers: list[LayerSpec] = []
    c, size = in_channels, view
    for i, out_c in enumerate(channels):
        layers += [conv2d(c, out_c, kernel), relu()]
        size = size - kernel + 1
        if i == 0 and pool > 1:
            layers.append(maxpool2d(pool))
            size //= pool
        c = out_c
    if size < 1:
        raise ShapeError(f"view {view} too small for the conv trunk")
    layers += [flatten(), dense(c * size * size, hidden), relu(), dense(hidden, n_outputs)]
    if sigmoid_heads:
        layers.append(sigmoid())
    return layers


def mlp_chain(in_features: int, n_outputs: int, *, hidden: Sequence[int] = (64, 64),
              sigmoid_heads: bool = False) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    f = in_features
    for h in hidden:
        layers += [dense(f, h), relu()]
        f = h
    layers.append(dense(f, n_outputs))
    if sigmoid_heads:
        layers.append(sigmoid())
    return layers


def param_shapes(specs: Sequence[LayerSpec]) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for i, s in enumerate(specs):
        if s.kind == "dense":
            shapes += [(f"layer{i}.weight", (s.out_features, s.in_features)),
                       (f"layer{i}.bias", (s.out_features,))]
        elif s.kind == "conv2d":
            shapes += [(f"layer{i}.weight", (s.out_channels, s.in_channels, s.kernel, s.kernel)),
                       (f"layer{i}.bias", (s.out_channels,))]
    return shapes


def parameter_count(specs: Sequence[LayerSpec]) -> int:
    return sum(math.prod(shape) for _, shape in param_shapes(specs))


def _slots(specs: Sequence[LayerSpec]) -> list[int | None]:
    slots: list[int | None] = []
    n = 0
    for s in specs:
        if s.kind in PARAM_KINDS:
            slots.append(n)
            n += 2
        else:
            slots.append(None)
    return slots


@dataclass
class NetworkParams:
    tensors: list[np.ndarray]
    seed: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.tensors[0].dtype if self.tensors else np.dtype(np.float64)

    def copy(self) -> "NetworkParams":
        return NetworkParams([t.copy() for t in self.tensors], self.seed)

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams([t.astype(dtype) for t in self.tensors], self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors]) if self.tensors else np.zeros(0)

    def equals(self, other: "NetworkParams") -> bool:
        return len(self.tensors) == len(other.tensors) and all(
            np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors))


def init_params(specs: Sequence[LayerSpec], seed: int, dtype=np.float32) -> NetworkParams:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    tensors = []
    for _, shape in param_shapes(specs):
        if len(shape) == 1:
            bound = 1.0 / math.sqrt(tensors[-1][0].size)
        else:
            bound = 1.0 / math.sqrt(math.prod(shape[1:]))
        tensors.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
    return NetworkParams(tensors, seed)


@dataclass
class Trace:
    specs: tuple[LayerSpec, ...]
    params: NetworkParams
    caches: list[Any]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    out_nhwc: bool = False


@dataclass
class Grads:
    params: list[np.ndarray]
    input: np.ndarray


def _check_input(i: int, s: LayerSpec, x: np.ndarray, nhwc: bool) -> None:
    shape = (x.shape[0], x.shape[3], x.shape[1], x.shape[2]) if nhwc and x.ndim == 4 else x.shape
    if s.kind == "dense":
        if x.ndim != 2 or x.shape[1] != s.in_features:
            raise ShapeError(f"layer {i} (dense) expects (batch, {s.in_features}), got {shape}")
    elif s.kind == "conv2d":
        if x.ndim != 4 or shape[1] != s.in_channels or min(shape[2:]) < s.kernel:
            raise ShapeError(
                f"layer {i} (conv2d) expects (batch, {s.in_channels}, >={s.kernel}, >={s.kernel}), "
                f"got {shape}")
    elif s.kind == "maxpool2d":
        if x.ndim != 4 or min(shape[2:]) < s.pool:
            raise ShapeError(f"layer {i} (maxpool2d) expects 4-d input with spatial >= {s.pool}, "
                             f"got {shape}")
    elif s.kind == "flatten" and x.ndim < 2:
        raise ShapeError(f"layer {i} (flatten) expects batched input, got {shape}")


# 4-d activations are held channels-last between layers (cheap im2col by
# slice concatenation); the public layout at the chain's ends is NCHW.

def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def forward(params: NetworkParams, specs: Sequence[LayerSpec], x: np.ndarray,
            keep_trace: bool = True) -> tuple[np.ndarray, Trace | None]:
    specs = tuple(specs)
    slots = _slots(specs)
    if len(params.tensors) != 2 * sum(s is not None for s in slots):
        raise ShapeError("parameter list does not match the layer chain")
    x = np.asarray(x, dtype=params.dtype)
    in_shape = x.shape
    nhwc = False
    if x.ndim == 4:
        x, nhwc = _to_nhwc(x), True
    caches: list[Any] = []
    for i, s in enumerate(specs):
        _check_input(i, s, x, nhwc)
        cache: Any = None
        if s.kind == "dense":
            w, b = params.tensors[slots[i]], params.tensors[slots[i] + 1]
            cache = x
            x = x @ w.T + b
        elif s.kind == "conv2d":
            w, b = params.tensors[slots[i]], params.tensors[slots[i] + 1]
            k, st = s.kernel, s.stride
            bsz, h, wd, c = x.shape
            ho, wo = (h - k) // st + 1, (wd - k) // st + 1
            cols = np.concatenate(
                [x[:, a:a + st * (ho - 1) + 1:st, e:e + st * (wo - 1) + 1:st, :]
                 for a in range(k) for e in range(k)], axis=-1).reshape(bsz * ho * wo, k * k * c)
            wm = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
            cache = (cols, x.shape, ho, wo)
            x = (cols @ wm.T + b).reshape(bsz, ho, wo, -1)
        elif s.kind == "maxpool2d":
            p = s.pool
            bsz, h, wd, c = x.shape
            hp, wp = h // p, wd // p
            windows = [x[:, a:hp * p:p, e:wp * p:p, :] for a in range(p) for e in range(p)]
            out = windows[0]
            for v in windows[1:]:
                out = np.maximum(out, v)
            cache = (windows, out, x.shape)
            x = out
        elif s.kind == "relu":
            cache = x > 0
            x = x * cache
        elif s.kind == "sigmoid":
            x = 0.5 * (1.0 + np.tanh(0.5 * x))
            cache = x
        elif s.kind == "flatten":
            cache = (x.shape, nhwc)
            if nhwc:
                x, nhwc = _to_nchw(x), False
            x = x.reshape(x.shape[0], -1)
        caches.append(cache)
    if nhwc:
        x = _to_nchw(x)
    if not keep_trace:
        return x, None
    return x, Trace(specs, params, caches, in_shape, x.shape, nhwc)


def backward(trace: Trace, output_gradient: np.ndarray, *, from_layer: int | None = None,
             input_grad: bool = True) -> Grads:
    """Backpropagate ``output_gradient``.

    With ``from_layer=j`` the gradient is taken to be with respect to the
    *input* of layer ``j``; layers ``j`` and above are skipped.
    ``input_grad=False`` skips the (unused in training) input gradient.
    """
    specs, params = trace.specs, trace.params
    slots = _slots(specs)
    top = len(specs) if from_layer is None else from_layer
    g = np.asarray(output_gradient, dtype=params.dtype)
    expected, nhwc = _public_shape_above(trace, top)
    if g.shape != tuple(expected):
        raise ShapeError(f"output gradient shape {g.shape} does not match trace shape {expected}")
    if nhwc:
        g = _to_nhwc(g)
    grads: list[np.ndarray] = [np.zeros_like(t) for t in params.tensors]
    for i in range(top - 1, -1, -1):
        s, cache = specs[i], trace.caches[i]
        last = i == 0 and not input_grad
        if s.kind == "dense":
            w = params.tensors[slots[i]]
            grads[slots[i]] = g.T @ cache
            grads[slots[i] + 1] = g.sum(axis=0)
            if not last:
                g = g @ w
        elif s.kind == "conv2d":
            w = params.tensors[slots[i]]
            cols, xshape, ho, wo = cache
            bsz, h, wd, c = xshape
            k, st = s.kernel, s.stride
            co = w.shape[0]
            g2 = g.reshape(-1, co)
            grads[slots[i]] = (g2.T @ cols).reshape(co, k, k, c).transpose(0, 3, 1, 2).copy()
            grads[slots[i] + 1] = g2.sum(axis=0)
            if last:
                break
            wm = w.transpose(0, 2, 3, 1).reshape(co, -1)
            dcols = (g2 @ wm).reshape(bsz, ho, wo, k * k * c)
            dx = np.zeros(xshape, dtype=g.dtype)
            n = 0
            for a in range(k):
                for e in range(k):
                    dx[:, a:a + st * (ho - 1) + 1:st, e:e + st * (wo - 1) + 1:st, :] += \
                        dcols[..., n * c:(n + 1) * c]
                    n += 1
            g = dx
        elif s.kind == "maxpool2d":
            windows, out, xshape = cache
            p = s.pool
            hp, wp = xshape[1] // p, xshape[2] // p
            dx = np.zeros(xshape, dtype=g.dtype)
            taken = np.zeros(out.shape, dtype=bool)
            n = 0
            # route each window's gradient to its first maximal element
            for a in range(p):
                for e in range(p):
                    hit = (windows[n] == out) & ~taken
                    taken |= hit
                    dx[:, a:hp * p:p, e:wp * p:p, :] = g * hit
                    n += 1
            g = dx
        elif s.kind == "relu":
            g = g * cache
        elif s.kind == "sigmoid":
            g = g * cache * (1.0 - cache)
        elif s.kind == "flatten":
            shape, was_nhwc = cache
            if was_nhwc:
                bsz, h, wd, c = shape
                g = _to_nhwc(g.reshape(bsz, c, h, wd))
            else:
                g = g.reshape(shape)
    if input_grad and g.ndim == 4:
        g = _to_nchw(g)
    return Grads(grads, g if input_grad else np.zeros(0, dtype=params.dtype))


def _public_shape_above(trace: Trace, layer: int) -> tuple[tuple[int, ...], bool]:
    """Shape (public NCHW convention) of the tensor entering ``layer``, and
    whether it is held channels-last internally."""
    if layer >= len(trace.specs):
        return trace.output_shape, trace.out_nhwc
    if layer == 0:
        return trace.input_shape, len(trace.input_shape) == 4
    s, cache = trace.specs[layer], trace.caches[layer]
    if s.kind in ("dense", "relu", "sigmoid"):
        shape = cache.shape
    elif s.kind == "flatten":
        shape, nhwc = cache
        return ((shape[0], shape[3], shape[1], shape[2]) if nhwc else shape), nhwc
    elif s.kind == "maxpool2d":
        shape = cache[2]
    else:
        shape = cache[1]
    if len(shape) == 4:
        return (shape[0], shape[3], shape[1], shape[2]), True
    return tuple(shape), False


@dataclass
class OptState:
    square_avg: list[np.ndarray]
    step: int = 0
    alpha: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: NetworkParams, alpha: float = 0.99, eps: float = 1e-8) -> "OptState":
        return cls([np.zeros_like(t) for t in params.tensors], 0, alpha, eps)


def rmsprop_step(params: NetworkParams, grads: Sequence[np.ndarray], opt: OptState,
                 lr: float, weight_decay: float = 0.0) -> tuple[NetworkParams, OptState]:
    """One RMSprop update (no momentum); weight decay is added to the gradient.

    v <- alpha*v + (1-alpha)*g^2 ;  theta <- theta - lr * g / sqrt(v + eps)
    """
    if len(grads) != len(params.tensors):
        raise ShapeError("gradient list does not match parameters")
    new_params, new_avg = [], []
    for theta, g, v in zip(params.tensors, grads, opt.square_avg):
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient entry")
        if weight_decay:
            g = g + weight_decay * theta
        v = opt.alpha * v + (1.0 - opt.alpha) * (g * g)
        new_avg.append(v.astype(theta.dtype, copy=False))
        new_params.append((theta - lr * g / np.sqrt(v + opt.eps)).astype(theta.dtype, copy=False))
    return (NetworkParams(new_params, params.seed),
            OptState(new_avg, opt.step + 1, opt.alpha, opt.eps))


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 0:
        return lr_start
    if step >= total_steps:
        return lr_end
    if step <= 0:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (step / total_steps)


def _default_input_shape(specs: Sequence[LayerSpec], view: int = 7) -> tuple[int, ...]:
    first = specs[0]
    if first.kind == "dense":
        return (first.in_features,)
    if first.kind == "conv2d":
        return (first.in_channels, view, view)
    raise ShapeError("cannot infer input shape; pass input_shape")


def grad_check(specs: Sequence[LayerSpec], seed: int, n_coords: int = 100, *,
               input_shape: tuple[int, ...] | None = None, batch: int = 2,
               step: float = 1e-3, floor: float = 1e-8) -> float:
    """Max relative error between backward() and central differences.

    Runs in float64. The probe loss is a fixed random projection of the
    network output. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    rng = np.random.default_rng(seed)
    params = init_params(specs, seed, dtype=np.float64)
    shape = input_shape or _default_input_shape(specs)
    x = rng.normal(size=(batch, *shape))
    out, trace = forward(params, specs, x)
    proj = rng.normal(size=out.shape)
    grads = backward(trace, proj).params

    def loss(p: NetworkParams) -> float:
        return float(np.sum(forward(p, specs, x, keep_trace=False)[0] * proj))

    sizes = [t.size for t in params.tensors]
    total = sum(sizes)
    worst = 0.0
    for flat_idx in rng.choice(total, size=min(n_coords, total), replace=False):
        t = int(np.searchsorted(np.cumsum(sizes), flat_idx, side="right"))
        local = int(flat_idx - (sum(sizes[:t])))
        probe = params.copy()
        view = probe.tensors[t].reshape(-1)
        orig = view[local]
        view[local] = orig + step
        plus = loss(probe)
        view[local] = orig - step
        minus = loss(probe)
        numeric = (plus - minus) / (2 * step)
        analytic = float(grads[t].reshape(-1)[local])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def checkpoint_doc(specs: Sequence[LayerSpec], params: NetworkParams) -> dict[str, Any]:
    names = [n for n, _ in param_shapes(specs)]
    return {
        "spec": [s.to_dict() for s in specs],
        "seed": int(params.seed),
        "dtype": params.dtype.name,
        "tensors": [{"name": n, "shape": list(t.shape), "data": t.ravel().tolist()}
                    for n, t in zip(names, params.tensors)],
    }


def load_checkpoint_doc(doc: dict[str, Any]) -> tuple[list[LayerSpec], NetworkParams]:
    specs = [LayerSpec.from_dict(d) for d in doc["spec"]]
    dtype = np.dtype(doc.get("dtype", "float64"))
    expected = param_shapes(specs)
    tensors = []
    if len(doc["tensors"]) != len(expected):
        raise ShapeError("checkpoint tensor count does not match its layer chain")
    for entry, (name, shape) in zip(doc["tensors"], expected):
        if tuple(entry["shape"]) != shape:
            raise ShapeError(f"checkpoint tensor {entry['name']} has shape {entry['shape']}, "
                             f"expected {list(shape)}")
        tensors.append(np.asarray(entry["data"], dtype=dtype).reshape(shape))
    return specs, NetworkParams(tensors, int(doc["seed"]))


def save_checkpoint(path: str | Path, specs: Sequence[LayerSpec], params: NetworkParams) -> None:
    Path(path).write_text(json.dumps(checkpoint_doc(specs, params)))


def load_checkpoint(path: str | Path) -> tuple[list[LayerSpec], NetworkParams]:
    return load_checkpoint_doc(json.loads(Path(path).read_text()))


@dataclass
class Network:
    """Layer chain plus parameters; the mutable, single-owner handle used in training."""

    specs: list[LayerSpec]
    params: NetworkParams
    opt: OptState = field(init=False)

    def __post_init__(self) -> None:
        self.opt = OptState.zeros_like(self.params)

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], seed: int, dtype=np.float32) -> "Network":
        return cls(list(specs), init_params(specs, seed, dtype))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self.params, self.specs, x, keep_trace=False)[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Trace]:
        return forward(self.params, self.specs, x)

    def apply(self, grads: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0) -> None:
        """In-place RMSprop step; same arithmetic as ``rmsprop_step``."""
        opt = self.opt
        for theta, g, v in zip(self.params.tensors, grads, opt.square_avg):
            if g.shape != theta.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
            if not np.isfinite(g).all():
                raise DivergenceError("non-finite gradient entry")
            if weight_decay:
                g = g + weight_decay * theta
            v *= opt.alpha
            v += (1.0 - opt.alpha) * (g * g)
            theta -= lr * g / np.sqrt(v + opt.eps)
        opt.step += 1

    def load_params(self, params: NetworkParams) -> None:
        self.params = params.copy()
