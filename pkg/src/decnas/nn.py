"""Minimal NumPy network engine: conv/dense/pool stacks with exact backprop.

Tensors are NHWC ``numpy`` arrays. Everything here is a pure function of its
inputs; ``Parameters`` instances are never mutated after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BYTES_PER_SCALAR = 4

TRAINABLE = ("conv2d", "dense")
KINDS = ("conv2d", "dense", "maxpool2d", "relu", "flatten", "softmax")


class StructuralError(ValueError):
    """Architecture, parameter, or batch shapes do not line up."""


class NumericError(ArithmeticError):
    """A non-finite activation appeared during a forward pass."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: str = "same"
    window: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r}")
        if self.kind in TRAINABLE and self.filters < 1:
            raise StructuralError(f"{self.kind} needs filter_count >= 1, got {self.filters}")
        if min(self.kernel) < 1 or self.window < 1 or self.stride < 1:
            raise StructuralError("kernel, window and stride extents must be >= 1")
        if self.padding not in ("same", "valid"):
            raise StructuralError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE

    def with_filters(self, filters: int) -> "LayerSpec":
        return replace(self, filters=filters)


def conv2d(filters: int, kernel: int | tuple[int, int] = 3, stride: int = 1, padding: str = "same") -> LayerSpec:
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    return LayerSpec("conv2d", filters=filters, kernel=tuple(kernel), stride=stride, padding=padding)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", filters=units)


def maxpool2d(window: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", window=window, stride=stride or window)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def _same_pads(size: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    class_count: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.class_count < 1:
            raise StructuralError("class_count must be positive")
        object.__setattr__(self, "shapes", tuple(self._propagate()))

    def _propagate(self) -> Iterator[tuple[int, ...]]:
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                if len(shape) != 3:
                    raise StructuralError(f"layer {i} (conv2d) needs (h, w, c) input, got {shape}")
                h, w, _ = shape
                kh, kw = layer.kernel
                if layer.padding == "same":
                    oh = _same_pads(h, kh, layer.stride)[0]
                    ow = _same_pads(w, kw, layer.stride)[0]
                else:
                    oh = (h - kh) // layer.stride + 1
                    ow = (w - kw) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise StructuralError(f"layer {i} (conv2d) output would be empty for input {shape}")
                shape = (oh, ow, layer.filters)
            elif layer.kind == "maxpool2d":
                if len(shape) != 3:
                    raise StructuralError(f"layer {i} (maxpool2d) needs (h, w, c) input, got {shape}")
                h, w, c = shape
                oh = (h - layer.window) // layer.stride + 1
                ow = (w - layer.window) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise StructuralError(f"layer {i} (maxpool2d) window larger than input {shape}")
                shape = (oh, ow, c)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise StructuralError(f"layer {i} (dense) needs flat input, got {shape}; add flatten()")
                shape = (layer.filters,)
            elif layer.kind == "flatten":
                shape = (math.prod(shape),)
            elif layer.kind == "softmax" and i != len(self.layers) - 1:
                raise StructuralError(f"layer {i}: softmax is only allowed as the final layer")
            yield shape
        if shape != (self.class_count,):
            raise StructuralError(f"final output shape {shape} does not match class_count {self.class_count}")

    def input_of(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    @property
    def trainable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.trainable]

    @property
    def prunable_indices(self) -> list[int]:
        """Trainable layers except the final classifier."""
        return self.trainable_indices[:-1]

    def successor(self, index: int) -> int | None:
        for j in range(index + 1, len(self.layers)):
            if self.layers[j].trainable:
                return j
        return None

    def with_layer(self, index: int, layer: LayerSpec) -> "Architecture":
        layers = list(self.layers)
        layers[index] = layer
        return Architecture(self.input_shape, tuple(layers), self.class_count)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [
                {"kind": l.kind, "filters": l.filters, "kernel": list(l.kernel), "stride": l.stride,
                 "padding": l.padding, "window": l.window}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        layers = tuple(
            LayerSpec(l["kind"], l["filters"], tuple(l["kernel"]), l["stride"], l["padding"], l["window"])
            for l in d["layers"]
        )
        return cls(tuple(d["input_shape"]), layers, d["class_count"])


def weight_shape(arch: Architecture, index: int) -> tuple[int, ...]:
    layer = arch.layers[index]
    fan = arch.input_of(index)
    if layer.kind == "conv2d":
        return (*layer.kernel, fan[-1], layer.filters)
    if layer.kind == "dense":
        return (fan[0], layer.filters)
    raise StructuralError(f"layer {index} ({layer.kind}) has no weights")


@dataclass(frozen=True)
class Parameters:
    """Per-layer weights and biases; ``None`` for layers without parameters.

    Conv weights are ``(kh, kw, c_in, c_out)``, dense weights ``(in, out)``.
    Also used for gradients and parameter deltas, which share the layout.
    """

    weights: tuple[np.ndarray | None, ...]
    biases: tuple[np.ndarray | None, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))
        for a in self.arrays():
            a.flags.writeable = False

    def arrays(self) -> Iterator[np.ndarray]:
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                yield w
                yield b

    @property
    def dtype(self):
        return next(self.arrays(), np.zeros(0, DTYPE)).dtype

    def flat(self) -> np.ndarray:
        parts = [a.ravel() for a in self.arrays()]
        return np.concatenate(parts) if parts else np.zeros(0, DTYPE)

    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def map(self, fn) -> "Parameters":
        return Parameters(
            tuple(None if w is None else fn(w) for w in self.weights),
            tuple(None if b is None else fn(b) for b in self.biases),
        )

    def zip_map(self, other: "Parameters", fn) -> "Parameters":
        check_congruent(self, other)
        return Parameters(
            tuple(None if w is None else fn(w, v) for w, v in zip(self.weights, other.weights)),
            tuple(None if b is None else fn(b, c) for b, c in zip(self.biases, other.biases)),
        )

    def astype(self, dtype) -> "Parameters":
        return self.map(lambda a: a.astype(dtype))

    def equal(self, other: "Parameters") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


GradientDelta = Parameters


def check_congruent(a: Parameters, b: Parameters) -> None:
    if len(a.weights) != len(b.weights):
        raise StructuralError(f"parameter sets cover {len(a.weights)} vs {len(b.weights)} layers")
    for i, (x, y) in enumerate(zip(a.weights, b.weights)):
        if (x is None) != (y is None) or (x is not None and x.shape != y.shape):
            raise StructuralError(f"layer {i}: weight shapes differ")
    for i, (x, y) in enumerate(zip(a.biases, b.biases)):
        if x is not None and x.shape != y.shape:
            raise StructuralError(f"layer {i}: bias shapes differ")


def check_params(arch: Architecture, params: Parameters) -> None:
    if len(params.weights) != len(arch.layers):
        raise StructuralError(f"parameters cover {len(params.weights)} layers, architecture has {len(arch.layers)}")
    for i, layer in enumerate(arch.layers):
        w, b = params.weights[i], params.biases[i]
        if not layer.trainable:
            if w is not None:
                raise StructuralError(f"layer {i} ({layer.kind}) should carry no weights")
            continue
        expected = weight_shape(arch, i)
        if w is None or w.shape != expected:
            raise StructuralError(f"layer {i} ({layer.kind}): weight shape {None if w is None else w.shape}, expected {expected}")
        if b is None or b.shape != (layer.filters,):
            raise StructuralError(f"layer {i} ({layer.kind}): bias shape mismatch")


def init_params(arch: Architecture, rng: np.random.Generator | int, dtype=DTYPE,
                zero_classifier: bool = True) -> Parameters:
    """He-uniform fan-in initialisation, zero biases.

    The final classifier starts at zero unless ``zero_classifier`` is off;
    random classifier weights stall FedAvg on label-skewed clients for tens
    of rounds.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    classifier = arch.trainable_indices[-1] if arch.trainable_indices else None
    weights, biases = [], []
    for i, layer in enumerate(arch.layers):
        if not layer.trainable:
            weights.append(None)
            biases.append(None)
            continue
        shape = weight_shape(arch, i)
        fan_in = math.prod(shape[:-1])
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=shape)
        if i == classifier and zero_classifier:
            w[:] = 0
        weights.append(w.astype(dtype))
        biases.append(np.zeros(layer.filters, dtype=dtype))
    return Parameters(tuple(weights), tuple(biases))


def zeros_like(params: Parameters) -> Parameters:
    return params.map(np.zeros_like)


# ---------------------------------------------------------------- layer kernels


def _pad_input(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    if layer.padding == "valid":
        return x
    kh, kw = layer.kernel
    _, pt, pb = _same_pads(x.shape[1], kh, layer.stride)
    _, pl, pr = _same_pads(x.shape[2], kw, layer.stride)
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    # (n, oh, ow, c, kh, kw) -> (n*oh*ow, kh*kw*c), matching weight (kh, kw, c, f)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def _conv_forward(x, w, b, layer):
    n = x.shape[0]
    kh, kw = layer.kernel
    xp = _pad_input(x, layer)
    s = layer.stride
    oh = (xp.shape[1] - kh) // s + 1
    ow = (xp.shape[2] - kw) // s + 1
    cols = _im2col(xp, kh, kw, s, oh, ow)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(n, oh, ow, -1), (cols, xp.shape)


def _conv_backward(dout, x, w, layer, cache, need_dx=True):
    cols, padded_shape = cache
    kh, kw = layer.kernel
    s = layer.stride
    n, oh, ow, f = dout.shape
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(-1, f).T).reshape(n, oh, ow, kh, kw, -1)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s] += dcols[:, :, :, i, j]
    if layer.padding == "same":
        _, pt, _ = _same_pads(x.shape[1], kh, s)
        _, pl, _ = _same_pads(x.shape[2], kw, s)
        dxp = dxp[:, pt : pt + x.shape[1], pl : pl + x.shape[2]]
    return dxp, dw, db


def _pool_forward(x, layer):
    k, s = layer.window, layer.stride
    n, h, w, c = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    if k == s:
        out = x[:, 0 : oh * k : k, 0 : ow * k : k]
        for p in range(1, k * k):
            i, j = divmod(p, k)
            out = np.maximum(out, x[:, i : oh * k : k, j : ow * k : k])
        return out, None
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    win = win.reshape(n, oh, ow, c, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, x, out, layer, arg):
    k, s = layer.window, layer.stride
    n, oh, ow, c = dout.shape
    dx = np.zeros_like(x)
    if arg is None:
        # tiled windows: split the gradient evenly over tied maxima
        masks = [x[:, i : oh * k : k, j : ow * k : k] == out for i, j in (divmod(p, k) for p in range(k * k))]
        share = dout / sum(m.astype(dout.dtype) for m in masks)
        for p, m in enumerate(masks):
            i, j = divmod(p, k)
            dx[:, i : oh * k : k, j : ow * k : k] = m * share
        return dx
    for p in range(k * k):
        i, j = divmod(p, k)
        dx[:, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s] += np.where(arg == p, dout, 0)
    return dx


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- public ops


def _check_batch(arch: Architecture, batch: np.ndarray) -> None:
    if batch.ndim != len(arch.input_shape) + 1 or tuple(batch.shape[1:]) != arch.input_shape:
        raise StructuralError(f"layer 0: batch shape {batch.shape} does not match input {arch.input_shape}")


def _forward_logits(arch: Architecture, params: Parameters, batch: np.ndarray, keep: bool):
    x = np.asarray(batch, dtype=params.dtype)
    caches = []
    for i, layer in enumerate(arch.layers):
        inp = x
        cache = None
        if layer.kind == "conv2d":
            x, cache = _conv_forward(x, params.weights[i], params.biases[i], layer)
        elif layer.kind == "dense":
            x = x @ params.weights[i] + params.biases[i]
        elif layer.kind == "relu":
            x = np.maximum(x, 0)
        elif layer.kind == "maxpool2d":
            x, arg = _pool_forward(x, layer)
            cache = (x, arg)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        # trailing softmax is folded into the loss / output
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation at layer {i} ({layer.kind})")
        if keep:
            caches.append((inp, cache))
    return x, caches


def logits(arch: Architecture, params: Parameters, batch: np.ndarray) -> np.ndarray:
    """Pre-softmax scores, shape ``(n, class_count)``."""
    check_params(arch, params)
    _check_batch(arch, batch)
    return _forward_logits(arch, params, batch, keep=False)[0]


def forward(arch: Architecture, params: Parameters, batch: np.ndarray) -> np.ndarray:
    """Class probabilities per sample; rows sum to one."""
    return _softmax(logits(arch, params, batch))


def loss_and_grad(arch: Architecture, params: Parameters, batch: np.ndarray, labels) -> tuple[float, Parameters]:
    """Mean cross-entropy over the batch and its exact gradient."""
    check_params(arch, params)
    _check_batch(arch, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch.shape[0],):
        raise StructuralError(f"labels shape {labels.shape} does not match batch of {batch.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= arch.class_count):
        raise ValueError(f"labels must lie in [0, {arch.class_count})")
    z, caches = _forward_logits(arch, params, batch, keep=True)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), labels] - logsum
    loss = float(-logp.mean())

    g = np.exp(shifted - logsum[:, None])
    g[np.arange(n), labels] -= 1
    g /= n

    dws: list = [None] * len(arch.layers)
    dbs: list = [None] * len(arch.layers)
    for i in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[i]
        inp, cache = caches[i]
        if layer.kind == "conv2d":
            g, dws[i], dbs[i] = _conv_backward(g, inp, params.weights[i], layer, cache, need_dx=i > 0)
        elif layer.kind == "dense":
            dws[i] = inp.T @ g
            dbs[i] = g.sum(axis=0)
            if i > 0:
                g = g @ params.weights[i].T
        elif layer.kind == "relu":
            g = g * (inp > 0)
        elif layer.kind == "maxpool2d":
            g = _pool_backward(g, inp, cache[0], layer, cache[1])
        elif layer.kind == "flatten":
            g = g.reshape(inp.shape)
    return max(loss, 0.0), Parameters(tuple(dws), tuple(dbs))


def sgd_step(params: Parameters, grad: Parameters, lr: float) -> Parameters:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return params.zip_map(grad, lambda p, g: (p - lr * g).astype(p.dtype))


def apply_delta(params: Parameters, delta: Parameters) -> Parameters:
    return params.zip_map(delta, lambda p, d: (p + d).astype(p.dtype))


def macs(arch: Architecture) -> int:
    """Multiply-accumulates of one forward pass on a single sample."""
    total = 0
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv2d":
            oh, ow, cout = arch.shapes[i]
            kh, kw = layer.kernel
            total += oh * ow * kh * kw * arch.input_of(i)[-1] * cout
        elif layer.kind == "dense":
            total += arch.input_of(i)[0] * layer.filters
    return total


def param_count(arch: Architecture) -> int:
    return sum(math.prod(weight_shape(arch, i)) + arch.layers[i].filters for i in arch.trainable_indices)


def param_bytes(arch: Architecture) -> int:
    return BYTES_PER_SCALAR * param_count(arch)


def predict(arch: Architecture, params: Parameters, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [logits(arch, params, samples[i : i + batch_size]).argmax(axis=1) for i in range(0, len(samples), batch_size)]
    return np.concatenate(out)


def evaluate(arch: Architecture, params: Parameters, samples: np.ndarray, labels: Sequence[int]) -> tuple[float, int]:
    """Argmax accuracy and sample count."""
    n = len(samples)
    if n == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    correct = int((predict(arch, params, np.asarray(samples)) == np.asarray(labels)).sum())
    return correct / n, n
