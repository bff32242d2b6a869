"""Small convolutional classifier with hand-written forward and backward passes.

Batches come in as NCHW numpy arrays. Internally spatial activations are
stored channel-major as (C, N, H, W): im2col then copies contiguous rows and
the convolution matmul lands directly in that layout. ``Model.shapes`` holds
per-sample (C, H, W) shapes. Layers keep
their backward caches in the :class:`ForwardTrace`, never on themselves, so a
model can be shared read-only between threads.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Conv2d", "ReLU", "MaxPool", "Flatten", "Dense", "Model",
    "ForwardTrace", "GradientSet", "EpochLog", "TrainResult",
    "ShapeMismatch", "NonFiniteError", "TraceMismatch", "TrainingDiverged",
    "tiny_cnn", "forward", "backward", "softmax", "cross_entropy",
    "train", "predict", "evaluate",
]


class ShapeMismatch(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TraceMismatch(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


_CHUNK = 4096  # im2col columns per matmul call; keeps operands cache-resident


def _matmul_cols(A, B):
    """A @ B computed in column blocks of B."""
    out = np.empty((A.shape[0], B.shape[1]), dtype=np.result_type(A, B))
    for s in range(0, B.shape[1], _CHUNK):
        np.matmul(A, B[:, s:s + _CHUNK], out=out[:, s:s + _CHUNK])
    return out


def _matmul_nt(A, B):
    """A @ B.T accumulated over column blocks."""
    acc = np.zeros((A.shape[0], B.shape[0]), dtype=np.result_type(A, B))
    for s in range(0, A.shape[1], _CHUNK):
        acc += A[:, s:s + _CHUNK] @ B[:, s:s + _CHUNK].T
    return acc


class Conv2d:
    kind = "conv2d"

    def __init__(self, out_channels: int, kernel: int = 3, stride: int = 1, pad: int = 0):
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.pad = int(pad)
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"conv kernel {k} does not fit input {in_shape}")
        return (self.out_channels, ho, wo)

    def build(self, in_shape, rng, dtype):
        c = in_shape[0]
        k = self.kernel
        self.params = {
            "W": _glorot(rng, (self.out_channels, c, k, k), c * k * k,
                         self.out_channels * k * k, dtype),
            "b": np.zeros(self.out_channels, dtype=dtype),
        }

    def _wmat(self):
        # columns ordered (kh, kw, c) to match the im2col rows below
        return self.params["W"].transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def forward(self, x):
        k, s, p = self.kernel, self.stride, self.pad
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        c, n, hp, wp = x.shape
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        cols = np.empty((k * k, c, n, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[i * k + j] = x[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
        cols = cols.reshape(k * k * c, -1)
        y = _matmul_cols(self._wmat(), cols)
        y += self.params["b"][:, None]
        return y.reshape(self.out_channels, n, ho, wo), (cols, x.shape)

    def backward(self, dy, cache, need_input=True):
        cols, padded_shape = cache
        W = self.params["W"]
        o, n, ho, wo = dy.shape
        c, k, s, p = W.shape[1], self.kernel, self.stride, self.pad
        dy_mat = dy.reshape(o, -1)
        dW = _matmul_nt(dy_mat, cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        grads = {"W": dW, "b": dy_mat.sum(axis=1)}
        if not need_input:
            return None, grads
        dcols = _matmul_cols(np.ascontiguousarray(self._wmat().T), dy_mat).reshape(k * k, c, n, ho, wo)
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[i * k + j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, grads


class ReLU:
    kind = "relu"

    def __init__(self):
        self.params = {}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def build(self, in_shape, rng, dtype):
        self.params = {}

    def forward(self, x):
        on = x > 0
        return x * on, on

    def backward(self, dy, on, need_input=True):
        return dy * on, {}


class MaxPool:
    kind = "maxpool"

    def __init__(self, kernel: int = 2, stride: int | None = None):
        self.kernel = int(kernel)
        self.stride = int(stride if stride is not None else kernel)
        self.params = {}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"pool kernel {k} does not fit input {in_shape}")
        return (c, ho, wo)

    def build(self, in_shape, rng, dtype):
        self.params = {}

    def _slices(self, shape):
        k, s = self.kernel, self.stride
        ho, wo = (shape[2] - k) // s + 1, (shape[3] - k) // s + 1
        for i in range(k):
            for j in range(k):
                yield (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s),
                       slice(j, j + s * (wo - 1) + 1, s))

    def forward(self, x):
        y = None
        for sl in self._slices(x.shape):
            y = x[sl].copy() if y is None else np.maximum(y, x[sl])
        return y, (x, y)

    def backward(self, dy, cache, need_input=True):
        x, y = cache
        dx = np.zeros_like(x)
        taken = np.zeros(y.shape, dtype=bool)
        # route each window's gradient to its first maximal element only
        for sl in self._slices(x.shape):
            hit = (x[sl] == y) & ~taken
            dx[sl] += dy * hit
            taken |= hit
        return dx, {}


class Flatten:
    kind = "flatten"

    def __init__(self):
        self.params = {}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def build(self, in_shape, rng, dtype):
        self.params = {}

    def forward(self, x):
        # (C, N, H, W) -> (N, C*H*W), i.e. the usual NCHW flattening order
        return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1), x.shape

    def backward(self, dy, in_shape, need_input=True):
        c, n, h, w = in_shape
        return np.ascontiguousarray(dy.reshape(n, c, h, w).transpose(1, 0, 2, 3)), {}


class Dense:
    kind = "dense"

    def __init__(self, out_features: int):
        self.out_features = int(out_features)
        self.params = {}

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeMismatch(f"dense layer needs a flat input, got {in_shape}")
        return (self.out_features,)

    def build(self, in_shape, rng, dtype):
        n_in = in_shape[0]
        self.params = {
            "W": _glorot(rng, (self.out_features, n_in), n_in, self.out_features, dtype),
            "b": np.zeros(self.out_features, dtype=dtype),
        }

    def forward(self, x):
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, dy, x, need_input=True):
        grads = {"W": dy.T @ x, "b": dy.sum(axis=0)}
        return (dy @ self.params["W"] if need_input else None), grads


class Model:
    """An ordered stack of layers with parameters initialized from ``seed``."""

    def __init__(self, layers: Sequence, input_shape, seed: int = 0, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(self.rng_seed)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            out = layer.output_shape(shape)
            layer.build(shape, rng, self.dtype)
            shape = out
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeMismatch(f"model must end in a flat output, got {shape}")

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def n_params(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        m.dtype = np.dtype(dtype)
        for layer in m.layers:
            layer.params = {k: v.astype(m.dtype) for k, v in layer.params.items()}
        return m

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv2d"]

    def default_cam_layer(self) -> int:
        """Output of the last convolution, after its activation if one follows."""
        i = self.conv_indices()[-1]
        if i + 1 < len(self.layers) and self.layers[i + 1].kind == "relu":
            i += 1
        return i


def tiny_cnn(input_shape, n_classes: int, seed: int = 0, dtype=np.float32,
             widths=(8, 16)) -> Model:
    layers = []
    for w in widths:
        layers += [Conv2d(w, 3, 1, 1), ReLU(), MaxPool(2, 2)]
    layers += [Flatten(), Dense(n_classes)]
    return Model(layers, input_shape, seed=seed, dtype=dtype)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _targets(labels, n, k, dtype):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        onehot = np.zeros((n, k), dtype=dtype)
        onehot[np.arange(n), labels.astype(int)] = 1
        return onehot
    if labels.shape != (n, k):
        raise ShapeMismatch(f"label array shape {labels.shape} != {(n, k)}")
    return labels.astype(dtype)


def cross_entropy(logits, labels) -> float:
    """Mean softmax cross-entropy; ``labels`` are class indices or label vectors."""
    n, k = logits.shape
    y = _targets(labels, n, k, logits.dtype)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(y * logp).sum() / n)


@dataclass
class ForwardTrace:
    model: Model
    activations: list  # activations[0] is the input, activations[i + 1] the output of layer i
    caches: list

    @property
    def logits(self):
        return self.activations[-1]

    @property
    def probs(self):
        return softmax(self.activations[-1])


@dataclass
class GradientSet:
    params: list  # per layer dict name -> gradient
    activations: list  # activations[i] is d target / d (output of layer i)
    input: np.ndarray  # NCHW, like the batch
    loss: float | None = None


def forward(model: Model, batch) -> ForwardTrace:
    x = np.asarray(batch)
    if x.ndim == len(model.input_shape):
        x = x[None]
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeMismatch(f"batch shape {x.shape[1:]} != model input {model.input_shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite values in input batch")
    x = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=model.dtype)
    acts, caches = [x], []
    for layer in model.layers:
        x, cache = layer.forward(x)
        acts.append(x)
        caches.append(cache)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite logits")
    return ForwardTrace(model, acts, caches)


def backward(model: Model, trace: ForwardTrace, target, input_grad: bool = True) -> GradientSet:
    """Gradients w.r.t. every parameter and every intermediate activation.

    An integer ``target`` differentiates the summed logit of that class (the
    GradCAM case); an array of labels differentiates mean cross-entropy.
    ``activations[i]`` has the layout of the output of layer ``i``. Skipping
    the input gradient saves most of the first convolution's backward cost.
    """
    if trace.model is not model or len(trace.caches) != len(model.layers):
        raise TraceMismatch("trace was produced by a different model")
    logits = trace.logits
    n, k = logits.shape
    loss = None
    if np.isscalar(target) or np.ndim(target) == 0:
        t = int(target)
        if not 0 <= t < k:
            raise ValueError(f"class index {t} out of range for {k} classes")
        g = np.zeros_like(logits)
        g[:, t] = 1
    else:
        y = _targets(target, n, k, logits.dtype)
        g = (softmax(logits) - y) / n
        loss = cross_entropy(logits, target)
    act_grads = [None] * len(model.layers)
    param_grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        act_grads[i] = g
        g, param_grads[i] = model.layers[i].backward(g, trace.caches[i], need_input=input_grad or i > 0)
    return GradientSet(param_grads, act_grads, None if g is None else g.transpose(1, 0, 2, 3), loss)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float = float("nan")


@dataclass
class TrainResult:
    final: Model
    best: Model
    best_epoch: int
    log: list = field(default_factory=list)


def evaluate(model: Model, X, y, batch_size: int = 256) -> float:
    pred = predict_batch(model, X, batch_size)
    return float(np.mean(pred == np.asarray(y)))


def predict_batch(model: Model, X, batch_size: int = 64):
    out = []
    for s in range(0, len(X), batch_size):
        out.append(np.argmax(forward(model, X[s:s + batch_size]).logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, model, grads):
        if not self.lr:
            return
        for layer, g in zip(model.layers, grads):
            for name, d in g.items():
                layer.params[name] -= (self.lr * d).astype(layer.params[name].dtype)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, model, grads):
        if not self.lr:
            return
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for li, (layer, g) in enumerate(zip(model.layers, grads)):
            for name, d in g.items():
                key = (li, name)
                m = self.m.get(key, 0.0) * self.b1 + (1 - self.b1) * d
                v = self.v.get(key, 0.0) * self.b2 + (1 - self.b2) * d * d
                self.m[key], self.v[key] = m, v
                upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                layer.params[name] -= upd.astype(layer.params[name].dtype)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def train(model: Model, X, y, *, epochs: int, lr: float, seed: int, batch_size: int = 32,
          optimizer: str = "sgd", X_val=None, y_val=None,
          callback: Callable | None = None) -> TrainResult:
    """Minibatch training (plain SGD or Adam) with a per-seed shuffling order.

    The input ``model`` is left untouched. ``best`` is the checkpoint with the
    highest accuracy on ``(X_val, y_val)``, or the final one when no
    validation data is given. Epoch 0 in the log is never written; with
    ``epochs=0`` both checkpoints equal the initialization.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    X = np.asarray(X)
    y = np.asarray(y)
    model = model.copy()
    opt = OPTIMIZERS[optimizer](lr)
    rng = np.random.default_rng(seed)
    best, best_acc, best_epoch = model.copy(), -1.0, 0
    log = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        total, correct = 0.0, 0
        for s in range(0, len(X), batch_size):
            idx = order[s:s + batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    trace = forward(model, X[idx])
            except NonFiniteError as err:
                raise TrainingDiverged(f"{err} at epoch {epoch}, batch {s // batch_size}") from err
            grads = backward(model, trace, y[idx], input_grad=False)
            if not np.isfinite(grads.loss):
                raise TrainingDiverged(f"loss became {grads.loss} at epoch {epoch}, batch {s // batch_size}")
            total += grads.loss * len(idx)
            correct += int(np.sum(np.argmax(trace.logits, axis=1) == y[idx]))
            opt.step(model, grads.params)
        val_acc = evaluate(model, X_val, y_val) if X_val is not None else float("nan")
        entry = EpochLog(epoch, total / len(X), correct / len(X), val_acc)
        log.append(entry)
        if callback is not None:
            callback(entry)
        score = val_acc if X_val is not None else entry.train_acc
        if X_val is None or score > best_acc:
            best, best_acc, best_epoch = model.copy(), score, epoch
    if X_val is None:
        best, best_epoch = model.copy(), epochs
    return TrainResult(model, best, best_epoch, log)


def predict(model: Model, image):
    """Class index and probability vector; ties go to the lower index."""
    x = np.asarray(image)
    if tuple(x.shape) != model.input_shape:
        raise ShapeMismatch(f"image shape {x.shape} != model input {model.input_shape}")
    probs = forward(model, x[None]).probs[0]
    return int(np.argmax(probs)), probs


def gradient_check(model: Model, X, labels, eps: float = 1e-5, floor: float = 1e-6) -> dict:
    """Max relative error of analytic vs central-difference gradients.

    Runs at float64 on a copy of ``model``; checks every parameter and the
    input. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    m = model.astype(np.float64)
    X = np.asarray(X, dtype=np.float64)

    def loss():
        return cross_entropy(forward(m, X).logits, labels)

    g = backward(m, forward(m, X), labels)

    def rel(a, n):
        return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))

    out = {}
    for i, layer in enumerate(m.layers):
        for name, p in layer.params.items():
            num = np.empty_like(p)
            for j in np.ndindex(p.shape):
                old = p[j]
                p[j] = old + eps
                up = loss()
                p[j] = old - eps
                down = loss()
                p[j] = old
                num[j] = (up - down) / (2 * eps)
            out[f"{i}:{layer.kind}.{name}"] = rel(g.params[i][name], num)
    num = np.empty_like(X)
    for j in np.ndindex(X.shape):
        old = X[j]
        X[j] = old + eps
        up = loss()
        X[j] = old - eps
        down = loss()
        X[j] = old
        num[j] = (up - down) / (2 * eps)
    out["input"] = rel(g.input, num)
    return out
