"""Layers, the layer stack, and batch normalization with its adaptation modes.

Every layer caches what its single backward pass needs. There is no autodiff
tape: ``LayerStack.backward`` walks the layers in reverse exactly once.
"""

import copy

import numpy as np

from . import kernels as K
from .errors import DegenerateBatchError, DimensionError, StateError, ValidationError

INFERENCE = "inference"
ADAPT = "adapt"
TRAIN = "train"
MODES = (INFERENCE, ADAPT, TRAIN)

BN_AFFINE = "bn_affine"
FROZEN = "frozen"
BN_STAT = "bn_stat"  # running statistics: never trained, never adapted

BN_EPS = 1e-5


def _check_mode(mode):
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")


class Layer:
    """Base layer. Subclasses implement ``_forward`` and ``_backward``."""

    kind = "layer"

    def __init__(self):
        self.params = {}
        self.labels = {}
        self.cache = None
        self.backward_calls = 0

    def config(self):
        return {}

    def output_shape(self, shape):
        return shape

    def forward(self, x, mode):
        out, cache = self._forward(x, mode)
        self.cache = cache if mode != INFERENCE else None
        return out

    def backward(self, dout, param_grads):
        """Propagate ``dout``; return ``(dx, grads)``.

        ``param_grads`` is the set of labels whose gradients are materialized.
        """
        if self.cache is None:
            raise StateError(f"{self.kind}: forward not called")
        self.backward_calls += 1
        return self._backward(dout, param_grads)

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({cfg})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, cin, cout, k=3, stride=1, pad=None, weight=None):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        if weight is None:
            weight = np.zeros((cout, cin, k, k), dtype=K.ENGINE_DTYPE)
        self.params["weight"] = weight
        self.labels["weight"] = FROZEN

    def config(self):
        return {"cin": self.cin, "cout": self.cout, "k": self.k,
                "stride": self.stride, "pad": self.pad}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise DimensionError(f"expects {self.cin} input channels, got {c}")
        ho = K.conv_output_size(h, self.k, self.stride, self.pad)
        wo = K.conv_output_size(w, self.k, self.stride, self.pad)
        if ho is None or wo is None:
            raise DimensionError(f"spatial size {h}x{w} incompatible with kernel")
        return (self.cout, ho, wo)

    def _forward(self, x, mode):
        return K.conv2d_forward(x, self.params["weight"], self.stride, self.pad)

    def _backward(self, dout, param_grads):
        want = FROZEN in param_grads
        dx, dw = K.conv2d_backward(self.cache, dout, need_weight_grad=want)
        return dx, ({"weight": dw} if want else {})


class Linear(Layer):
    kind = "linear"

    def __init__(self, din, dout, bias=True, weight=None, b=None):
        super().__init__()
        self.din, self.dout, self.bias = din, dout, bias
        self.params["weight"] = (np.zeros((dout, din), dtype=K.ENGINE_DTYPE)
                                 if weight is None else weight)
        self.labels["weight"] = FROZEN
        if bias:
            self.params["bias"] = np.zeros(dout, dtype=K.ENGINE_DTYPE) if b is None else b
            self.labels["bias"] = FROZEN

    def config(self):
        return {"din": self.din, "dout": self.dout, "bias": self.bias}

    def output_shape(self, shape):
        if shape != (self.din,):
            raise DimensionError(f"expects ({self.din},) features, got {shape}")
        return (self.dout,)

    def _forward(self, x, mode):
        return K.linear_forward(x, self.params["weight"], self.params.get("bias"))

    def _backward(self, dout, param_grads):
        want = FROZEN in param_grads
        dx, dw, db = K.linear_backward(self.cache, dout, need_weight_grad=want)
        if not want:
            return dx, {}
        grads = {"weight": dw}
        if self.bias:
            grads["bias"] = db
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x, mode):
        return K.relu_forward(x)

    def _backward(self, dout, param_grads):
        return K.relu_backward(self.cache, dout), {}


class MaxPool2(Layer):
    kind = "maxpool2"

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise DimensionError(f"spatial size {h}x{w} is not even")
        return (c, h // 2, w // 2)

    def _forward(self, x, mode):
        return K.maxpool2_forward(x)

    def _backward(self, dout, param_grads):
        return K.maxpool2_backward(self.cache, dout), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def _forward(self, x, mode):
        return K.flatten(x), x.shape

    def _backward(self, dout, param_grads):
        return dout.reshape(self.cache), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def config(self):
        return {"shape": list(self.shape)}

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise DimensionError(f"cannot reshape {shape} to {self.shape}")
        return self.shape

    def _forward(self, x, mode):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def _backward(self, dout, param_grads):
        return dout.reshape(self.cache), {}


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def bn_forward(x, gamma, beta, running_mean, running_var, eps=BN_EPS, mode=ADAPT,
               momentum=0.1):
    """Normalize then scale/shift each channel of ``x`` [N,C,H,W].

    Inference mode uses the running statistics. Adapt and train modes use the
    biased per-channel mean/variance of the current batch; train mode also
    updates the running statistics in place (EMA with ``momentum``), adapt
    mode leaves them untouched.
    """
    _check_mode(mode)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm: expected rank 4 input, got shape {x.shape}")
    c = gamma.shape[0]
    if x.shape[1] != c:
        raise DimensionError(f"batchnorm: channel axis (axis 1) is {x.shape[1]}, layer has {c}")
    shape = (1, c, 1, 1)
    if mode == INFERENCE:
        inv = 1.0 / np.sqrt(running_var + eps)
        out = (x - running_mean.reshape(shape)) * (gamma * inv).reshape(shape) + beta.reshape(shape)
        return out.astype(x.dtype, copy=False), None
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise DegenerateBatchError(
            f"batchnorm: {m} value(s) per channel; batch statistics need at least 2")
    mu = x.mean(axis=(0, 2, 3))
    xc = x - mu.reshape(shape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    if mode == TRAIN:
        unbiased = var * (m / (m - 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    return out, (xhat, inv, gamma)


def bn_backward(cache, dout):
    """Return ``(dx, dgamma, dbeta)`` including the batch-statistics terms."""
    if cache is None:
        raise StateError("batchnorm backward needs an adapt- or train-mode forward")
    xhat, inv, gamma = cache
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    # d/dx of gamma * (x - mu) * inv with mu, var functions of x
    dx = (gamma * inv).reshape(shape) / m * (
        m * dout - dbeta.reshape(shape) - xhat * dgamma.reshape(shape))
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, eps=BN_EPS, momentum=0.1):
        super().__init__()
        if eps <= 0:
            raise ValidationError("batchnorm epsilon must be positive")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        dt = K.ENGINE_DTYPE
        self.params = {
            "gamma": np.ones(channels, dtype=dt),
            "beta": np.zeros(channels, dtype=dt),
            "running_mean": np.zeros(channels, dtype=dt),
            "running_var": np.ones(channels, dtype=dt),
        }
        self.labels = {"gamma": BN_AFFINE, "beta": BN_AFFINE,
                       "running_mean": BN_STAT, "running_var": BN_STAT}

    def config(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise DimensionError(f"expects {self.channels} channels, got {shape[0]}")
        return shape

    def _forward(self, x, mode):
        p = self.params
        return bn_forward(x, p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                          self.eps, mode, self.momentum)

    def _backward(self, dout, param_grads):
        dx, dgamma, dbeta = bn_backward(self.cache, dout)
        if BN_AFFINE in param_grads:
            return dx, {"gamma": dgamma, "beta": dbeta}
        return dx, {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, Linear, ReLU, MaxPool2, Flatten,
                                          Reshape, BatchNorm2d)}


# --------------------------------------------------------------------------
# the stack
# --------------------------------------------------------------------------

class LayerStack:
    """Ordered layers with a BN-affine / frozen parameter partition."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self._check_chain()

    def _check_chain(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.kind}): {e}") from None
        self.output_shape = shape

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{name}", arr, layer.labels[name]

    @property
    def partition(self):
        return {name: label for name, _, label in self.named_params()}

    def params_with_label(self, label):
        return {name: arr for name, arr, lab in self.named_params() if lab == label}

    def param(self, name):
        idx, pname = name.split(".", 1)
        return self.layers[int(idx)].params[pname]

    def count_params(self):
        """Return ``(bn_affine_count, trainable_total)``; running stats are excluded."""
        bn = sum(a.size for _, a, lab in self.named_params() if lab == BN_AFFINE)
        frozen = sum(a.size for _, a, lab in self.named_params() if lab == FROZEN)
        return bn, bn + frozen

    def forward(self, x, mode=INFERENCE):
        _check_mode(mode)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"input shape {tuple(x.shape[1:])} does not match configured {self.input_shape}")
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, mode)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.kind}): {e}") from None
        return x

    def backward(self, dout, scope="bn"):
        """Single reverse traversal. ``scope`` is ``"bn"`` or ``"all"``.

        Returns a dict of parameter gradients keyed like ``named_params``.
        """
        if scope == "bn":
            wanted = {BN_AFFINE}
        elif scope == "all":
            wanted = {BN_AFFINE, FROZEN}
        else:
            raise ValidationError(f"unknown backward scope {scope!r}")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.cache is None:
                raise StateError(f"layer {i} ({layer.kind}): forward not called")
            dout, g = layer.backward(dout, wanted)
            for name, arr in g.items():
                grads[f"{i}.{name}"] = arr
        return grads

    def backward_bn_only(self, dout):
        return self.backward(dout, scope="bn")

    def clear_cache(self):
        for layer in self.layers:
            layer.cache = None

    @property
    def backward_calls(self):
        return sum(layer.backward_calls for layer in self.layers)

    def snapshot(self):
        """Deep copy of every parameter array, keyed by name."""
        return {name: arr.copy() for name, arr, _ in self.named_params()}

    def restore(self, snap):
        for name, arr in snap.items():
            self.param(name)[...] = arr

    def copy(self):
        clone = copy.deepcopy(self)
        clone.clear_cache()
        return clone

    def astype(self, dtype):
        clone = self.copy()
        for layer in clone.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
        return clone


def build_reference_model(seed=0, grid_cells=25, row_anchors=14, lanes=2,
                          input_shape=(3, 64, 128), channels=(16, 32, 64, 64), hidden=512):
    """Four conv/BN/ReLU/pool blocks, then a two-layer head shaped as logits.

    Output per sample is (grid_cells + 1, row_anchors, lanes).
    """
    rng = np.random.default_rng(seed)
    dt = K.ENGINE_DTYPE
    layers = []
    cin, h, w = input_shape
    for cout in channels:
        fan_in = cin * 9
        wt = (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dt)
        layers += [Conv2d(cin, cout, 3, weight=wt), BatchNorm2d(cout), ReLU(), MaxPool2()]
        cin, h, w = cout, h // 2, w // 2
    feat = cin * h * w
    out = (grid_cells + 1) * row_anchors * lanes
    w1 = (rng.standard_normal((hidden, feat)) * np.sqrt(2.0 / feat)).astype(dt)
    w2 = (rng.standard_normal((out, hidden)) * np.sqrt(1.0 / hidden)).astype(dt)
    layers += [Flatten(), Linear(feat, hidden, weight=w1), ReLU(),
               Linear(hidden, out, weight=w2), Reshape((grid_cells + 1, row_anchors, lanes))]
    return LayerStack(layers, input_shape)
