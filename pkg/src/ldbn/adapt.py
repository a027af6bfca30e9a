"""Unsupervised BN-only adaptation: entropy loss, one backward, gamma/beta update.

Each adaptation step recomputes batch-norm statistics from the unlabeled
batch (adapt mode), minimizes the mean Shannon entropy of the lane-cell
predictions, and moves only the BN scale/shift parameters with SGD+momentum.
Running statistics and every other weight stay untouched.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import DimensionError, LDBNError, NumericError, ValidationError
from .nn import ADAPT, BN_AFFINE, BatchNorm2d


@dataclass(frozen=True)
class AdaptConfig:
    batch_size: int = 1
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epsilon_bn: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if not self.epsilon_bn > 0:
            raise ValidationError("epsilon_bn must be > 0")


@dataclass
class AdaptState:
    model: object
    velocity: dict = field(default_factory=dict)
    frames_buffered: list = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def create(cls, model, config=None):
        """Wrap ``model`` with zeroed momentum buffers for its BN-affine tensors."""
        if config is not None:
            for layer in model.layers:
                if isinstance(layer, BatchNorm2d):
                    layer.eps = config.epsilon_bn
        velocity = {name: np.zeros_like(arr)
                    for name, arr in model.params_with_label(BN_AFFINE).items()}
        return cls(model=model, velocity=velocity)


@dataclass
class StepMetrics:
    entropy: float
    forward_ns: int
    backward_ns: int
    update_ns: int
    logits: np.ndarray = field(repr=False)


@dataclass
class StreamStep:
    logits: np.ndarray = field(repr=False)
    entropy: float
    infer_ns: int
    adapt_ns: int
    adapted: bool
    error: str = None


def _grid_axis(logits):
    if logits.ndim < 3:
        raise DimensionError(f"logits need rank >= 3, got shape {logits.shape}")
    return logits.ndim - 3


def entropy_per_group(logits):
    """Shannon entropy (nats) of every (sample, anchor, lane) distribution."""
    axis = _grid_axis(logits)
    logp = K.log_group_softmax(logits, axis=axis)
    p = np.exp(logp)
    return -(p * logp).sum(axis=axis)


def entropy_loss(logits):
    """Mean entropy over all groups and its gradient w.r.t. ``logits``.

    Uses log-softmax so that 0 * log 0 evaluates to 0 without special cases.
    """
    axis = _grid_axis(logits)
    logp = K.log_group_softmax(logits, axis=axis)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=axis, keepdims=True)
    groups = h.size
    # dH/dz_j = -p_j (log p_j + H) for one group
    grad = -p * (logp + h) / groups
    loss = float(h.sum() / groups)
    if not np.isfinite(loss):
        raise NumericError("entropy loss is not finite")
    return loss, grad.astype(logits.dtype, copy=False)


def _apply_update(state, logits, config):
    """Backward + SGD on BN-affine params from an adapt-mode forward.

    Nothing is written to the model until every new value is known to be finite.
    """
    loss, dlogits = entropy_loss(logits)
    t0 = time.perf_counter_ns()
    grads = state.model.backward_bn_only(dlogits)
    t1 = time.perf_counter_ns()
    new_v, new_p = {}, {}
    lr, mom = config.learning_rate, config.momentum
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        v = state.velocity[name] * mom + g
        p = state.model.param(name)
        new_v[name] = v
        new_p[name] = p - lr * v
        if not np.all(np.isfinite(new_p[name])):
            raise NumericError(f"update made {name} non-finite")
    for name in grads:
        state.velocity[name] = new_v[name].astype(state.velocity[name].dtype, copy=False)
        state.model.param(name)[...] = new_p[name]
    state.step_count += 1
    return loss, t1 - t0, time.perf_counter_ns() - t1


def adapt_step(state, batch, config):
    """One adaptation step on an unlabeled batch ``[bs, 3, H, W]``.

    Returns ``StepMetrics`` with the pre-update entropy and phase timings.
    Raises ``NumericError``/``DegenerateBatchError`` with the model unmodified.
    """
    if batch.shape[0] != config.batch_size:
        raise DimensionError(
            f"batch axis 0 is {batch.shape[0]}, config.batch_size is {config.batch_size}")
    t0 = time.perf_counter_ns()
    logits = state.model.forward(batch, ADAPT)
    fwd = time.perf_counter_ns() - t0
    loss, bwd, upd = _apply_update(state, logits, config)
    return StepMetrics(entropy=loss, forward_ns=fwd, backward_ns=bwd, update_ns=upd,
                       logits=logits)


def stream_adapt(state, frame, config, clock=time.perf_counter_ns):
    """Predict ``frame`` with the current model, then adapt when a batch is complete.

    Only images reach this function; labels never do. With batch size 1 the
    prediction forward doubles as the adaptation forward. With larger batches
    each frame gets its own single-frame forward and the buffered batch gets
    a separate adaptation forward once full. A failed step drops the buffer
    and keeps the previous parameters.
    """
    x = frame[None]
    t0 = clock()
    logits = state.model.forward(x, ADAPT)
    t1 = clock()
    pred = logits[0]
    adapted, error = False, None
    if config.batch_size == 1:
        try:
            _apply_update(state, logits, config)
            adapted = True
        except LDBNError as e:
            error = f"{type(e).__name__}: {e}"
    else:
        state.frames_buffered.append(frame)
        if len(state.frames_buffered) == config.batch_size:
            batch = np.stack(state.frames_buffered)
            state.frames_buffered = []
            try:
                adapt_step(state, batch, config)
                adapted = True
            except LDBNError as e:
                error = f"{type(e).__name__}: {e}"
    t2 = clock()
    try:
        ent = float(entropy_per_group(pred).mean())
    except NumericError:
        ent = float("nan")
    return StreamStep(logits=pred, entropy=ent, infer_ns=t1 - t0, adapt_ns=t2 - t1,
                      adapted=adapted, error=error)
