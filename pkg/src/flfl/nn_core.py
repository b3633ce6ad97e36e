"""Dense network with exact reverse-mode gradients over a flat parameter vector.

Parameters for every layer live in one float64 array. Hidden layers are
``linear -> [batch norm] -> activation`` and the output layer is linear
followed by softmax. Batch norm never keeps running statistics: in ``train``
mode it normalises with the current batch, in ``eval`` mode with externally
supplied :class:`BnStats`.
"""
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from flfl import _kernels as K


CHECKPOINT_MAGIC = "flfl-params v1"
BNSTATS_MAGIC = "flfl-bnstats v1"

_ACTIVATIONS = {"relu": K.ACT_RELU, "tanh": K.ACT_TANH}


class ShapeError(ValueError):
    """Raised on mismatched dimensions between specs, params and data."""


class NonFiniteError(FloatingPointError):
    """Raised when a parameter vector or input contains NaN or Inf."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    num_classes: int = 2
    use_batch_norm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer dimensions must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_params(self) -> int:
        return _layout(self)[-1]

    @property
    def bn_sizes(self) -> tuple:
        return self.hidden_dims if self.use_batch_norm else ()


@dataclass
class _Layer:
    fan_in: int
    fan_out: int
    W: slice
    b: slice
    gamma: Optional[slice] = None
    beta: Optional[slice] = None


@lru_cache(maxsize=None)
def _layout(spec: ModelSpec):
    layers = []
    off = 0
    dims = (spec.input_dim,) + spec.hidden_dims + (spec.num_classes,)
    n_hidden = len(spec.hidden_dims)
    for i in range(len(dims) - 1):
        fi, fo = dims[i], dims[i + 1]
        W = slice(off, off + fi * fo)
        off += fi * fo
        b = slice(off, off + fo)
        off += fo
        layer = _Layer(fi, fo, W, b)
        if spec.use_batch_norm and i < n_hidden:
            layer.gamma = slice(off, off + fo)
            off += fo
            layer.beta = slice(off, off + fo)
            off += fo
        layers.append(layer)
    return tuple(layers), off


def layers_of(spec: ModelSpec):
    return _layout(spec)[0]


@dataclass
class BnStats:
    """Per-BN-layer mean and (population) variance, set from outside training."""

    mean: list = field(default_factory=list)
    var: list = field(default_factory=list)
    sample_count: int = 0

    def __post_init__(self):
        for v in self.var:
            if np.any(np.asarray(v) < 0):
                raise ValueError("BN variance must be non-negative")

    def copy(self):
        return BnStats([m.copy() for m in self.mean], [v.copy() for v in self.var], self.sample_count)

    @classmethod
    def identity(cls, spec: ModelSpec):
        """Zero mean, unit variance for every BN layer."""
        return cls([np.zeros(h) for h in spec.bn_sizes], [np.ones(h) for h in spec.bn_sizes], 0)


@dataclass
class ForwardCache:
    mode: str
    inputs: list
    z: list
    xhat: list
    inv_std: list
    h: list
    a: list
    logits: np.ndarray
    probs: np.ndarray


def init_params(spec: ModelSpec, rng: np.random.Generator, std: float = 0.1) -> np.ndarray:
    """Gaussian weights, zero biases, BN scale one and shift zero."""
    params = np.zeros(spec.num_params)
    for layer in layers_of(spec):
        params[layer.W] = rng.normal(0.0, std, size=layer.fan_in * layer.fan_out)
        if layer.gamma is not None:
            params[layer.gamma] = 1.0
    return params


def check_finite(params: np.ndarray, what: str = "parameters"):
    if not np.all(np.isfinite(params)):
        raise NonFiniteError(f"non-finite values in {what}")


def _check_params(spec, params):
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ShapeError(f"expected {spec.num_params} parameters, got shape {params.shape}")


def forward(spec: ModelSpec, params: np.ndarray, bn: Optional[BnStats], batch: np.ndarray, mode: str = "eval"):
    """Return ``(probs, cache)`` for a batch of shape ``[B, input_dim]``."""
    _check_params(spec, params)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0 or batch.shape[1] != spec.input_dim:
        raise ShapeError(f"batch must be non-empty [B, {spec.input_dim}], got {batch.shape}")
    if not np.all(np.isfinite(batch)):
        raise NonFiniteError("non-finite values in input batch")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    batch_stats = mode == "train"
    if spec.use_batch_norm and not batch_stats:
        if bn is None or len(bn.mean) != len(spec.hidden_dims):
            raise ShapeError("eval-mode forward needs BnStats for every BN layer")

    act = _ACTIVATIONS[spec.activation]
    layers = layers_of(spec)
    cache = ForwardCache(mode, [], [], [], [], [], [], None, None)
    x = np.ascontiguousarray(batch)
    for i, layer in enumerate(layers[:-1]):
        W = params[layer.W].reshape(layer.fan_in, layer.fan_out)
        z = x @ W + params[layer.b]
        cache.inputs.append(x)
        cache.z.append(z)
        if layer.gamma is not None:
            if batch_stats:
                mean = var = np.zeros(layer.fan_out)
            else:
                mean, var = bn.mean[i], bn.var[i]
            xhat, inv_std, h, a, _, _ = K.bn_act_forward(
                z, params[layer.gamma], params[layer.beta], mean, var, batch_stats, act
            )
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
        else:
            h = z
            a = K.act_forward(z, act)
            cache.xhat.append(None)
            cache.inv_std.append(None)
        cache.h.append(h)
        cache.a.append(a)
        x = a
    out = layers[-1]
    logits = x @ params[out.W].reshape(out.fan_in, out.fan_out) + params[out.b]
    cache.inputs.append(x)
    cache.logits = logits
    cache.probs = K.softmax(logits)
    return cache.probs, cache


def backward_logits(spec: ModelSpec, params: np.ndarray, cache: ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient w.r.t. the logits into a full parameter gradient."""
    _check_params(spec, params)
    if dlogits.shape != cache.logits.shape:
        raise ShapeError("dlogits does not match cached forward pass")
    act = _ACTIVATIONS[spec.activation]
    batch_stats = cache.mode == "train"
    layers = layers_of(spec)
    grad = np.zeros_like(params)

    out = layers[-1]
    x = cache.inputs[-1]
    grad[out.W] = (x.T @ dlogits).ravel()
    grad[out.b] = dlogits.sum(axis=0)
    dx = dlogits @ params[out.W].reshape(out.fan_in, out.fan_out).T

    for i in range(len(layers) - 2, -1, -1):
        layer = layers[i]
        dh = K.act_backward(dx, cache.h[i], cache.a[i], act)
        if layer.gamma is not None:
            dz, dgamma, dbeta = K.bn_backward(dh, cache.xhat[i], cache.inv_std[i], params[layer.gamma], batch_stats)
            grad[layer.gamma] = dgamma
            grad[layer.beta] = dbeta
        else:
            dz = dh
        grad[layer.W] = (cache.inputs[i].T @ dz).ravel()
        grad[layer.b] = dz.sum(axis=0)
        if i > 0:
            dx = dz @ params[layer.W].reshape(layer.fan_in, layer.fan_out).T
    return grad


# --------------------------------------------------------------------------
# losses


def _hard_targets(targets, n, c):
    targets = np.asarray(targets)
    if targets.ndim == 2:
        targets = targets.argmax(axis=1)
    targets = targets.astype(np.int64)
    if targets.shape != (n,):
        raise ShapeError("targets must have one entry per row")
    if np.any(targets < 0) or np.any(targets >= c):
        raise IndexError("target index out of range")
    return targets


def cross_entropy_grad(probs, targets, mask=None):
    """Masked mean cross-entropy ``(1/B) sum_b mask_b * -ln p[b, y_b]`` and its logit gradient."""
    probs = np.asarray(probs, dtype=np.float64)
    n, c = probs.shape
    targets = _hard_targets(targets, n, c)
    weights = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    return K.masked_ce(probs, targets, weights)


def cross_entropy(probs, targets, mask=None) -> float:
    return cross_entropy_grad(probs, targets, mask)[0]


def _check_normalized(p, name):
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError(f"rows of {name} are not normalized")


def kl_divergence(p, q, weights=None) -> float:
    """Batch mean of ``sum_c p_c ln(p_c / q_c)`` with ``q`` floored at 1e-12."""
    return kl_grad(p, q, weights)[0]


def kl_grad(p, q, weights=None, wrt="q"):
    """KL(p || q) and its gradient w.r.t. the logits of ``q`` (or of ``p``)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("p and q must have the same shape")
    _check_normalized(p, "p")
    _check_normalized(q, "q")
    n = p.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    qc = np.maximum(q, K.PROB_FLOOR)
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    terms = np.where(pos, p * (logp - np.log(qc)), 0.0)
    loss = float((w * terms.sum(axis=1)).sum() / n)
    if wrt == "q":
        dq = np.where(q > K.PROB_FLOOR, -p / qc, 0.0)
        return loss, K.softmax_backward(q, dq * (w / n)[:, None])
    if wrt == "p":
        dp = np.where(pos, logp + 1.0 - np.log(qc), 0.0)
        return loss, K.softmax_backward(p, dp * (w / n)[:, None])
    raise ValueError("wrt must be 'p' or 'q'")


def l2_grad(p, q, weights=None, wrt="q"):
    """Batch mean squared Euclidean distance between probability rows."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = p.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    diff = q - p
    loss = float((w * (diff * diff).sum(axis=1)).sum() / n)
    scale = (2.0 * w / n)[:, None]
    if wrt == "q":
        return loss, K.softmax_backward(q, diff * scale)
    if wrt == "p":
        return loss, K.softmax_backward(p, -diff * scale)
    raise ValueError("wrt must be 'p' or 'q'")


def backward(spec: ModelSpec, params: np.ndarray, cache: ForwardCache, loss_kind: str, **loss_args):
    """Gradient of a named loss evaluated on ``cache.probs``.

    ``ce`` takes ``targets`` and optional ``mask``; ``kl`` and ``l2`` take a
    fixed ``target`` distribution and differentiate w.r.t. the cached probs,
    with the cached probs on the side given by ``side`` (``q`` by default).
    An optional ``scale`` multiplies the loss.
    """
    scale = loss_args.pop("scale", 1.0)
    if loss_kind == "ce":
        _, dlogits = cross_entropy_grad(cache.probs, **loss_args)
    elif loss_kind in ("kl", "l2"):
        target = loss_args.pop("target")
        side = loss_args.pop("side", "q")
        fn = kl_grad if loss_kind == "kl" else l2_grad
        if side == "q":
            _, dlogits = fn(target, cache.probs, wrt="q", **loss_args)
        else:
            _, dlogits = fn(cache.probs, target, wrt="p", **loss_args)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return backward_logits(spec, params, cache, dlogits * scale)


# --------------------------------------------------------------------------
# flat vector arithmetic


def _same_length(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape} vs {y.shape}")


def param_axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _same_length(x, y)
    return a * x + y


def param_scale(a: float, x: np.ndarray) -> np.ndarray:
    return a * x


def param_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.dot(x, x)))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: np.ndarray, bn: Optional[BnStats] = None):
    """Write params (and BN stats to ``<path>.bn`` when given)."""
    params = np.asarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {params.shape[0]}\n".encode("ascii"))
        fh.write(params.tobytes())
    if bn is not None:
        sizes = " ".join(str(len(m)) for m in bn.mean)
        with open(f"{path}.bn", "wb") as fh:
            fh.write(f"{BNSTATS_MAGIC} {len(bn.mean)} {bn.sample_count} {sizes}".rstrip().encode("ascii") + b"\n")
            for m, v in zip(bn.mean, bn.var):
                fh.write(np.asarray(m, dtype="<f8").tobytes())
                fh.write(np.asarray(v, dtype="<f8").tobytes())


def load_checkpoint(path, spec: Optional[ModelSpec] = None):
    """Return ``(params, bn)``; ``bn`` is None when no stats file exists."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if " ".join(header[:2]) != CHECKPOINT_MAGIC or len(header) != 3:
            raise ValueError(f"{path}: not an flfl params file")
        count = int(header[2])
        params = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if params.shape[0] != count:
        raise ValueError(f"{path}: header says {count} params, found {params.shape[0]}")
    if spec is not None:
        _check_params(spec, params)
    bn = None
    if os.path.exists(f"{path}.bn"):
        with open(f"{path}.bn", "rb") as fh:
            header = fh.readline().decode("ascii").split()
            if " ".join(header[:2]) != BNSTATS_MAGIC:
                raise ValueError(f"{path}.bn: not an flfl bnstats file")
            n_layers, count = int(header[2]), int(header[3])
            sizes = [int(s) for s in header[4 : 4 + n_layers]]
            raw = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
        means, variances, off = [], [], 0
        for s in sizes:
            means.append(raw[off : off + s].copy())
            variances.append(raw[off + s : off + 2 * s].copy())
            off += 2 * s
        bn = BnStats(means, variances, count)
    return params, bn
