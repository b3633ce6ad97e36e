"""Client-model aggregation, the server momentum step and static BN statistics."""
from dataclasses import dataclass

import numpy as np

from flfl import counters
from flfl import nn_core as nn


def lsaa_weights(taus):
    """Aggregation weights proportional to ``1 - tau``.

    Falls back to uniform weights when every client is fully confident.
    """
    counters.bump("lsaa_weights")
    taus = np.asarray(taus, dtype=np.float64)
    if taus.ndim != 1 or taus.size == 0:
        raise ValueError("need at least one client threshold")
    if np.any(taus < 0) or np.any(taus > 1):
        raise ValueError("thresholds must lie in [0, 1]")
    slack = 1.0 - taus
    total = slack.sum()
    if total < 1e-12:
        return np.full(taus.size, 1.0 / taus.size)
    return slack / total


def uniform_weights(k):
    return np.full(k, 1.0 / k)


def aggregate(client_params, weights):
    """Weighted sum of client parameter vectors, accumulated in client order."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(client_params) != weights.size or weights.size == 0:
        raise ValueError("need one weight per client")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    n = client_params[0].shape
    out = np.zeros(n)
    for w, p in zip(weights, client_params):
        if p.shape != n:
            raise nn.ShapeError("client parameter vectors differ in length")
        out += w * p
    return out


@dataclass
class ServerOptState:
    velocity: np.ndarray
    momentum: float = 0.5

    @classmethod
    def zeros(cls, n, momentum=0.5):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("server momentum must lie in [0, 1)")
        return cls(np.zeros(n), momentum)


def server_momentum_step(state: ServerOptState, global_params, aggregated):
    """Treat ``aggregated - global`` as a descent step and apply heavy-ball momentum."""
    if global_params.shape != aggregated.shape or state.velocity.shape != global_params.shape:
        raise nn.ShapeError("length mismatch in server step")
    delta = aggregated - global_params
    velocity = state.momentum * state.velocity + delta
    return global_params + velocity, ServerOptState(velocity, state.momentum)


def _merge(count, mean, m2, x):
    # Chan et al. pairwise combination of (count, mean, sum of squared deviations)
    n_b = x.shape[0]
    mean_b = x.mean(axis=0)
    m2_b = ((x - mean_b) ** 2).sum(axis=0)
    n = count + n_b
    delta = mean_b - mean
    mean = mean + delta * (n_b / n)
    m2 = m2 + m2_b + delta * delta * (count * n_b / n)
    return n, mean, m2


def sbn_recompute(spec, params, chunks):
    """Exact per-BN-layer mean and population variance over a stream of feature chunks.

    Layer ``l`` statistics are accumulated with the already-final statistics of
    layers ``< l``, which equals a single train-mode pass over the whole stream.
    """
    chunks = [np.asarray(c, dtype=np.float64) for c in chunks if len(c)]
    total = sum(c.shape[0] for c in chunks)
    if total == 0:
        raise ValueError("sBN recompute got an empty data stream")
    if not spec.use_batch_norm:
        return nn.BnStats([], [], total)
    stats = nn.BnStats([], [], total)
    for l in range(len(spec.hidden_dims)):
        count, mean, m2 = 0, np.zeros(spec.hidden_dims[l]), np.zeros(spec.hidden_dims[l])
        partial = nn.BnStats(stats.mean + [np.zeros(spec.hidden_dims[l])], stats.var + [np.ones(spec.hidden_dims[l])], 0)
        partial.mean += [np.zeros(h) for h in spec.hidden_dims[l + 1 :]]
        partial.var += [np.ones(h) for h in spec.hidden_dims[l + 1 :]]
        for x in chunks:
            _, cache = nn.forward(spec, params, partial, x, mode="eval")
            count, mean, m2 = _merge(count, mean, m2, cache.z[l])
        stats.mean.append(mean)
        stats.var.append(np.maximum(m2 / count, 0.0))
    return stats
