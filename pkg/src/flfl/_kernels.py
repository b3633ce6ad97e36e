"""Hot numeric kernels for the dense network.

Every kernel exists twice: a vectorised numpy version and a loop version
compiled with numba. The numba path is used when numba imports cleanly and
``FLFL_NUMBA`` is not set to ``0``. Both paths compute the same quantities;
they agree to rounding error, not bit-for-bit.
"""
import os

import numpy as np

BN_EPS = 1e-5
PROB_FLOOR = 1e-12

ACT_RELU = 0
ACT_TANH = 1


# --------------------------------------------------------------------------
# numpy reference path


def _np_bn_act_forward(z, gamma, beta, mean, var, batch_stats, act):
    if batch_stats:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv_std
    h = xhat * gamma + beta
    a = np.maximum(h, 0.0) if act == ACT_RELU else np.tanh(h)
    return xhat, inv_std, h, a, mean, var


def _np_act_forward(z, act):
    return np.maximum(z, 0.0) if act == ACT_RELU else np.tanh(z)


def _np_act_backward(da, h, a, act):
    if act == ACT_RELU:
        return da * (h > 0.0)
    return da * (1.0 - a * a)


def _np_bn_backward(dh, xhat, inv_std, gamma, batch_stats):
    dgamma = (dh * xhat).sum(axis=0)
    dbeta = dh.sum(axis=0)
    dxhat = dh * gamma
    if not batch_stats:
        return dxhat * inv_std, dgamma, dbeta
    n = dh.shape[0]
    dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dz, dgamma, dbeta


def _np_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_backward(probs, dprobs):
    # vector-Jacobian product of row-wise softmax
    return probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))


def _np_masked_ce(probs, targets, weights):
    n = probs.shape[0]
    rows = np.arange(n)
    p = np.maximum(probs[rows, targets], PROB_FLOOR)
    loss = float((weights * -np.log(p)).sum() / n)
    dlogits = probs * (weights / n)[:, None]
    dlogits[rows, targets] -= weights / n
    return loss, dlogits


NUMPY_KERNELS = {
    "bn_act_forward": _np_bn_act_forward,
    "act_forward": _np_act_forward,
    "act_backward": _np_act_backward,
    "bn_backward": _np_bn_backward,
    "softmax": _np_softmax,
    "softmax_backward": _np_softmax_backward,
    "masked_ce": _np_masked_ce,
}


# --------------------------------------------------------------------------
# numba path


def _build_numba_kernels():
    from numba import njit

    jit = njit(cache=True, nogil=True)

    @jit
    def bn_act_forward(z, gamma, beta, mean, var, batch_stats, act):
        n, d = z.shape
        if batch_stats:
            mean = np.zeros(d)
            var = np.zeros(d)
            for i in range(n):
                for j in range(d):
                    mean[j] += z[i, j]
            for j in range(d):
                mean[j] /= n
            for i in range(n):
                for j in range(d):
                    t = z[i, j] - mean[j]
                    var[j] += t * t
            for j in range(d):
                var[j] /= n
        inv_std = np.empty(d)
        for j in range(d):
            inv_std[j] = 1.0 / np.sqrt(var[j] + BN_EPS)
        xhat = np.empty((n, d))
        h = np.empty((n, d))
        a = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                xh = (z[i, j] - mean[j]) * inv_std[j]
                xhat[i, j] = xh
                hv = xh * gamma[j] + beta[j]
                h[i, j] = hv
                if act == ACT_RELU:
                    a[i, j] = hv if hv > 0.0 else 0.0
                else:
                    a[i, j] = np.tanh(hv)
        return xhat, inv_std, h, a, mean, var

    @jit
    def act_forward(z, act):
        n, d = z.shape
        out = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                v = z[i, j]
                if act == ACT_RELU:
                    out[i, j] = v if v > 0.0 else 0.0
                else:
                    out[i, j] = np.tanh(v)
        return out

    @jit
    def act_backward(da, h, a, act):
        n, d = da.shape
        out = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                if act == ACT_RELU:
                    out[i, j] = da[i, j] if h[i, j] > 0.0 else 0.0
                else:
                    out[i, j] = da[i, j] * (1.0 - a[i, j] * a[i, j])
        return out

    @jit
    def bn_backward(dh, xhat, inv_std, gamma, batch_stats):
        n, d = dh.shape
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        for i in range(n):
            for j in range(d):
                dgamma[j] += dh[i, j] * xhat[i, j]
                dbeta[j] += dh[i, j]
        dz = np.empty((n, d))
        if not batch_stats:
            for i in range(n):
                for j in range(d):
                    dz[i, j] = dh[i, j] * gamma[j] * inv_std[j]
            return dz, dgamma, dbeta
        # sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
        for i in range(n):
            for j in range(d):
                dx = dh[i, j] * gamma[j]
                dz[i, j] = (inv_std[j] / n) * (
                    n * dx - gamma[j] * dbeta[j] - xhat[i, j] * gamma[j] * dgamma[j]
                )
        return dz, dgamma, dbeta

    @jit
    def softmax(logits):
        n, c = logits.shape
        out = np.empty((n, c))
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, c):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(c):
                e = np.exp(logits[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(c):
                out[i, j] /= s
        return out

    @jit
    def softmax_backward(probs, dprobs):
        n, c = probs.shape
        out = np.empty((n, c))
        for i in range(n):
            dot = 0.0
            for j in range(c):
                dot += probs[i, j] * dprobs[i, j]
            for j in range(c):
                out[i, j] = probs[i, j] * (dprobs[i, j] - dot)
        return out

    @jit
    def masked_ce(probs, targets, weights):
        n, c = probs.shape
        dlogits = np.empty((n, c))
        loss = 0.0
        for i in range(n):
            w = weights[i] / n
            p = probs[i, targets[i]]
            if p < PROB_FLOOR:
                p = PROB_FLOOR
            loss -= weights[i] * np.log(p)
            for j in range(c):
                dlogits[i, j] = probs[i, j] * w
            dlogits[i, targets[i]] -= w
        return loss / n, dlogits

    return {
        "bn_act_forward": bn_act_forward,
        "act_forward": act_forward,
        "act_backward": act_backward,
        "bn_backward": bn_backward,
        "softmax": softmax,
        "softmax_backward": softmax_backward,
        "masked_ce": masked_ce,
    }


def _numba_requested():
    return os.environ.get("FLFL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


NUMBA_KERNELS = None
if _numba_requested():
    try:
        NUMBA_KERNELS = _build_numba_kernels()
    except ImportError:
        NUMBA_KERNELS = None

USING_NUMBA = NUMBA_KERNELS is not None
ACTIVE = NUMBA_KERNELS if USING_NUMBA else NUMPY_KERNELS

bn_act_forward = ACTIVE["bn_act_forward"]
act_forward = ACTIVE["act_forward"]
act_backward = ACTIVE["act_backward"]
bn_backward = ACTIVE["bn_backward"]
softmax = ACTIVE["softmax"]
softmax_backward = ACTIVE["softmax_backward"]
masked_ce = ACTIVE["masked_ce"]


def backend_name():
    return "numba" if USING_NUMBA else "numpy"
