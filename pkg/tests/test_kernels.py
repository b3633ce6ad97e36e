import os
import subprocess
import sys

import numpy as np
import pytest

from flfl import _kernels as K

numba_only = pytest.mark.skipif(K.NUMBA_KERNELS is None, reason="numba backend not active")


def _inputs(rng, n=7, d=5, c=4):
    z = rng.normal(size=(n, d))
    return dict(
        z=z,
        gamma=rng.normal(size=d),
        beta=rng.normal(size=d),
        mean=rng.normal(size=d),
        var=rng.uniform(0.1, 2, size=d),
        dh=rng.normal(size=(n, d)),
        logits=rng.normal(0, 3, size=(n, c)),
        dprobs=rng.normal(size=(n, c)),
        targets=rng.integers(0, c, n).astype(np.int64),
        weights=(rng.random(n) < 0.6).astype(np.float64),
    )


@numba_only
@pytest.mark.parametrize("act", [K.ACT_RELU, K.ACT_TANH])
@pytest.mark.parametrize("batch_stats", [True, False])
def test_bn_act_paths_agree(act, batch_stats):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = _inputs(rng)
        ref = K.NUMPY_KERNELS["bn_act_forward"](x["z"], x["gamma"], x["beta"], x["mean"], x["var"], batch_stats, act)
        got = K.NUMBA_KERNELS["bn_act_forward"](x["z"], x["gamma"], x["beta"], x["mean"], x["var"], batch_stats, act)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-12)
        xhat, inv_std = ref[0], ref[1]
        ref_b = K.NUMPY_KERNELS["bn_backward"](x["dh"], xhat, inv_std, x["gamma"], batch_stats)
        got_b = K.NUMBA_KERNELS["bn_backward"](x["dh"], xhat, inv_std, x["gamma"], batch_stats)
        for a, b in zip(ref_b, got_b):
            np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-12)
        h, a_ = ref[2], ref[3]
        np.testing.assert_allclose(
            K.NUMBA_KERNELS["act_backward"](x["dh"], h, a_, act),
            K.NUMPY_KERNELS["act_backward"](x["dh"], h, a_, act),
            rtol=0, atol=1e-14,
        )
        np.testing.assert_allclose(
            K.NUMBA_KERNELS["act_forward"](x["z"], act), K.NUMPY_KERNELS["act_forward"](x["z"], act), rtol=0, atol=1e-15
        )


@numba_only
def test_softmax_and_ce_paths_agree():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = _inputs(rng)
        p_ref = K.NUMPY_KERNELS["softmax"](x["logits"])
        np.testing.assert_allclose(K.NUMBA_KERNELS["softmax"](x["logits"]), p_ref, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(
            K.NUMBA_KERNELS["softmax_backward"](p_ref, x["dprobs"]),
            K.NUMPY_KERNELS["softmax_backward"](p_ref, x["dprobs"]),
            rtol=1e-12, atol=1e-14,
        )
        l_ref, d_ref = K.NUMPY_KERNELS["masked_ce"](p_ref, x["targets"], x["weights"])
        l_got, d_got = K.NUMBA_KERNELS["masked_ce"](p_ref, x["targets"], x["weights"])
        assert abs(l_ref - l_got) < 1e-13
        np.testing.assert_allclose(d_got, d_ref, rtol=0, atol=1e-15)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, FLFL_NUMBA="0")
    out = subprocess.run(
        [sys.executable, "-c", "from flfl import _kernels as K; print(K.backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_numpy_backend_trains_same_as_active_backend():
    # a short client update under each backend lands on the same parameters
    code = (
        "import numpy as np\n"
        "from flfl import nn_core as nn\n"
        "spec = nn.ModelSpec(6, (8, 8), 3)\n"
        "rng = np.random.default_rng(0)\n"
        "p = nn.init_params(spec, rng)\n"
        "x = rng.normal(size=(16, 6)); y = rng.integers(0, 3, 16)\n"
        "for _ in range(20):\n"
        "    pr, c = nn.forward(spec, p, None, x, 'train')\n"
        "    p = p - 0.1 * nn.backward(spec, p, c, 'ce', targets=y)\n"
        "print(','.join(repr(float(v)) for v in p))\n"
    )
    results = []
    for flag in ("0", "1"):
        env = dict(os.environ, FLFL_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        results.append(np.array([float(v) for v in out.stdout.strip().split(",")]))
    np.testing.assert_allclose(results[0], results[1], rtol=1e-9, atol=1e-12)
