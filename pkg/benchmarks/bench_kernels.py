"""Compare the numba and pure-numpy kernel backends.

Each backend runs in its own interpreter because the choice is made at import
time from ``FLFL_NUMBA``.  Usage::

    python benchmarks/bench_kernels.py [--iters N] [--rounds T]
"""
import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, sys, time
import numpy as np
from flfl import _kernels as K
from flfl import nn_core as nn
from flfl import orchestrator as O

iters, rounds = int(sys.argv[1]), int(sys.argv[2])
spec = nn.ModelSpec(16, (64, 64), 4)
rng = np.random.default_rng(0)
params = nn.init_params(spec, rng)
x = rng.normal(size=(32, 16))
y = rng.integers(0, 4, 32)

# warm-up compiles the jitted kernels
for _ in range(3):
    _, c = nn.forward(spec, params, None, x, "train")
    nn.backward(spec, params, c, "ce", targets=y)

t0 = time.perf_counter()
for _ in range(iters):
    _, c = nn.forward(spec, params, None, x, "train")
    nn.backward(spec, params, c, "ce", targets=y)
step = (time.perf_counter() - t0) / iters

cfg = O.ExperimentConfig(num_classes=4, input_dim=16, num_labeled=8, num_unlabeled=4000, num_clients=20,
                         clients_per_round=5, rounds=rounds, local_epochs=2, spread=0.3, client_bn="global")
t0 = time.perf_counter()
res = O.run_experiment(cfg)
run = time.perf_counter() - t0
print(json.dumps(dict(backend=K.backend_name(), step_ms=step * 1e3, run_s=run,
                      final_acc=res.records[-1].test_accuracy)))
"""


def run_backend(flag, iters, rounds):
    env = dict(os.environ, FLFL_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKLOAD, str(iters), str(rounds)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=500, help="forward/backward steps on a 32-row batch")
    ap.add_argument("--rounds", type=int, default=20, help="rounds of the toy federated run")
    args = ap.parse_args()
    rows = [run_backend(flag, args.iters, args.rounds) for flag in ("0", "1")]
    print(f"{'backend':<8} {'fwd+bwd ms':>11} {'toy run s':>10} {'final acc':>10}")
    for r in rows:
        print(f"{r['backend']:<8} {r['step_ms']:>11.3f} {r['run_s']:>10.2f} {r['final_acc']:>10.4f}")
    if rows[1]["backend"] != "numba":
        print("numba is not installed; both rows used numpy")
    else:
        print(f"speedup: step {rows[0]['step_ms'] / rows[1]['step_ms']:.2f}x, run {rows[0]['run_s'] / rows[1]['run_s']:.2f}x")


if __name__ == "__main__":
    main()
