"""Compiled against numpy timings for every dual-path kernel.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Each kernel is timed on inputs of the size the controller uses (horizon 10,
two states, 20 constraint rows) after one warm-up call, so numba compilation
is excluded. ``--end-to-end`` also times one default closed-loop run in two
subprocesses, with and without ``FLEXMPC_DISABLE_JIT``, since the switch is
read once per process.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from flexmpc._jit import njit
from flexmpc.filter import _joseph_impl
from flexmpc.gaussian import _max_eig_jit, _max_eig_numpy
from flexmpc.model import LinearModel, NOISE_FLOOR, _linear_loglik_grad_impl
from flexmpc.mpc import _condense_impl, _propagate_impl, _riccati_impl
from flexmpc.oracles import random_mpc_qp
from flexmpc.plant import A1, B_ENV
from flexmpc.qp import _admm_jit, _admm_numpy

N = 10


def _cases():
    rng = np.random.default_rng(0)
    P = np.array([[0.02, 0.004], [0.004, 0.01]])
    Sw = 1e-4 * np.eye(2)
    theta = LinearModel.from_matrices(A1, B_ENV[:, 0], np.eye(2), Sw, 4e-4 * np.eye(2)).theta
    covs = np.einsum("kij,klj->kil", *(2 * [rng.normal(size=(500, 2, 2))]))
    qp = random_mpc_qp(rng, horizon=N)

    def admm_args():
        x = np.zeros(qp.n)
        y = np.zeros(qp.G.shape[0])
        z = np.clip(qp.G @ x, qp.lower, qp.upper)
        return (qp.H, qp.f, qp.G, qp.lower, qp.upper, x, z, y, 1.0, 1e-6, 1.6, 1e-6, 1e-6, 1e-3, 4000, 50)

    Q = np.diag([8.0, 3.0])
    return [
        ("kalman update", njit(_joseph_impl), _joseph_impl,
         lambda: (np.zeros(2), P, np.eye(2), np.zeros(2), 4e-4 * np.eye(2), np.array([0.1, -0.1]))),
        ("likelihood gradient", njit(_linear_loglik_grad_impl), _linear_loglik_grad_impl,
         lambda: (theta, np.zeros(2), P, 0.3, np.array([0.1, -0.1]), NOISE_FLOOR)),
        ("covariance propagation", njit(_propagate_impl), _propagate_impl, lambda: (A1, Sw, P, N)),
        ("condensing", njit(_condense_impl), _condense_impl,
         lambda: (A1, B_ENV[:, 0].copy(), np.zeros(2), np.array([0.2, 0.1]), N)),
        ("riccati", njit(_riccati_impl), _riccati_impl,
         lambda: (A1, B_ENV, Q, np.array([[0.05]]), 1e-10, 100_000)),
        ("max eigenvalue x500", _max_eig_jit, _max_eig_numpy, lambda: (covs, 1e-10, 10_000)),
        ("admm qp", _admm_jit, _admm_numpy, admm_args),
    ]


def _time(fn, make_args, repeat):
    fn(*make_args())
    number = 1
    while True:
        t = min(timeit.repeat(lambda: fn(*make_args()), number=number, repeat=1))
        if t >= 0.05 or number >= 10_000:
            break
        number *= 4
    best = min(timeit.repeat(lambda: fn(*make_args()), number=number, repeat=repeat))
    return best / number


def _end_to_end():
    code = ("import time; from flexmpc.harness import RunConfig, run_closed_loop; "
            "run_closed_loop(RunConfig(steps=301, warmup_steps=10), 'cf', 0); "
            "t = time.perf_counter(); run_closed_loop(RunConfig(), 'cf', 0); print(time.perf_counter() - t)")
    out = {}
    for label, flag in (("compiled", "0"), ("numpy", "1")):
        env = dict(os.environ, FLEXMPC_DISABLE_JIT=flag)
        proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[label] = float(proc.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--end-to-end", action="store_true")
    args = p.parse_args(argv)

    print(f"{'kernel':<24}{'compiled [us]':>15}{'numpy [us]':>13}{'speed-up':>10}")
    for name, fast, slow, make in _cases():
        tj = _time(fast, make, args.repeat)
        tn = _time(slow, make, args.repeat)
        print(f"{name:<24}{tj * 1e6:>15.1f}{tn * 1e6:>13.1f}{tn / tj:>9.1f}x")
    if args.end_to_end:
        t = _end_to_end()
        print(f"\n600-step closed loop: compiled {t['compiled']:.2f} s, numpy {t['numpy']:.2f} s "
              f"({t['numpy'] / t['compiled']:.1f}x)")


if __name__ == "__main__":
    main()
