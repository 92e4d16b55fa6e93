#!/usr/bin/env python3
"""Time the JIT kernels against the pure-numpy fallback.

The two recurrent scans dominate training time, so this is the number
that matters when deciding whether the numba path is worth its compile
cost on a new machine. Run:

    python benchmarks/bench_kernels.py
    HNET_KERNELS=numpy python benchmarks/bench_kernels.py --train-step

The first invocation includes JIT compilation; timings are taken after a
warmup call.
"""

import argparse
import time

import numpy as np


def _time(fn, *args, repeats=5):
    fn(*args)  # warmup / compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scans(sizes):
    from hnet.kernels import numba_impl, numpy_impl

    impls = [("numpy", numpy_impl), ("numba", numba_impl)]
    rng = np.random.default_rng(0)
    print(f"{'scan':<10} {'L':>5} {'H':>3} {'P':>4} {'N':>4} "
          f"{'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for L, H, P, N in sizes:
        u = rng.uniform(-1, 1, (L, H, P)).astype(np.float32)
        a = rng.uniform(0.1, 0.95, (L, H)).astype(np.float32)
        b = rng.uniform(-1, 1, (L, N)).astype(np.float32)
        c = rng.uniform(-1, 1, (L, N)).astype(np.float32)
        s0 = np.zeros((H, N, P), dtype=np.float32)
        g = rng.uniform(-1, 1, (L, H, P)).astype(np.float32)
        times = {}
        for name, impl in impls:
            fwd = _time(impl.ssm_scan_fwd, u, a, b, c, s0)
            _, states = impl.ssm_scan_fwd(u, a, b, c, s0)
            bwd = _time(impl.ssm_scan_bwd, g, u, a, b, c, s0, states)
            times[name] = (fwd, bwd)
        for leg, idx in (("ssm fwd", 0), ("ssm bwd", 1)):
            np_ms = times["numpy"][idx] * 1e3
            nb_ms = times["numba"][idx] * 1e3
            print(f"{leg:<10} {L:>5} {H:>3} {P:>4} {N:>4} "
                  f"{np_ms:>10.3f} {nb_ms:>10.3f} {np_ms / nb_ms:>7.1f}x")

        z = rng.uniform(-1, 1, (L, P)).astype(np.float32)
        pw = rng.uniform(0, 1, L).astype(np.float32)
        z0 = np.zeros(P, dtype=np.float32)
        gz = rng.uniform(-1, 1, (L, P)).astype(np.float32)
        times = {}
        for name, impl in impls:
            fwd = _time(impl.ema_scan_fwd, z, pw, z0)
            zbar = impl.ema_scan_fwd(z, pw, z0)
            bwd = _time(impl.ema_scan_bwd, gz, z, pw, z0, zbar)
            times[name] = (fwd, bwd)
        for leg, idx in (("ema fwd", 0), ("ema bwd", 1)):
            np_ms = times["numpy"][idx] * 1e3
            nb_ms = times["numba"][idx] * 1e3
            print(f"{leg:<10} {L:>5} {H:>3} {P:>4} {N:>4} "
                  f"{np_ms:>10.3f} {nb_ms:>10.3f} {np_ms / nb_ms:>7.1f}x")


def bench_train_step():
    """End-to-end training step under the backend chosen by HNET_KERNELS."""
    import hnet.kernels as K
    from hnet import trainer as tr
    from hnet.model import HNet, desk_1stage

    net = HNet(desk_1stage(), seed=0)
    data = np.random.default_rng(0).integers(32, 127, 100000).astype(np.uint8)
    tc = tr.TrainConfig(steps=6, batch_size=8, seq_len=512, seed=0,
                        eval_interval=10**9, log_interval=10**9)
    t0 = time.perf_counter()
    tr.train_loop(net, data, None, tc)
    dt = (time.perf_counter() - t0) / tc.steps
    print(f"backend={K.BACKEND}: {dt * 1e3:.0f} ms / training step "
          f"(batch {tc.batch_size} x {tc.seq_len} bytes, desk 1-stage)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-step", action="store_true",
                    help="also time a full desk-config training step")
    args = ap.parse_args()
    bench_scans([(128, 4, 32, 16), (512, 4, 32, 16), (2048, 4, 32, 16)])
    if args.train_step:
        bench_train_step()


if __name__ == "__main__":
    main()
