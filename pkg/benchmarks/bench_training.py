"""Timing notes for the training hot path.

Measures one forward+backward batch of the forecaster at the acceptance
scale, with and without the pooled allocator, plus the raw kernel floors
the implementation sits on. Results informed two decisions recorded in the
repo history: op outputs are pooled because fresh large allocations fault
in cold pages on some kernels, and the gate math stays in numpy because
its vectorized transcendentals beat both a scalar C loop and torch's
float64 CPU path on this class of machine.

Usage: python benchmarks/bench_training.py
"""

import time

import numpy as np

from latentdemand import tensor_core as tc
from latentdemand.losses_training import batch_objective
from latentdemand.tgcn_model import TgcnConfig, init_params, tgcn_forward, zero_grads


def bench(fn, n=10, warmup=2):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(n):
        fn()
    return (time.perf_counter() - t0) / n


def batch_step(params, cfg, adj, window, y, tau, flags):
    fc = tgcn_forward(adj, window, params, cfg)
    loss = batch_objective("censored_qr", fc, y, tau, flags, (0.05, 0.5, 0.95))
    zero_grads(params)
    tc.backward(loss)
    return loss


def main():
    nodes, window_len, batch = 6, 24, 256
    cfg = TgcnConfig(head="quantile", hidden_size=16, gcn_channels=(16, 8))
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    adj = np.eye(nodes)
    window = rng.normal(size=(batch, window_len, nodes, 5))
    y = rng.uniform(0, 1, size=(batch, nodes))
    tau = y + 0.5
    flags = np.zeros((batch, nodes), dtype=bool)

    plain = bench(lambda: batch_step(params, cfg, adj, window, y, tau, flags))

    def pooled():
        tc.pool_recycle()
        batch_step(params, cfg, adj, window, y, tau, flags)

    with tc.buffer_pool():
        warm = bench(pooled)

    print(f"batch {batch} x window {window_len} x {nodes} nodes (fwd+bwd)")
    print(f"  plain allocation : {plain * 1000:7.1f} ms")
    print(f"  pooled buffers   : {warm * 1000:7.1f} ms  ({plain / warm:.2f}x)")

    # raw kernel floors at the recurrent step's array shape
    rows, hidden = batch * nodes, cfg.hidden_size
    a = rng.normal(size=(rows, hidden))
    out = np.empty_like(a)
    t_tanh = bench(lambda: np.tanh(a, out=out), n=100)
    gate_in = rng.normal(size=(rows, hidden * 4))
    w = rng.normal(size=(8, hidden * 4))
    x = rng.normal(size=(rows, 8))
    gemm_out = np.empty((rows, hidden * 4))
    t_gemm = bench(lambda: np.matmul(x, w, out=gemm_out), n=100)
    print(f"  kernel floors    : tanh {t_tanh * 1e6:5.0f} us, "
          f"gate GEMM {t_gemm * 1e6:5.0f} us per step")


if __name__ == "__main__":
    main()
