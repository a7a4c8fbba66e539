"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each kernel on transformer-shaped inputs and reports per-call time
for both backends, plus an end-to-end training-step comparison. Invoke as

    python3 benchmarks/bench_kernels.py [--rows 4096] [--dim 256] [--repeat 50]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from flare import kernels


def _time(fn, repeat: int) -> float:
    fn()  # warmup (numba compiles on first call)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(rows: int, dim: int, repeat: int) -> list[tuple[str, dict[str, float]]]:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, dim)).astype(np.float32)
    dy = rng.standard_normal((rows, dim)).astype(np.float32)
    gamma = np.ones(dim, dtype=np.float32)
    beta = np.zeros(dim, dtype=np.float32)
    y_sm = None
    ln_out = None

    cases = []
    for name in ("layernorm_fwd", "layernorm_bwd", "softmax_fwd", "softmax_bwd", "gelu_fwd", "gelu_bwd"):
        timings: dict[str, float] = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            if name == "layernorm_fwd":
                fn = lambda: kernels.layernorm_fwd(x, gamma, beta)
            elif name == "layernorm_bwd":
                if ln_out is None or kernels.get_backend() == backend:
                    ln_out = kernels.layernorm_fwd(x, gamma, beta)
                _, mu, rstd = ln_out
                fn = lambda: kernels.layernorm_bwd(dy, x, gamma, mu, rstd)
            elif name == "softmax_fwd":
                fn = lambda: kernels.softmax_fwd(x)
            elif name == "softmax_bwd":
                y_sm = kernels.softmax_fwd(x)
                fn = lambda: kernels.softmax_bwd(dy, y_sm)
            elif name == "gelu_fwd":
                fn = lambda: kernels.gelu_fwd(x)
            else:
                fn = lambda: kernels.gelu_bwd(dy, x)
            timings[backend] = _time(fn, repeat)
        cases.append((name, timings))
    return cases


def bench_train_step(steps: int = 3) -> dict[str, float]:
    """End-to-end optimizer steps on a small policy, per backend."""
    import tempfile

    from flare import datagen, trainer

    with tempfile.TemporaryDirectory() as tmp:
        data = f"{tmp}/bench.npz"
        suite = datagen.make_task_suite(1, seed=0)
        datagen.generate_dataset(suite, 2, False, seed=0, out_path=data)
        ds = datagen.load_dataset(data)
        cfg = trainer.TrainConfig(
            steps=steps, batch_size=8, d_model=64, n_heads=4, n_fusion_blocks=2,
            n_qformer_blocks=1, n_queries=4, n_future_tokens=4, n_dit_blocks=4,
            l_tap=3, horizon=8,
        )
        mc = trainer.model_config(cfg, ds)
        idx = ds.chunk_index()
        out: dict[str, float] = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            state = trainer.init_train_state(cfg, mc, ds.world_config())
            batch = trainer.make_batch(ds, idx[: cfg.batch_size], cfg.horizon, with_actions=True)
            trainer.train_step(state, batch, None, cfg)  # warmup
            t0 = time.perf_counter()
            for _ in range(steps):
                trainer.train_step(state, batch, None, cfg)
            out[backend] = (time.perf_counter() - t0) / steps
    return out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}  (shape {args.rows}x{args.dim}, best of {args.repeat})")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, timings in bench_kernels(args.rows, args.dim, args.repeat):
        row = f"{name:<16}"
        for b in backends:
            row += f"{timings[b] * 1e6:>10.1f}us"
        if "numba" in timings and "numpy" in timings:
            row += f"{timings['numpy'] / timings['numba']:>9.2f}x"
        print(row)

    if not args.skip_train:
        out = bench_train_step()
        print(f"\n{'train_step':<16}" + "".join(f"{out[b] * 1e3:>10.1f}ms" for b in backends), end="")
        if "numba" in out and "numpy" in out:
            print(f"{out['numpy'] / out['numba']:>9.2f}x")
        else:
            print()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
