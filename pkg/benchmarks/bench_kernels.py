"""Time every kernel on its numba and numpy paths.

    python benchmarks/bench_kernels.py [--repeat 30] [--dtype float32]

Shapes mirror one forward/backward of the acceptance-size LM
(batch 128, 32 positions, d_model 32, 4 heads) and the embedding fit.
"""

import argparse
import time

import numpy as np

from npi.autodiff import kernels as K


def _cases(dtype, rng):
    rows, d, ff = 128 * 32, 32, 128
    x = rng.standard_normal((rows, d)).astype(dtype)
    gain = np.ones(d, dtype)
    bias = np.zeros(d, dtype)
    _, xhat, rstd = K.layer_norm_fwd_np(x, gain, bias, 1e-5)
    h = rng.standard_normal((rows, ff)).astype(dtype)
    att = rng.standard_normal((128 * 4 * 32, 32)).astype(dtype)
    y = K.softmax_fwd_np(att)
    idx = rng.integers(0, 40, rows)
    ids = rng.integers(0, 300, 100_000)
    sent = np.arange(100_000) // 8
    return {
        "layer_norm_fwd": (x, gain, bias, dtype(1e-5)),
        "layer_norm_bwd": (x, xhat, rstd, gain),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, h),
        "softmax_fwd": (att,),
        "softmax_bwd": (att, y),
        "scatter_add_rows": (np.zeros((40, d), dtype), idx, x),
        "cooccurrence": (ids, sent, 300, 4),
    }


def _time(fn, args, repeat):
    fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])  # warm-up / compile
    best = np.inf
    for _ in range(repeat):
        fresh = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        t = time.perf_counter()
        fn(*fresh)
        best = min(best, time.perf_counter() - t)
    return best * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args(argv)
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    dtype = np.dtype(args.dtype).type
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  dispatch")
    for name, a in _cases(dtype, rng).items():
        t_np = _time(getattr(K, name + "_np"), a, args.repeat)
        t_nb = _time(getattr(K, "_" + name + "_nb"), a, args.repeat)
        route = "numba" if K.USE_NUMBA and name not in K.NUMPY_ONLY else "numpy"
        print(f"{name:<18}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x  {route}")


if __name__ == "__main__":
    main()
