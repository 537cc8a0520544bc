"""Time every kernel's numba and numpy variants on representative shapes.

    python benchmarks/bench_kernels.py [--repeat N]

Numba variants are compiled (and cached) before timing. Each row reports
the best of ``--repeat`` runs in milliseconds.
"""
import argparse
import timeit

import numpy as np

from monoprobe import kernels as K
from monoprobe._accel import HAVE_NUMBA


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((256, 32, 9, 9)).astype(np.float32)
    img = rng.standard_normal((256, 3, 32, 32)).astype(np.float32)
    cols = K.im2col_numpy(x, 5, 5, 2, 2, 2, 2)
    pool_in = rng.standard_normal((64, 96, 55, 55)).astype(np.float32)
    _, pidx = K.maxpool_forward_numpy(pool_in, 3, 2)
    dout = rng.standard_normal(pidx.shape).astype(np.float32)
    taps = rng.standard_normal((256, 384, 13, 13)).astype(np.float32)
    photo = rng.random((512, 512, 3))
    xs = rng.uniform(0, 511, (300, 300))
    ys = rng.uniform(0, 511, (300, 300))
    feats = rng.standard_normal((5000, 32))
    cents = rng.standard_normal((64, 32))
    patch = rng.random((300, 300, 3))
    return [
        ("im2col 256x3x32x32 k7 s3", "im2col", (img, 7, 7, 3, 3, 0, 0)),
        ("col2im 256x32x9x9 k5 s2 p2", "col2im", (cols, x.shape, 5, 5, 2, 2, 2, 2)),
        ("maxpool fwd 64x96x55x55", "maxpool_forward", (pool_in, 3, 2)),
        ("maxpool bwd 64x96x55x55", "maxpool_backward", (dout, pidx, pool_in.shape)),
        ("adaptive maxpool 13->5", "adaptive_maxpool", (taps, 5)),
        ("bilinear sample 300x300", "bilinear_sample", (photo, xs, ys, 0.0)),
        ("assign nearest 5000x32 k64", "assign_nearest", (feats, cents)),
        ("color jitter 300x300", "color_jitter", (patch, 1.2, 0.8, 1.1, 0.05)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, a in cases():
        f_np = getattr(K, f"{name}_numpy")
        f_nb = getattr(K, f"{name}_numba")
        f_nb(*a)  # compile
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:32s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
