"""Time the numba kernels against their numpy twins.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20]

Both variants are imported directly, so the ``PRLAB_NUMBA`` flag does not
matter here. Each kernel is called once before timing so JIT compilation is
excluded.
"""
import argparse
import timeit

import numpy as np

from prlab import _kernels as K


def random_boxes(rng, n, size=128.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(4, size * 0.3, (n, 2))
    return np.hstack([xy, xy + wh])


def cases(rng):
    a, b = random_boxes(rng, 600), random_boxes(rng, 20)
    boxes, scores = random_boxes(rng, 600), rng.random(600)
    ious = rng.random((100, 8)) * (rng.random((100, 8)) < 0.3)
    ignore = rng.random(8) < 0.2
    n, dim = 2304, 16
    mix = (rng.random(n), rng.choice([0.6, 1.0], n), rng.random(n), rng.integers(0, 20, n),
           rng.normal(size=(20, dim)), rng.normal(size=dim), rng.normal(size=(n, dim)))
    return {
        "pairwise_iou 600x20": (lambda: K.pairwise_iou_np(a, b), lambda: K._pairwise_iou_jit_wrapper(a, b)),
        "nms 600 boxes": (lambda: K.nms_np(boxes, scores, 0.7), lambda: K.nms_jit(boxes, scores, 0.7)),
        "greedy_match 100x8": (lambda: K.greedy_match_np(ious, ignore, 0.5),
                               lambda: K.greedy_match_jit(ious, ignore, 0.5)),
        "mix_features 2304x16": (lambda: K.mix_features_np(*mix), lambda: K.mix_features_jit(*mix)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (np_fn, jit_fn) in cases(rng).items():
        a, b = np_fn(), jit_fn()
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.array_equal(x, y), f"{name}: variants disagree"
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        t_jit = min(timeit.repeat(jit_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22} {t_np:>10.3f} {t_jit:>10.3f} {t_np / t_jit:>7.1f}x")


if __name__ == "__main__":
    main()
