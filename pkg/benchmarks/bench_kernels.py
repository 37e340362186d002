"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from ditfuse import _kernels_py, kernels

try:
    from ditfuse import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    scores = rng.standard_normal((8 * 4 * 240, 240)).astype(np.float32)
    mask = np.tril(np.ones((240, 240), dtype=bool))
    mask = np.ascontiguousarray(np.broadcast_to(mask, (32, 240, 240)).reshape(-1, 240))
    y = kernels.masked_softmax_forward(scores, mask, impl=_kernels_py)
    g = rng.standard_normal(y.shape).astype(np.float32)
    img = rng.random((128, 128, 3))
    return {
        "softmax_fwd 7680x240 f32": lambda impl: kernels.masked_softmax_forward(scores, mask, impl=impl),
        "softmax_bwd 7680x240 f32": lambda impl: kernels.masked_softmax_backward(y, g, impl=impl),
        "blur sigma=2 128x128x3": lambda impl: kernels.gaussian_blur(img, 2.0, impl=impl),
        "span_mask L=400, 3 spans": lambda impl: kernels.span_mask(400, [40, 140, 300], [104, 204, 364], impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = {"python": _kernels_py}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    print(f"{'kernel':28s}" + "".join(f"{k:>12s}" for k in impls) + ("   speedup" if len(impls) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        ms = {k: 1e3 * min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for k, impl in impls.items()}
        line = f"{name:28s}" + "".join(f"{v:10.3f}ms" for v in ms.values())
        if len(ms) == 2:
            line += f"{ms['python'] / ms['cython']:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
