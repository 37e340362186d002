"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``DITFUSE_PURE_PYTHON=1``
to force the numpy fallback. Wrappers here normalise dtypes/contiguity and
turn kernel status codes into exceptions.
"""

import os

import numpy as np

from ditfuse import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("DITFUSE_PURE_PYTHON", "") != "1":
    try:
        from ditfuse import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


class EmptyRow(ValueError):
    pass


def _float(a):
    a = np.ascontiguousarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


def masked_softmax_forward(scores, mask, impl=None):
    impl = impl or _impl
    scores = _float(scores)
    out, bad = impl.masked_softmax_forward(scores, np.ascontiguousarray(mask, dtype=bool).view(np.uint8))
    if bad >= 0:
        raise EmptyRow(f"row {bad} has no visible entries")
    return out


def masked_softmax_backward(y, g, impl=None):
    impl = impl or _impl
    y = _float(y)
    return impl.masked_softmax_backward(y, np.ascontiguousarray(g, dtype=y.dtype))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float, impl=None):
    """Separable Gaussian blur of an (H, W, C) array; radius ceil(3*sigma), symmetric borders."""
    impl = impl or _impl
    k = gaussian_kernel(sigma)
    img = _float(img)
    return impl.blur_axis(impl.blur_axis(img, k, 0), k, 1)


def span_mask(length, starts, ends, impl=None):
    impl = impl or _impl
    s = np.ascontiguousarray(starts, dtype=np.intp)
    e = np.ascontiguousarray(ends, dtype=np.intp)
    return np.asarray(impl.span_mask(int(length), s, e), dtype=bool)
