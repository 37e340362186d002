"""Pure-numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` module; used when
the extension is not built or ``DITFUSE_PURE_PYTHON=1`` is set.
"""

import numpy as np


def masked_softmax_forward(scores, mask):
    """Row softmax over visible entries. Returns (out, first_empty_row or -1)."""
    visible = mask.any(axis=1)
    if not visible.all():
        return None, int(np.argmin(visible))
    shifted = np.where(mask, scores, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0).astype(scores.dtype, copy=False)
    return e / e.sum(axis=1, keepdims=True), -1


def masked_softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def blur_axis(img, kernel, axis):
    """Correlate an (H, W, C) image with ``kernel`` along ``axis`` (0 or 1), symmetric borders."""
    r = (kernel.shape[0] - 1) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for k in range(kernel.shape[0]):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(k, k + n)
        out += kernel[k] * padded[tuple(sl)]
    return out


def span_mask(length, starts, ends):
    """Causal mask with bidirectional blocks on [starts[k], ends[k])."""
    mask = np.tril(np.ones((length, length), dtype=bool))
    for s, e in zip(starts, ends):
        mask[s:e, s:e] = True
    return mask
