"""Flow-matching objective, condition dropout and the Euler sampler.

Time runs from noise at ``t = 0`` to data at ``t = 1``:
``x_t = t * x + (1 - t) * eps`` with regression target ``x - eps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from ditfuse import prompt as P
from ditfuse.tensor import Tensor, mean, square, sub


class NonFiniteState(FloatingPointError):
    pass


@dataclass
class FlowBatch:
    x: np.ndarray  # clean latents (B, ...)
    eps: np.ndarray  # standard-normal draw, same shape
    t: np.ndarray  # (B,) in [0, 1]
    cond: Any = None

    def __post_init__(self):
        if self.x.shape != self.eps.shape:
            raise ValueError(f"x {self.x.shape} and eps {self.eps.shape} differ")
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        if np.any((self.t < 0) | (self.t > 1)):
            raise ValueError("t must lie in [0, 1]")


def _per_sample(t, like: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def interpolate(x, eps, t):
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise ValueError(f"x {x.shape} and eps {eps.shape} differ")
    tt = _per_sample(t, x)
    return tt * x + (1.0 - tt) * eps


def fm_loss(v_pred, x, eps) -> Tensor:
    """Mean of ((x - eps) - v_pred)^2 over every element of the batch."""
    x, eps = np.asarray(x), np.asarray(eps)
    v = v_pred if isinstance(v_pred, Tensor) else Tensor(np.asarray(v_pred, dtype=np.float64))
    if v.shape != x.shape or x.shape != eps.shape:
        raise ValueError(f"shape mismatch: v {v.shape}, x {x.shape}, eps {eps.shape}")
    target = Tensor((x - eps).astype(v.dtype))
    return mean(square(sub(target, v)))


def null_condition(tokens) -> np.ndarray:
    """Replace tags and instruction text with the null token; image wrappers stay."""
    ids = np.asarray(tokens, dtype=np.int64).copy()
    keep = np.isin(ids, list(P.WRAPPER_IDS))
    ids[~keep] = P.NULL_ID
    return ids


def drop_condition(token_lists: Sequence, p: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Null the text condition of each sample independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    draws = rng.random(len(token_lists))
    return [null_condition(toks) if u < p else np.asarray(toks, dtype=np.int64) for toks, u in zip(token_lists, draws)]


VelocityFn = Callable[[np.ndarray, float, Any], np.ndarray]


def sample_euler(
    velocity: VelocityFn,
    cond: Any,
    shape: tuple[int, ...],
    steps: int = 32,
    guidance: float = 1.0,
    rng: np.random.Generator | None = None,
    uncond: Any = None,
    decode: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Integrate dx/dt = v from t = 0 (noise) to t = 1 with ``steps`` Euler steps.

    With ``guidance != 1`` the velocity is ``v_u + s * (v_c - v_u)`` where
    ``v_u`` is evaluated on ``uncond``. If ``decode`` is given the result is
    decoded and clipped to [0, 1]; otherwise the latent is returned.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = rng.standard_normal(shape)
    for k in range(steps):
        t = k / steps
        v = np.asarray(velocity(x, t, cond), dtype=np.float64)
        if guidance != 1.0:
            vu = np.asarray(velocity(x, t, uncond), dtype=np.float64)
            v = vu + guidance * (v - vu)
        x = x + v / steps
        if not np.isfinite(x).all():
            raise NonFiniteState(f"non-finite state at step {k}")
    if decode is None:
        return x
    return np.clip(decode(x), 0.0, 1.0)
