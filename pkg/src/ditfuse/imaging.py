"""Pixel-space primitives on float RGB images in [0, 1].

Images are ``(H, W, 3)`` float arrays, masks are ``(H, W)`` bool arrays.
Randomness always comes from an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

import hashlib
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from ditfuse import kernels


class ShapeMismatch(ValueError):
    pass


class BadParam(ValueError):
    pass


class UnknownSubtag(ValueError):
    pass


class Degradation(str, Enum):
    BLUR = "blur"
    GAUSS_NOISE = "gauss_noise"
    NOISE_MASK = "noise_mask"


LIGHT_FACTORS = {"LIGHT++": 1.4, "LIGHT+": 1.2, "LIGHT-": 0.8, "LIGHT--": 0.6}
CONTRAST_FACTORS = {"CONTRAST+": 1.3, "CONTRAST-": 0.7}
CONTROL_SUBTAGS = tuple(LIGHT_FACTORS) + tuple(CONTRAST_FACTORS)

BLUE = (0.0, 0.0, 1.0)


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatch(f"expected (H, W, 3) image, got {arr.shape}")
    return arr


def _check_pair(img: np.ndarray, mask: np.ndarray) -> None:
    if mask.shape != img.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {img.shape[:2]}")


def derive_rng(*keys) -> np.random.Generator:
    """Independent stream keyed by arbitrary printable keys (e.g. global seed, sample id)."""
    digest = hashlib.blake2b(":".join(map(str, keys)).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def derive_seed(*keys) -> int:
    digest = hashlib.blake2b(":".join(map(str, keys)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _bbox(region: np.ndarray) -> tuple[slice, slice] | None:
    rows = np.flatnonzero(region.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(region.any(axis=0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def blur_region(img: np.ndarray, region: np.ndarray, sigma: float) -> np.ndarray:
    """Blur values over the region's bounding box.

    Only a crop padded by the kernel radius is filtered; inside the box this
    matches blurring the whole image with symmetric borders.
    """
    box = _bbox(region)
    out = img.copy()
    if box is None:
        return out
    r = int(np.ceil(3.0 * sigma))
    h, w = region.shape
    y0, y1 = max(box[0].start - r, 0), min(box[0].stop + r, h)
    x0, x1 = max(box[1].start - r, 0), min(box[1].stop + r, w)
    blurred = kernels.gaussian_blur(img[y0:y1, x0:x1], sigma)
    sub = blurred[box[0].start - y0 : box[0].stop - y0, box[1].start - x0 : box[1].stop - x0]
    window = out[box]
    keep = region[box]
    window[keep] = sub[keep]
    return out


def degrade(img, region, kind: Degradation | str, params: dict, rng: np.random.Generator) -> np.ndarray:
    """Degrade ``img`` inside ``region``; pixels outside are returned untouched.

    ``params`` holds ``sigma`` for blur and Gaussian noise; the noise mask
    takes no parameters.
    """
    img = as_image(img)
    region = np.asarray(region, dtype=bool)
    _check_pair(img, region)
    kind = Degradation(kind)
    out = img.copy()
    n = int(region.sum())
    if kind is Degradation.BLUR:
        sigma = float(params.get("sigma", 0.0))
        if not sigma > 0:
            raise BadParam(f"blur sigma must be > 0, got {sigma}")
        return blur_region(img, region, sigma)
    if kind is Degradation.GAUSS_NOISE:
        sigma = float(params.get("sigma", 0.0))
        if sigma < 0:
            raise BadParam(f"noise sigma must be >= 0, got {sigma}")
        if sigma == 0:
            return out
        noise = rng.normal(0.0, sigma, size=(n, 3))
        out[region] = np.clip(img[region] + noise, 0.0, 1.0)
        return out
    out[region] = rng.random((n, 3))
    return out


def adjust_photometric(img, subtag: str) -> np.ndarray:
    img = as_image(img)
    if subtag in LIGHT_FACTORS:
        out = img * LIGHT_FACTORS[subtag]
    elif subtag in CONTRAST_FACTORS:
        out = (img - 0.5) * CONTRAST_FACTORS[subtag] + 0.5
    else:
        raise UnknownSubtag(subtag)
    return np.clip(out, 0.0, 1.0)


def overlay_mask(img, mask, alpha: float = 0.5, color=BLUE) -> np.ndarray:
    img = as_image(img)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(img, mask)
    if not 0.0 < alpha < 1.0:
        raise BadParam(f"alpha must be in (0, 1), got {alpha}")
    out = img.copy()
    out[mask] = (1.0 - alpha) * img[mask] + alpha * np.asarray(color, dtype=np.float64)
    return out


def recover_mask(overlaid, original, tol: float = 1e-3) -> np.ndarray:
    overlaid, original = as_image(overlaid), as_image(original)
    if overlaid.shape != original.shape:
        raise ShapeMismatch(f"{overlaid.shape} vs {original.shape}")
    return np.abs(overlaid - original).max(axis=2) > tol


def mean_fuse(a, b) -> np.ndarray:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return (a + b) / 2.0


def to_gray(img) -> np.ndarray:
    img = as_image(img)
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


# ---------------------------------------------------------------- PNG I/O


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(as_image(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(img, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG", optimize=False)


def load_png(path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BICUBIC)
        return np.asarray(im, dtype=np.float64) / 255.0


def save_mask_png(mask, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128
