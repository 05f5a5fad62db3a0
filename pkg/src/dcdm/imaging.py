"""Image decoding, registration, and augmentation.

Images are 8-bit RGB buffers: uint8 arrays of shape (height, width, 3).
Decoding goes through Pillow with an explicit format allow-list; all pixel
math (resampling, rotation, noise, and the rest) is done here in numpy so
the behavior is pinned down to the formula level.

Every augmentation preserves the input dimensions and is deterministic
for a given (image, spec) pair. Geometric ops resample bilinearly with
zero fill outside the source frame; identity parameters (0 degrees,
fraction 1.0) short-circuit to bitwise copies.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ShapeError

SUPPORTED_FORMATS = ("PNG", "JPEG", "PPM")

AUGMENT_OPS = (
    "hflip",
    "vflip",
    "rotate",
    "rotate_no_pad",
    "blur",
    "gaussian_noise",
    "random_contrast",
    "random_bright",
    "random_crop",
    "deterministic_crop",
    "scale_proportional",
    "shear_x",
    "shear_y",
)


def validate_image(img: np.ndarray) -> np.ndarray:
    if not (isinstance(img, np.ndarray) and img.ndim == 3 and img.shape[2] == 3
            and img.dtype == np.uint8 and img.shape[0] > 0 and img.shape[1] > 0):
        raise ShapeError(
            f"image buffer must be non-empty uint8 (H, W, 3), got "
            f"{getattr(img, 'shape', None)} {getattr(img, 'dtype', type(img))}")
    return img


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG/JPEG/PPM bytes to an RGB buffer.

    Grayscale sources are replicated across the three channels; alpha is
    dropped. Anything else (unknown, unsupported, or corrupt) raises
    DecodeError naming the format when it can be identified.
    """
    try:
        img = Image.open(io.BytesIO(data))
    except UnidentifiedImageError:
        raise DecodeError("could not decode image: unrecognized format") from None
    fmt = img.format or "unknown"
    if fmt not in SUPPORTED_FORMATS:
        raise DecodeError(f"unsupported image format {fmt}")
    try:
        img = img.convert("RGB")
        img.load()
    except OSError as err:
        raise DecodeError(f"corrupt {fmt} data: {err}") from None
    out = np.asarray(img, dtype=np.uint8)
    if out.ndim != 3 or out.shape[2] != 3 or out.size == 0:
        raise DecodeError(f"decoded {fmt} image is empty")
    return out


def encode_png(img: np.ndarray) -> bytes:
    validate_image(img)
    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def register(img: np.ndarray, target: tuple = (272, 363)) -> np.ndarray:
    """Resample to exactly target (height, width) with bilinear weights.

    Plain resize: aspect ratio is not preserved. An image already at the
    target size comes back pixel-identical.
    """
    validate_image(img)
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ShapeError(f"register target must be positive, got {target}")
    h, w = img.shape[:2]
    if (h, w) == (th, tw):
        return img.copy()
    return _resize_bilinear(img, th, tw)


def to_tensor(img: np.ndarray) -> np.ndarray:
    """Channels-first float32 tensor scaled to [0, 1] by /255."""
    validate_image(img)
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


# -- resampling ----------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Half-pixel-center bilinear resize with clamped edges."""
    h, w = img.shape[:2]
    sy = (np.arange(th, dtype=np.float64) + 0.5) * (h / th) - 0.5
    sx = (np.arange(tw, dtype=np.float64) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :, None]
    pix = img.astype(np.float64)
    top = pix[y0][:, x0] * (1 - fx) + pix[y0][:, x1] * fx
    bottom = pix[y1][:, x0] * (1 - fx) + pix[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _affine_sample(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Inverse-map affine resample with bilinear weights and zero fill.

    `inv` is a 2x3 matrix taking output (x, y, 1) to source (x, y).
    """
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    pix = img.astype(np.float64)

    def tap(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros((h, w, 3), dtype=np.float64)
        vals[valid] = pix[yy[valid], xx[valid]]
        return vals

    out = (tap(y0, x0) * (1 - fx) * (1 - fy)
           + tap(y0, x0 + 1) * fx * (1 - fy)
           + tap(y0 + 1, x0) * (1 - fx) * fy
           + tap(y0 + 1, x0 + 1) * fx * fy)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    if angle_deg == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    # inverse of a counterclockwise rotation about the image center
    inv = np.array([
        [c, s, cx - c * cx - s * cy],
        [-s, c, cy + s * cx - c * cy],
    ])
    return _affine_sample(img, inv)


def _inscribed_dims(w: int, h: int, angle_deg: float) -> tuple:
    """Largest rectangle of the original aspect ratio that fits fully
    inside the rotated frame (no fill visible)."""
    a = abs(np.deg2rad(angle_deg)) % np.pi
    if a > np.pi / 2:
        a = np.pi - a
    sin_a, cos_a = np.sin(a), np.cos(a)
    long_side, short_side = max(w, h), min(w, h)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if w >= h else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    return max(1, int(wr)), max(1, int(hr))


def _rotate_no_pad(img: np.ndarray, angle_deg: float) -> np.ndarray:
    if angle_deg == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    rotated = _rotate(img, angle_deg)
    cw, ch = _inscribed_dims(w, h, angle_deg)
    y0 = (h - ch) // 2
    x0 = (w - cw) // 2
    return _resize_bilinear(rotated[y0 : y0 + ch, x0 : x0 + cw], h, w)


# -- photometric ops -----------------------------------------------------------


def _blur3(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return img.copy()
    offsets = np.array([-1.0, 0.0, 1.0])
    k1 = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(k1, k1)
    kernel /= kernel.sum()
    padded = np.pad(img.astype(np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    out = np.zeros((h, w, 3), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noisy = img.astype(np.float64) + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def _contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = float(img.mean())
    out = mean + factor * (img.astype(np.float64) - mean)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _brightness(img: np.ndarray, factor: float) -> np.ndarray:
    out = img.astype(np.float64) * factor
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# -- crops and scale -----------------------------------------------------------


def _crop_resize(img: np.ndarray, y0: int, x0: int, ch: int, cw: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (ch, cw) == (h, w):
        return img.copy()
    return _resize_bilinear(img[y0 : y0 + ch, x0 : x0 + cw], h, w)


def _crop_dims(h: int, w: int, fraction: float) -> tuple:
    return max(1, int(h * fraction)), max(1, int(w * fraction))


def _random_crop(img: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    h, w = img.shape[:2]
    ch, cw = _crop_dims(h, w, fraction)
    rng = np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return _crop_resize(img, y0, x0, ch, cw)


def _center_crop(img: np.ndarray, fraction: float) -> np.ndarray:
    h, w = img.shape[:2]
    ch, cw = _crop_dims(h, w, fraction)
    return _crop_resize(img, (h - ch) // 2, (w - cw) // 2, ch, cw)


def _scale_proportional(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape[:2]
    nh = max(1, int(round(h * factor)))
    nw = max(1, int(round(w * factor)))
    if (nh, nw) == (h, w):
        return img.copy()
    scaled = _resize_bilinear(img, nh, nw)
    if nh >= h and nw >= w:
        y0, x0 = (nh - h) // 2, (nw - w) // 2
        return scaled[y0 : y0 + h, x0 : x0 + w].copy()
    out = np.zeros((h, w, 3), dtype=np.uint8)
    y0, x0 = max(0, (h - nh) // 2), max(0, (w - nw) // 2)
    ys, xs = min(nh, h), min(nw, w)
    sy0, sx0 = max(0, (nh - h) // 2), max(0, (nw - w) // 2)
    out[y0 : y0 + ys, x0 : x0 + xs] = scaled[sy0 : sy0 + ys, sx0 : sx0 + xs]
    return out


def _shear(img: np.ndarray, k: float, axis: str) -> np.ndarray:
    if k == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if axis == "x":  # output x sampled from x - k*(y - cy)
        inv = np.array([[1.0, -k, k * cy], [0.0, 1.0, 0.0]])
    else:
        inv = np.array([[1.0, 0.0, 0.0], [-k, 1.0, k * cx]])
    return _affine_sample(img, inv)


# -- the augmentation dispatcher -------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    """One augmentation instruction.

    `sigma` covers both blur width and noise amplitude (0..255 scale) and
    defaults per op; `factor` drives contrast/brightness/scale and, when
    left None on the random_* ops, is drawn uniformly from [0.7, 1.3]
    using `seed`.
    """

    op: str
    angle: float = 30.0
    sigma: Optional[float] = None
    factor: Optional[float] = None
    crop_fraction: float = 0.8
    shear: float = 0.2
    seed: int = 0


def _validate_spec(spec: AugmentSpec) -> None:
    if spec.op not in AUGMENT_OPS:
        raise ValueError(f"unknown augment op {spec.op!r}; choose from {AUGMENT_OPS}")
    if not -180.0 <= spec.angle <= 180.0:
        raise ValueError(f"angle must be in [-180, 180], got {spec.angle}")
    if spec.sigma is not None and spec.sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {spec.sigma}")
    if spec.factor is not None and spec.factor <= 0:
        raise ValueError(f"factor must be > 0, got {spec.factor}")
    if not 0.0 < spec.crop_fraction <= 1.0:
        raise ValueError(f"crop fraction must be in (0, 1], got {spec.crop_fraction}")


def _resolve_factor(spec: AugmentSpec) -> float:
    if spec.factor is not None:
        return spec.factor
    return float(np.random.default_rng(spec.seed).uniform(0.7, 1.3))


def augment(img: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Apply one augmentation; output dims always equal input dims."""
    validate_image(img)
    _validate_spec(spec)
    op = spec.op
    if op == "hflip":
        return img[:, ::-1].copy()
    if op == "vflip":
        return img[::-1].copy()
    if op == "rotate":
        return _rotate(img, spec.angle)
    if op == "rotate_no_pad":
        return _rotate_no_pad(img, spec.angle)
    if op == "blur":
        return _blur3(img, 1.0 if spec.sigma is None else spec.sigma)
    if op == "gaussian_noise":
        return _gaussian_noise(img, 10.0 if spec.sigma is None else spec.sigma,
                               spec.seed)
    if op == "random_contrast":
        return _contrast(img, _resolve_factor(spec))
    if op == "random_bright":
        return _brightness(img, _resolve_factor(spec))
    if op == "random_crop":
        return _random_crop(img, spec.crop_fraction, spec.seed)
    if op == "deterministic_crop":
        return _center_crop(img, spec.crop_fraction)
    if op == "scale_proportional":
        return _scale_proportional(img, _resolve_factor(spec))
    if op == "shear_x":
        return _shear(img, spec.shear, "x")
    return _shear(img, spec.shear, "y")
