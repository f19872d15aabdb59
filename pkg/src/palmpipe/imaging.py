"""Grayscale raster type, resampling, enhancement and degradation operators."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from ._homog import apply_h, dlt
from .errors import BadWindow, OutOfBounds, ParseError

ENHANCE_WINDOW = 31
ENHANCE_EPS = 1e-3
# z-scores in [-Z_SPAN, Z_SPAN] are mapped affinely onto [0, 1]
Z_SPAN = 3.0
CONTRAST_TILE = 16
SNAP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel image with intensities in [0, 1].

    ``pixels`` is a read-only (height, width) float64 array; x indexes
    columns and y indexes rows, with pixel centres at integer coordinates.
    """

    pixels: np.ndarray
    channels: int = field(default=1)

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {arr.shape}")
        if self.channels != 1:
            raise ValueError("only single-channel images are supported")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def from_array(cls, arr, clip: bool = True) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if clip:
            arr = np.clip(np.nan_to_num(arr, nan=0.0), 0.0, 1.0)
        return cls(arr)

    @classmethod
    def constant(cls, width: int, height: int, value: float = 0.0) -> "Image":
        return cls(np.full((height, width), float(value)))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.shape, self.pixels.tobytes()))


# ---------------------------------------------------------------- sampling

def _snap(c: np.ndarray) -> np.ndarray:
    r = np.round(c)
    return np.where(np.abs(c - r) < SNAP_TOL, r, c)


def sample(pixels: np.ndarray, xs, ys, fill: float = 0.0) -> np.ndarray:
    """Vectorised bilinear sampling; points outside the pixel grid get ``fill``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    xs = _snap(np.asarray(xs, dtype=np.float64))
    ys = _snap(np.asarray(ys, dtype=np.float64))
    with np.errstate(invalid="ignore"):
        valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xv = np.where(valid, xs, 0.0)
    yv = np.where(valid, ys, 0.0)
    x0 = np.floor(xv).astype(np.intp)
    y0 = np.floor(yv).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xv - x0
    fy = yv - y0
    top = pixels[y0, x0] * (1.0 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1.0 - fx) + pixels[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.where(valid, out, fill)


def bilinear_sample(img: Image, x: float, y: float) -> float:
    """Intensity at a real-valued point inside the image rectangle."""
    if not (0.0 <= x <= img.width - 1 and 0.0 <= y <= img.height - 1):
        raise OutOfBounds(f"({x}, {y}) outside {img.width}x{img.height} image")
    return float(np.clip(sample(img.pixels, np.array([x]), np.array([y]))[0], 0.0, 1.0))


def warp_pixels(pixels: np.ndarray, H: np.ndarray, out_shape: tuple[int, int], fill: float = 0.0) -> np.ndarray:
    """Resample ``pixels`` so that output point p shows the input at H⁻¹ p."""
    oh, ow = out_shape
    ys, xs = np.mgrid[0:oh, 0:ow]
    pts = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    src = apply_h(np.linalg.inv(H), pts)
    return np.clip(sample(pixels, src[:, 0], src[:, 1], fill).reshape(oh, ow), 0.0, 1.0)


def resize_pixels(pixels: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    h, w = pixels.shape
    oh, ow = out_shape
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    gx, gy = np.meshgrid(xs, ys)
    return sample(pixels, gx, gy)


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.array(pixels, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(pixels, dtype=np.float64), sigma, mode="nearest")


def block_downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    h, w = pixels.shape
    ph, pw = -h % factor, -w % factor
    padded = np.pad(pixels, ((0, ph), (0, pw)), mode="edge")
    H, W = padded.shape
    return padded.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))


# ------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class AugmentationSpec:
    """Magnitudes for each perturbation and the chance that each one fires.

    Rotation, translation, scale, blur and downsampling are applied at the
    stated magnitude; the perspective term displaces every image corner by
    an independent uniform offset in [-perspective_jitter, perspective_jitter].
    """

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    blur_sigma: float = 0.0
    downsample_factor: int = 1
    perspective_jitter: float = 0.0
    apply_probability: float = 0.5

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be non-negative")
        if int(self.downsample_factor) != self.downsample_factor or self.downsample_factor < 1:
            raise ValueError("downsample_factor must be an integer >= 1")
        if self.perspective_jitter < 0:
            raise ValueError("perspective_jitter must be non-negative")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")


def _about(c: np.ndarray, M: np.ndarray) -> np.ndarray:
    T = np.array([[1.0, 0, c[0]], [0, 1.0, c[1]], [0, 0, 1.0]])
    Ti = np.array([[1.0, 0, -c[0]], [0, 1.0, -c[1]], [0, 0, 1.0]])
    return T @ M @ Ti


def apply_augmentation(img: Image, spec: AugmentationSpec, seed: int) -> Image:
    """Apply the perturbations selected by ``seed`` in a fixed order.

    Order: scale, rotation, translation, perspective (composed into one
    resampling), then blur, then downsample-and-restore.
    """
    rng = np.random.default_rng(seed)
    fires = rng.random(6) < spec.apply_probability
    corner_offsets = rng.uniform(-1.0, 1.0, size=(4, 2)) * spec.perspective_jitter
    do_scale, do_rot, do_shift, do_persp, do_blur, do_down = fires

    h, w = img.shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    H = np.eye(3)
    if do_scale and spec.scale != 1.0:
        H = _about(c, np.diag([spec.scale, spec.scale, 1.0])) @ H
    if do_rot and spec.rotation % 360.0 != 0.0:
        t = np.deg2rad(spec.rotation)
        R = np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1.0]])
        H = _about(c, R) @ H
    if do_shift and tuple(spec.translation) != (0.0, 0.0):
        dx, dy = spec.translation
        H = np.array([[1.0, 0, dx], [0, 1.0, dy], [0, 0, 1.0]]) @ H
    if do_persp and spec.perspective_jitter > 0:
        corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=float)
        H = dlt(corners, corners + corner_offsets) @ H

    pixels = img.pixels
    if not np.allclose(H, np.eye(3), rtol=0, atol=1e-12):
        pixels = warp_pixels(pixels, H, (h, w))
    if do_blur and spec.blur_sigma > 0:
        pixels = gaussian_blur(pixels, spec.blur_sigma)
    if do_down and spec.downsample_factor > 1:
        pixels = resize_pixels(block_downsample(pixels, int(spec.downsample_factor)), (h, w))
    if pixels is img.pixels:
        return img
    return Image.from_array(pixels)


# ------------------------------------------------------------- enhancement

def local_stats(pixels: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    mean = ndimage.uniform_filter(pixels, window, mode="reflect")
    mean_sq = ndimage.uniform_filter(pixels * pixels, window, mode="reflect")
    return mean, np.maximum(mean_sq - mean * mean, 0.0)


def enhance_baseline(img: Image, window: int = ENHANCE_WINDOW, eps: float = ENHANCE_EPS) -> Image:
    """Local contrast normalisation.

    Each pixel becomes its local z-score (value - mean) / (std + eps) over a
    ``window`` square, mapped affinely so z = ±3 lands on 0 and 1 (values
    beyond are clipped). Zero-variance neighbourhoods map to 0.5.
    """
    if window % 2 == 0 or window < 3 or window > min(img.width, img.height):
        raise BadWindow(f"window {window} must be odd and within [3, {min(img.width, img.height)}]")
    x = img.pixels
    mean, var = local_stats(x, window)
    flat = var < 1e-12
    z = (x - mean) / (np.sqrt(var) + eps)
    out = np.clip(0.5 + z / (2.0 * Z_SPAN), 0.0, 1.0)
    out[flat] = 0.5
    return Image.from_array(out)


def ridge_contrast(img: Image, tile: int = CONTRAST_TILE) -> float:
    """Mean intensity standard deviation over non-overlapping square tiles."""
    x = img.pixels
    h, w = x.shape
    if h < tile or w < tile:
        return 0.0 if x.min() == x.max() else float(x.std())
    th, tw = h // tile, w // tile
    tiles = x[: th * tile, : tw * tile].reshape(th, tile, tw, tile)
    std = tiles.std(axis=(1, 3))
    # exact zero on flat tiles (the float mean can leave ~1e-17 residue)
    std[tiles.max(axis=(1, 3)) == tiles.min(axis=(1, 3))] = 0.0
    return float(std.mean())


def gradient_energy(img: Image) -> float:
    """Sum of gradient magnitudes (central differences)."""
    gy, gx = np.gradient(img.pixels)
    return float(np.hypot(gx, gy).sum())


# ---------------------------------------------------------------------- io

def read_image(path) -> Image:
    """Load an 8-bit grayscale PNG or binary PGM as an Image."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read image {path}: {exc}") from exc
    return Image(arr / 255.0)


def to_uint8(img: Image) -> np.ndarray:
    return np.round(img.pixels * 255.0).astype(np.uint8)


def write_image(img: Image, path) -> None:
    """Write PNG or PGM (P5) depending on the file suffix."""
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    PILImage.fromarray(to_uint8(img)).save(path, format=fmt)
