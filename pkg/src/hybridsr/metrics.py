"""Image buffers, PNG/PNM I/O and the PSNR/SSIM quality metrics.

Metrics work on the delivered 8-bit surface. The default convention is the
luma channel (full-range BT.601: Y = 0.299 R + 0.587 G + 0.114 B, kept in
float) with a border of ``shave`` pixels removed on every side.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageError, ShapeError
from .quantization import round_half_away

Y_WEIGHTS = (0.299, 0.587, 0.114)
PSNR_INF = float("inf")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PEAK = 255.0
CONVENTIONS = ("y_channel", "rgb")


@dataclass(frozen=True)
class ImageBuf:
    """8-bit image stored as an (h, w, c) uint8 array, c in {1, 3}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ImageError(f"image must be (h, w, 1|3), got {px.shape}")
        if px.dtype != np.uint8:
            raise ImageError(f"image samples must be uint8, got {px.dtype}")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def __eq__(self, other):
        return isinstance(other, ImageBuf) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash(self.pixels.tobytes())


def image_to_tensor(img):
    """(1, c, h, w) float64 tensor in [0, 1]."""
    return np.ascontiguousarray(img.pixels.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)


def tensor_to_image(t):
    """Clamp to [0, 1], scale by 255, round half away from zero."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4 or t.shape[0] != 1:
        raise ShapeError("expected a (1, c, h, w) tensor", dims=t.shape)
    v = round_half_away(np.clip(t[0], 0.0, 1.0) * 255.0)
    return ImageBuf(v.transpose(1, 2, 0).astype(np.uint8))


# --------------------------------------------------------------------------
# I/O

_PIL_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}


def load_image(path):
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "P":
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            elif mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            else:
                raise ImageError(f"{path}: unsupported sample format {mode!r} (8-bit L/RGB only)")
    except FileNotFoundError:
        raise ImageError(f"{path}: no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageError):
            raise
        raise ImageError(f"{path}: cannot decode image ({exc})") from None
    return ImageBuf(arr.copy())


def save_image(img, path):
    path = Path(path)
    fmt = _PIL_FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ImageError(f"{path}: unsupported extension (use .png, .pgm, .ppm)")
    px = img.pixels
    if path.suffix.lower() == ".pgm" and img.channels != 1:
        raise ImageError(f"{path}: PGM holds grayscale only")
    if path.suffix.lower() == ".ppm" and img.channels != 3:
        raise ImageError(f"{path}: PPM holds RGB only")
    im = Image.fromarray(px[:, :, 0] if img.channels == 1 else px)
    im.save(path, format=fmt)
    return path


# --------------------------------------------------------------------------
# metrics


def _plane(img, convention):
    px = img.pixels.astype(np.float64)
    if convention == "y_channel":
        if img.channels == 1:
            return px
        return (Y_WEIGHTS[0] * px[:, :, 0] + Y_WEIGHTS[1] * px[:, :, 1]
                + Y_WEIGHTS[2] * px[:, :, 2])[:, :, None]
    if convention == "rgb":
        return px
    raise ValueError(f"unknown convention {convention!r}; choose from {CONVENTIONS}")


def _prepare(a, b, convention, shave):
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError("images differ in size", dims=(a.pixels.shape, b.pixels.shape))
    if shave < 0 or 2 * shave >= min(a.height, a.width):
        raise ShapeError(f"shave {shave} too large for {a.height}x{a.width}")
    pa, pb = _plane(a, convention), _plane(b, convention)
    if shave:
        pa = pa[shave:-shave, shave:-shave]
        pb = pb[shave:-shave, shave:-shave]
    return pa, pb


def psnr(a, b, convention="y_channel", shave=0):
    """PSNR in dB against a peak of 255; identical images give ``inf``."""
    pa, pb = _prepare(a, b, convention, shave)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(PEAK * PEAK / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(plane, g):
    """Separable 'valid' correlation of a 2-D plane with the 1-D window ``g``."""
    n = g.size
    rows = np.lib.stride_tricks.sliding_window_view(plane, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, convention="y_channel", shave=0):
    """Mean single-scale SSIM over all valid 11x11 Gaussian windows."""
    pa, pb = _prepare(a, b, convention, shave)
    if min(pa.shape[0], pa.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
                         dims=pa.shape)
    if np.array_equal(pa, pb):
        return 1.0
    g = gaussian_window()
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    scores = []
    for ch in range(pa.shape[2]):
        x, y = pa[:, :, ch], pb[:, :, ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
