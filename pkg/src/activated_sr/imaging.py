"""Image I/O, the known-kernel bicubic degradation model, aligned LR/HR
cropping, and the PSNR/SSIM fidelity metrics.

Image convention ("ImageTensor"): a float64 numpy array of shape (H, W, C)
with C in {1, 3}, RGB channel order, values in [0, 1]. Every operation that
returns an image clamps explicitly; nothing wraps around silently. All
functions here are pure and take RNGs explicitly, so they are safe to call
from any number of concurrent workers.

Degradation model: LR = clamp((HR * k) downsampled by s) [+ noise], with k
the Keys bicubic kernel (parameter a, default -0.5) stretched by the scale
factor for anti-aliasing, whole-sample reflect padding at borders, and tap
weights renormalized to sum to one at every output position. Noise defaults
to exactly zero (the known-bicubic, noise-free setting).
"""

import hashlib
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from PIL import Image

from . import kernels
from .errors import InputError

# np.ndarray of shape (H, W, C), float64, values in [0, 1]
ImageTensor = np.ndarray

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10

# ITU-R BT.601 YCbCr luma on [0,1] RGB (the SR-standard "Y channel" metric)
_LUMA_WEIGHTS = np.array([65.481, 128.553, 24.966]) / 255.0
_LUMA_OFFSET = 16.0 / 255.0


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the ImageTensor contract; returns the array as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InputError(f"{name}: expected (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError(f"{name}: values outside [0, 1]")
    return arr


@dataclass(frozen=True)
class DegradationSpec:
    """Known-kernel degradation: bicubic anti-aliased downsampling by
    ``scale``, plus optional additive Gaussian noise (default: none).

    ``kernel_a`` is the free parameter of the Keys cubic; -0.5 is the common
    convention. ``noise_sigma`` > 0 adds seeded Gaussian noise in make_pair
    (never in bicubic_downsample, which is the pure kernel operation).
    """

    scale: int
    kernel_a: float = -0.5
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.scale < 2:
            raise InputError(f"scale must be >= 2, got {self.scale}")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class PairedSample:
    """An LR/HR pair tied to the spec that produced the LR side.

    For pairs from make_pair, ``lr`` is bit-exactly reproducible from ``hr``
    via ``spec``. Crops keep that property only in the interior (the kernel
    sees different context near crop borders).
    """

    id: str
    hr: ImageTensor
    lr: ImageTensor
    spec: DegradationSpec


def _cubic(x: np.ndarray, a: float) -> np.ndarray:
    """Keys piecewise-cubic kernel with free parameter ``a``."""
    ax = np.abs(x)
    near = (a + 2) * ax**3 - (a + 3) * ax**2 + 1
    far = a * ax**3 - 5 * a * ax**2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _reflect_index(j: np.ndarray, n: int) -> np.ndarray:
    """Whole-sample reflection (numpy 'reflect' mode): ..., 2, 1 | 0, 1, 2."""
    if n == 1:
        return np.zeros_like(j)
    period = 2 * n - 2
    j = np.abs(j) % period
    return np.where(j >= n, period - j, j)


@lru_cache(maxsize=64)
def bicubic_axis_taps(n_in: int, scale: int, kernel_a: float = -0.5):
    """Tap indices and weights for one axis of anti-aliased bicubic
    downsampling by an integer factor.

    Output position i draws from a 4*scale tap window centered at source
    coordinate (i + 0.5) * scale - 0.5; the stretched kernel provides
    anti-aliasing, indices are reflect-mapped into bounds, and weights are
    renormalized so each row sums to exactly 1 (partition of unity).

    Returns:
        (idx, w): int64 and float64 arrays of shape (n_out, 4*scale).
    """
    if n_in < scale:
        raise InputError(f"axis size {n_in} smaller than scale {scale}")
    n_out = n_in // scale
    i = np.arange(n_out)
    center = (i + 0.5) * scale - 0.5
    first = np.floor(center).astype(np.int64) - 2 * scale + 1
    taps = first[:, None] + np.arange(4 * scale)[None, :]
    w = _cubic((taps - center[:, None]) / scale, kernel_a) / scale
    w /= w.sum(axis=1, keepdims=True)
    idx = _reflect_index(taps, n_in)
    idx.setflags(write=False)
    w.setflags(write=False)
    return idx, w


def bicubic_downsample(img: ImageTensor, spec: DegradationSpec) -> ImageTensor:
    """Anti-aliased bicubic downsampling by ``spec.scale``.

    Output dims are floor(H/s) x floor(W/s); rows are filtered first, then
    columns. Values are clamped to [0, 1].

    Raises:
        InputError: if any spatial dim is smaller than the scale factor.
    """
    img = validate_image(img)
    s = spec.scale
    h, w, _ = img.shape
    if h < s or w < s:
        raise InputError(f"image {h}x{w} too small for scale {s}")
    row_idx, row_w = bicubic_axis_taps(h, s, spec.kernel_a)
    col_idx, col_w = bicubic_axis_taps(w, s, spec.kernel_a)
    channels = []
    for c in range(img.shape[2]):
        plane = np.ascontiguousarray(img[:, :, c])
        plane = kernels.apply_weights_axis0(plane, row_idx, row_w)
        plane = kernels.apply_weights_axis0(
            np.ascontiguousarray(plane.T), col_idx, col_w
        ).T
        channels.append(plane)
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0)


def _stable_id_seed(base_seed: int, sample_id: str) -> np.random.Generator:
    digest = hashlib.sha256(sample_id.encode()).digest()[:8]
    return np.random.default_rng([base_seed, int.from_bytes(digest, "little")])


def make_pair(hr: ImageTensor, spec: DegradationSpec, id: str) -> PairedSample:
    """Build a PairedSample by degrading ``hr`` with ``spec``.

    With ``spec.noise_sigma`` > 0, Gaussian noise seeded from
    (noise_seed, id) is added to the LR side and re-clamped, so the pair
    stays reproducible from (hr, spec, id).
    """
    lr = bicubic_downsample(hr, spec)
    if spec.noise_sigma > 0:
        rng = _stable_id_seed(spec.noise_seed, id)
        lr = np.clip(lr + rng.normal(0.0, spec.noise_sigma, lr.shape), 0.0, 1.0)
    return PairedSample(id=id, hr=hr, lr=lr, spec=spec)


def aligned_random_crop(pair: PairedSample, lr_crop: int, rng_seed) -> PairedSample:
    """Random aligned crop: LR window of lr_crop^2, HR window of
    (lr_crop*s)^2, top-left corners related by the scale factor.

    ``rng_seed`` may be an int or a numpy Generator; results are
    deterministic given the seed / generator state.

    Raises:
        InputError: if the LR side is smaller than ``lr_crop``.
    """
    rng = np.random.default_rng(rng_seed) if not isinstance(rng_seed, np.random.Generator) else rng_seed
    s = pair.spec.scale
    lh, lw, _ = pair.lr.shape
    if lr_crop < 1 or lr_crop > lh or lr_crop > lw:
        raise InputError(f"crop {lr_crop} does not fit LR of {lh}x{lw}")
    y = int(rng.integers(0, lh - lr_crop + 1))
    x = int(rng.integers(0, lw - lr_crop + 1))
    lr = pair.lr[y : y + lr_crop, x : x + lr_crop].copy()
    hr = pair.hr[y * s : (y + lr_crop) * s, x * s : (x + lr_crop) * s].copy()
    return replace(pair, id=f"{pair.id}#y{y}x{x}", hr=hr, lr=lr)


def luma(img: ImageTensor) -> ImageTensor:
    """BT.601 luma channel of an RGB image (identity for single-channel)."""
    img = validate_image(img)
    if img.shape[2] == 1:
        return img
    y = img @ _LUMA_WEIGHTS + _LUMA_OFFSET
    return np.clip(y, 0.0, 1.0)[:, :, None]


def _metric_inputs(a: ImageTensor, b: ImageTensor, mode: str):
    a = validate_image(a, "a")
    b = validate_image(b, "b")
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mode == "luma":
        return luma(a), luma(b)
    if mode == "rgb":
        return a, b
    raise InputError(f"unknown metric mode {mode!r}")


def psnr(a: ImageTensor, b: ImageTensor, mode: str = "rgb") -> float:
    """Peak signal-to-noise ratio in dB for [0,1]-range images.

    10*log10(1/MSE), capped at 100 dB when MSE < 1e-10 so identical images
    report a finite value.
    """
    a, b = _metric_inputs(a, b, mode)
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def _ssim_plane(a: np.ndarray, b: np.ndarray) -> float:
    k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = kernels.gauss_valid(a, k)
    mu_b = kernels.gauss_valid(b, k)
    e_aa = kernels.gauss_valid(a * a, k)
    e_bb = kernels.gauss_valid(b * b, k)
    e_ab = kernels.gauss_valid(a * b, k)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@lru_cache(maxsize=8)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian window used for SSIM local statistics."""
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    k.setflags(write=False)
    return k


def ssim(a: ImageTensor, b: ImageTensor, mode: str = "rgb") -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local weighted moments over valid windows only (a 5-pixel border is
    excluded), standard stabilizers C1=(0.01)^2 and C2=(0.03)^2 for
    [0,1]-range data, averaged over channels.

    Raises:
        InputError: on shape mismatch or spatial dims < 11.
    """
    a, b = _metric_inputs(a, b, mode)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InputError(f"image {a.shape[0]}x{a.shape[1]} smaller than SSIM window {SSIM_WINDOW}")
    vals = [
        _ssim_plane(np.ascontiguousarray(a[:, :, c]), np.ascontiguousarray(b[:, :, c]))
        for c in range(a.shape[2])
    ]
    return float(np.mean(vals))


def load_png(path) -> ImageTensor:
    """Decode an 8-bit PNG (or other lossless raster) to an ImageTensor.

    Mapping is [0, 255] -> [0, 1] by division by 255. Grayscale stays
    single-channel; anything else is converted to RGB.
    """
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_png(img: ImageTensor, path) -> None:
    """Encode an ImageTensor as 8-bit PNG: clamp, then round half-up."""
    img = validate_image(img)
    quant = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if quant.shape[2] == 1:
        Image.fromarray(quant[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(quant, mode="RGB").save(path, format="PNG")
