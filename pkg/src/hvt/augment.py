"""Image augmentation on float channels-last arrays in [0, 1].

Two pipelines are exposed: the two-view contrastive policy (crop, jitter,
grayscale, blur, flip) and the supervised fine-tuning policy (crop, flips,
rotation, mild jitter). Batch-level mixing (MixUp/CutMix) lives in
``hvt.finetune``.

Determinism: every random decision comes from the ``RngStream`` handed in,
in a fixed draw order, so (seed, image) pins the output bit-for-bit.

Conventions: grayscale uses ITU-R 601 luminance weights; color jitter is
applied brightness -> contrast -> saturation -> hue with clamping to [0, 1]
after each step; Gaussian blur always fires (the policy only randomizes
sigma) on a fixed 23-tap kernel with reflect padding; rotation fills
borders by edge replication.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _clip01(img):
    return np.clip(img, 0.0, 1.0)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centers and clamped borders."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def hflip(img):
    return img[:, ::-1].copy()


def vflip(img):
    return img[::-1].copy()


def to_grayscale(img):
    """Replicate the luminance channel across RGB."""
    lum = img[..., :3] @ _LUMA.astype(img.dtype)
    return np.repeat(lum[..., None], 3, axis=-1)


def gaussian_blur(img, sigma, kernel_size=23):
    """Separable Gaussian blur with a fixed truncated kernel."""
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = ndimage.convolve1d(img.astype(np.float32), k, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, k, axis=1, mode="reflect")
    return out.astype(img.dtype)


def rotate(img, degrees):
    """Rotate around the center, bilinear, borders filled by replication."""
    out = ndimage.rotate(img, degrees, reshape=False, order=1, mode="nearest")
    return _clip01(out).astype(img.dtype)


def rgb_to_hsv(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    dz = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / dz
    gc = (maxc - g) / dz
    bc = (maxc - b) / dz
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    out = np.empty(hsv.shape, dtype=hsv.dtype)
    for idx, (rr, gg, bb) in enumerate(((v, t, p), (q, v, p), (p, v, t),
                                        (p, q, v), (t, p, v), (v, p, q))):
        mask = i == idx
        out[..., 0][mask] = rr[mask]
        out[..., 1][mask] = gg[mask]
        out[..., 2][mask] = bb[mask]
    return out


def color_jitter(img, rng, brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0):
    """Randomized photometric jitter; returns (image, draw log).

    Factors are drawn even when a strength is zero, so the draw sequence
    (and therefore downstream determinism) does not depend on the policy.
    """
    log = {}
    f = rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
    log["brightness"] = f
    img = _clip01(img * img.dtype.type(f))
    f = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
    log["contrast"] = f
    mean = to_grayscale(img).mean(dtype=np.float64)
    img = _clip01(f * img + (1 - f) * img.dtype.type(mean)).astype(img.dtype)
    f = rng.uniform(max(0.0, 1 - saturation), 1 + saturation)
    log["saturation"] = f
    if saturation > 0:
        img = _clip01(f * img + (1 - f) * to_grayscale(img)).astype(img.dtype)
    shift = rng.uniform(-hue, hue)
    log["hue"] = shift
    if hue > 0:
        hsv = rgb_to_hsv(img.astype(np.float64))
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        img = _clip01(hsv_to_rgb(hsv)).astype(img.dtype)
    return img, log


def random_resized_crop(img, rng, scale, ratio, out_size):
    """Area/aspect-sampled crop resized to ``out_size`` (rows, cols).

    Ten proposals are tried; if none fits, falls back to the largest
    centered crop with aspect clamped into ``ratio``.
    """
    h, w = img.shape[:2]
    if scale[0] > scale[1] or scale[0] <= 0:
        raise ConfigError(f"bad crop scale {scale}")
    area = h * w
    box = None
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            i = int(rng.integers(0, h - ch + 1))
            j = int(rng.integers(0, w - cw + 1))
            box = (i, j, ch, cw)
            break
    if box is None:
        in_ratio = w / h
        if in_ratio < ratio[0]:
            cw, ch = w, min(h, int(round(w / ratio[0])))
        elif in_ratio > ratio[1]:
            ch, cw = h, min(w, int(round(h * ratio[1])))
        else:
            cw, ch = w, h
        box = ((h - ch) // 2, (w - cw) // 2, ch, cw)
    i, j, ch, cw = box
    crop = img[i:i + ch, j:j + cw]
    return resize_bilinear(crop, out_size[0], out_size[1]), box


def five_crop(img, ratio=0.875):
    """Four corner crops plus the center crop, each resized back to the
    input size. Crop side is ``ratio`` of the input side."""
    h, w = img.shape[:2]
    ch, cw = int(round(ratio * h)), int(round(ratio * w))
    if ch < 1 or cw < 1 or ch > h or cw > w:
        raise InputError(f"crop {ch}x{cw} does not fit image {h}x{w}")
    anchors = [(0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw),
               ((h - ch) // 2, (w - cw) // 2)]
    return [resize_bilinear(img[i:i + ch, j:j + cw], h, w) for i, j in anchors]


# ----------------------------------------------------------------------
# policies

@dataclass(frozen=True)
class SimclrPolicy:
    """Two-view contrastive augmentation policy."""

    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_kernel: int = 23
    blur_sigma: tuple = (0.1, 2.0)
    flip_p: float = 0.5


@dataclass(frozen=True)
class FinetunePolicy:
    """Supervised-training augmentation policy."""

    crop_scale: tuple = (0.8, 1.0)
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_degrees: float = 15.0
    brightness: float = 0.2
    contrast: float = 0.2


@dataclass
class ViewPair:
    """Two augmented views of one source image, with their draw logs."""

    view_a: np.ndarray
    view_b: np.ndarray
    params_a: dict = field(default_factory=dict)
    params_b: dict = field(default_factory=dict)


def _simclr_view(img, policy, rng, out_size):
    log = {}
    img, log["crop"] = random_resized_crop(img, rng, policy.crop_scale,
                                           policy.crop_ratio, out_size)
    img, jit = color_jitter(img, rng, policy.brightness, policy.contrast,
                            policy.saturation, policy.hue)
    log.update(jit)
    gray = rng.random() < policy.grayscale_p
    log["grayscale"] = bool(gray)
    if gray:
        img = to_grayscale(img)
    sigma = rng.uniform(policy.blur_sigma[0], policy.blur_sigma[1])
    log["blur_sigma"] = sigma
    img = gaussian_blur(img, sigma, policy.blur_kernel)
    flip = rng.random() < policy.flip_p
    log["hflip"] = bool(flip)
    if flip:
        img = hflip(img)
    return _clip01(img).astype(np.float32), log


def simclr_augment(image, policy, rng, out_size=None):
    """Draw two independent views of ``image`` under ``policy``."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3 or min(image.shape[:2]) < 2:
        raise InputError(f"expected an (H, W, 3) image, got {image.shape}")
    out_size = out_size or image.shape[:2]
    if min(out_size) > min(image.shape[:2]):
        raise InputError(f"image {image.shape[:2]} smaller than output {out_size}")
    va, la = _simclr_view(image, policy, rng.child("view_a"), out_size)
    vb, lb = _simclr_view(image, policy, rng.child("view_b"), out_size)
    return ViewPair(va, vb, la, lb)


def map_augment(fn, items):
    """Apply ``fn`` over items, parallel when HVT_THREADS > 1.

    Each item must carry its own RngStream, so the result is identical for
    any worker count; the default of 1 keeps augmentation in-process.
    """
    workers = int(os.environ.get("HVT_THREADS", "1") or "1")
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def finetune_augment(image, policy, rng, out_size=None):
    """One augmented training image under the supervised policy."""
    image = np.asarray(image, dtype=np.float32)
    out_size = out_size or image.shape[:2]
    img, _ = random_resized_crop(image, rng, policy.crop_scale,
                                 policy.crop_ratio, out_size)
    if rng.random() < policy.hflip_p:
        img = hflip(img)
    if rng.random() < policy.vflip_p:
        img = vflip(img)
    angle = rng.uniform(-policy.rotation_degrees, policy.rotation_degrees)
    if policy.rotation_degrees > 0:
        img = rotate(img, angle)
    img, _ = color_jitter(img, rng, policy.brightness, policy.contrast)
    return _clip01(img).astype(np.float32)
