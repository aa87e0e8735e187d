"""Image augmentations on [C, H, W] float images in [0, 1].

The colour-jitter + grayscale composite (CG) has a batched, differentiable
form (``cg_forward`` / ``cg_backward``) so perturbation generators can put it
inside their loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadKernel

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugConfig:
    crop_padding: int = 4
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.0
    gray_p: float = 0.2
    cutout_size: int = 16
    gaussian_sigma: float = 1.5
    gaussian_kernel: int = 5
    enabled: tuple = ("crop", "flip")

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "gray_p"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.gaussian_kernel % 2 != 1 or self.gaussian_kernel < 1:
            raise BadKernel(f"kernel size must be odd and positive, got {self.gaussian_kernel}")
        unknown = set(self.enabled) - set(OPS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        self.enabled = tuple(self.enabled)


def _gray(x: np.ndarray) -> np.ndarray:
    """Luma over the channel axis (axis -3), keeping that axis."""
    if x.shape[-3] != 3:
        return x.mean(axis=-3, keepdims=True)
    w = LUMA.astype(x.dtype).reshape(3, 1, 1)
    return (x * w).sum(axis=-3, keepdims=True)


def random_crop(image: np.ndarray, padding: int, rng) -> np.ndarray:
    if padding < 0:
        raise ValueError("padding must be nonnegative")
    if padding == 0:
        return image
    _, h, w = image.shape
    dy, dx = rng.integers(0, 2 * padding + 1, size=2)
    padded = np.pad(image, ((0, 0), (padding, padding), (padding, padding)))
    return padded[:, dy:dy + h, dx:dx + w]


def hflip(image: np.ndarray, p: float, rng=None) -> np.ndarray:
    if p >= 1 or (p > 0 and rng.random() < p):
        return image[:, :, ::-1]
    return image


def grayscale(image: np.ndarray) -> np.ndarray:
    return np.broadcast_to(_gray(image), image.shape).astype(image.dtype)


def _rgb_to_hsv(x):
    r, g, b = x
    maxc = x.max(axis=0)
    minc = x.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def adjust_hue(image: np.ndarray, shift: float) -> np.ndarray:
    if image.shape[0] != 3 or shift == 0:
        return image
    h, s, v = _rgb_to_hsv(image.astype(np.float64))
    return np.clip(_hsv_to_rgb((h + shift) % 1.0, s, v), 0, 1).astype(image.dtype)


@dataclass
class CGParams:
    """Per-image draws for the CG composite; arrays of length B."""

    brightness: np.ndarray
    contrast: np.ndarray
    saturation: np.ndarray
    gray: np.ndarray  # bool
    hue: np.ndarray = field(default=None)

    @classmethod
    def identity(cls, n: int):
        one = np.ones(n)
        return cls(one, one.copy(), one.copy(), np.zeros(n, bool), np.zeros(n))

    @classmethod
    def draw(cls, cfg: AugConfig, rngs) -> "CGParams":
        out = cls.identity(len(rngs))
        for i, rng in enumerate(rngs):
            b, c, s, h, g = _draw_cg(cfg, rng)
            out.brightness[i], out.contrast[i], out.saturation[i], out.hue[i], out.gray[i] = b, c, s, h, g
        return out


def _factor(strength, rng):
    return rng.uniform(max(0.0, 1 - strength), 1 + strength) if strength > 0 else 1.0


def _draw_cg(cfg: AugConfig, rng):
    b = c = s = 1.0
    h = 0.0
    if rng.random() < cfg.jitter_p:
        b = _factor(cfg.brightness, rng)
        c = _factor(cfg.contrast, rng)
        s = _factor(cfg.saturation, rng)
        h = rng.uniform(-cfg.hue, cfg.hue) if cfg.hue > 0 else 0.0
    g = bool(rng.random() < cfg.gray_p)
    return b, c, s, h, g


def cg_forward(x: np.ndarray, params: CGParams):
    """Apply brightness, contrast, saturation, (hue), grayscale to a batch.

    Returns ``(y, tape)``; ``tape`` feeds :func:`cg_backward`. Each stage is
    clipped to [0, 1] as in the usual image-tensor implementations.
    """
    tape = []
    sh = (-1, 1, 1, 1)

    def clip(z):
        mask = (z > 0) & (z < 1)
        tape.append(mask)
        return np.clip(z, 0, 1)

    b = params.brightness.reshape(sh).astype(x.dtype)
    c = params.contrast.reshape(sh).astype(x.dtype)
    s = params.saturation.reshape(sh).astype(x.dtype)
    y = clip(x * b)
    m = _gray(y).mean(axis=(1, 2, 3), keepdims=True)
    y = clip(c * y + (1 - c) * m)
    y = clip(s * y + (1 - s) * _gray(y))
    if params.hue is not None and np.any(params.hue != 0):
        y = np.stack([adjust_hue(img, h) for img, h in zip(y, params.hue)])
        tape.append(None)
    g = params.gray.reshape(sh)
    y = np.where(g, np.broadcast_to(_gray(y), y.shape), y).astype(x.dtype)
    return y, (tape, params, x.shape)


def _gray_weights(channels: int, dtype) -> np.ndarray:
    w = LUMA if channels == 3 else np.full(channels, 1.0 / channels)
    return w.astype(dtype).reshape(1, channels, 1, 1)


def _gray_vjp(g: np.ndarray) -> np.ndarray:
    """VJP of x -> broadcast(gray(x)) over channels."""
    return g.sum(axis=1, keepdims=True) * _gray_weights(g.shape[1], g.dtype)


def cg_backward(tape, grad: np.ndarray) -> np.ndarray:
    masks, params, shape = tape
    if len(masks) > 3:
        raise NotImplementedError("hue jitter has no gradient path")
    sh = (-1, 1, 1, 1)
    b = params.brightness.reshape(sh)
    c = params.contrast.reshape(sh)
    s = params.saturation.reshape(sh)
    gmask = params.gray.reshape(sh)
    g = np.where(gmask, _gray_vjp(grad), grad)
    g = g * masks[2]
    g = s * g + (1 - s) * _gray_vjp(g)
    g = g * masks[1]
    npix = shape[2] * shape[3]
    total = g.sum(axis=(1, 2, 3), keepdims=True) / npix
    g = c * g + (1 - c) * total * _gray_weights(shape[1], g.dtype)
    g = g * masks[0]
    return (b * g).astype(grad.dtype)


def color_jitter(image: np.ndarray, strengths, rng) -> np.ndarray:
    """``strengths`` = (brightness, contrast, saturation[, hue]); each factor uniform in [1-s, 1+s]."""
    strengths = tuple(strengths) + (0.0,) * (4 - len(tuple(strengths)))
    cfg = AugConfig(jitter_p=1.0, gray_p=0.0, brightness=strengths[0], contrast=strengths[1],
                    saturation=strengths[2], hue=strengths[3])
    b, c, s, h, _ = _draw_cg(cfg, rng)
    params = CGParams(np.array([b]), np.array([c]), np.array([s]), np.zeros(1, bool), np.array([h]))
    return cg_forward(image[None], params)[0][0]


def cg_compose(image: np.ndarray, cfg: AugConfig, rng) -> np.ndarray:
    """Colour jitter with probability ``jitter_p`` then grayscale with probability ``gray_p``."""
    params = CGParams.draw(cfg, [rng])
    return cg_forward(image[None], params)[0][0]


def cutout(image: np.ndarray, mask_size: int, rng) -> np.ndarray:
    """Zero one ``mask_size`` square placed uniformly inside the image."""
    _, h, w = image.shape
    if mask_size > min(h, w):
        raise ValueError(f"mask size {mask_size} exceeds image size {h}x{w}")
    if mask_size <= 0:
        return image
    y0 = rng.integers(0, h - mask_size + 1)
    x0 = rng.integers(0, w - mask_size + 1)
    out = image.copy()
    out[:, y0:y0 + mask_size, x0:x0 + mask_size] = 0
    return out


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D kernel is their outer product."""
    if size % 2 != 1 or size < 1:
        raise BadKernel(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise BadKernel(f"sigma must be positive, got {sigma}")
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(image: np.ndarray, sigma: float, size: int) -> np.ndarray:
    k = gaussian_kernel(sigma, size)
    r = size // 2
    x = np.pad(image.astype(np.float64), ((0, 0), (r, r), (r, r)), mode="reflect")
    h, w = image.shape[1:]
    rows = sum(k[i] * x[:, i:i + h, :] for i in range(size))
    out = sum(k[j] * rows[:, :, j:j + w] for j in range(size))
    return np.clip(out, 0, 1).astype(image.dtype)


OPS = ("crop", "flip", "cg", "cutout", "gaussian")


class Augmenter:
    """Batch pipeline with a per-image rng stream keyed by (seed, epoch, index)."""

    def __init__(self, cfg: AugConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed

    @property
    def enabled(self):
        return self.cfg.enabled

    def rngs(self, indices, epoch: int):
        return [np.random.default_rng([self.seed, epoch, int(i)]) for i in indices]

    def __call__(self, images: np.ndarray, indices, epoch: int) -> np.ndarray:
        cfg = self.cfg
        if not cfg.enabled:
            return images
        rngs = self.rngs(indices, epoch)
        out = np.empty_like(images)
        for n, (img, rng) in enumerate(zip(images, rngs)):
            if "crop" in cfg.enabled:
                img = random_crop(img, cfg.crop_padding, rng)
            if "flip" in cfg.enabled:
                img = hflip(img, cfg.flip_p, rng)
            out[n] = img
        if "cg" in cfg.enabled:
            out = cg_forward(out, CGParams.draw(cfg, rngs))[0]
        if "cutout" in cfg.enabled:
            out = np.stack([cutout(img, cfg.cutout_size, rng) for img, rng in zip(out, rngs)])
        if "gaussian" in cfg.enabled:
            out = np.stack([gaussian_filter(img, cfg.gaussian_sigma, cfg.gaussian_kernel) for img in out])
        return out
