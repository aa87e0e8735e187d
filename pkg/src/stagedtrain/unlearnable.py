"""Unlearnable-example generators: error-minimizing (EM), robust EM (REM, REM-T),
synthetic sign patterns (SP) and one-pixel shortcuts (OPS).

All perturbations are additive in normalized pixel space and applied as
``clip(x + delta, 0, 1)``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import AugConfig, CGParams, cg_backward, cg_forward
from .data import ImageDataset
from .errors import CorruptPayload, IoFailure, NonConvergence, ShapeMismatch, TooManyClasses
from .nn import Network, backward, cross_entropy, forward, predict
from .optim import OptimizerState, sgd_step

MODES = ("sample", "class")
FAMILIES = ("EM", "REM", "SP", "OPS")
EPS = 8 / 255
MAGIC = b"STPERT1"


@dataclass
class PerturbationSet:
    mode: str  # "sample" or "class"
    family: str
    epsilon: float
    deltas: np.ndarray  # [count, C, H, W]
    keys: np.ndarray  # sample index (sample-wise) or class id (class-wise) per row
    converged: bool = True
    rounds: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        self.keys = np.asarray(self.keys, dtype=np.int64)
        if len(self.keys) != len(self.deltas):
            raise ShapeMismatch("one key per delta required")

    def __len__(self):
        return len(self.deltas)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.deltas.shape[1:])

    def max_abs(self) -> float:
        return float(np.abs(self.deltas).max()) if self.deltas.size else 0.0

    def lookup(self, keys) -> np.ndarray:
        """Deltas for the given sample indices or labels (zeros where absent)."""
        table = {int(k): r for r, k in enumerate(self.keys)}
        out = np.zeros((len(keys),) + self.image_shape, dtype=self.deltas.dtype)
        for n, k in enumerate(keys):
            r = table.get(int(k))
            if r is not None:
                out[n] = self.deltas[r]
        return out

    def nonzero_pixels(self) -> np.ndarray:
        """Number of spatial positions touched by each delta."""
        return np.array([int(np.any(d != 0, axis=0).sum()) for d in self.deltas])


@dataclass
class GenConfig:
    model_steps: int = 10  # minibatch model updates per outer round
    inner_steps: int = 20
    step_size: float | None = None  # defaults to epsilon / 8
    eps_a: float = 4 / 255  # REM only
    adv_steps: int = 5
    adv_step_size: float | None = None  # defaults to eps_a / 4
    stop_error: float = 0.01
    max_rounds: int = 30
    with_cg: bool = False
    seed: int = 0
    batch_size: int = 128
    lr: float = 0.03

    def __post_init__(self):
        for name in ("model_steps", "inner_steps", "max_rounds", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.adv_steps < 1:
            raise ValueError("adv_steps must be >= 1")
        if self.eps_a < 0:
            raise ValueError("eps_a must be nonnegative")


StepHook = Callable[[str, np.ndarray], None]


def _project_delta(delta, x, eps, samplewise):
    delta = np.clip(delta, -eps, eps)
    if samplewise:
        # keep x + delta inside the image range as well
        delta = np.clip(x + delta, 0, 1) - x
        delta = np.clip(delta, -eps, eps)
    return delta


class _Objective:
    """Loss and input gradient at ``clip(x + delta + sigma)``, optionally through CG."""

    def __init__(self, net: Network, cg: AugConfig | None, cg_rng):
        self.net = net
        self.cg = cg
        self.cg_rng = cg_rng

    def draw(self, n):
        if self.cg is None:
            return None
        return CGParams.draw(self.cg, [self.cg_rng] * n)

    def __call__(self, z, y, params):
        tape = None
        inp = z
        if params is not None:
            inp, tape = cg_forward(z, params)
        logits, _ = forward(self.net, inp.astype(self.net.dtype), record=True)
        loss, g = cross_entropy(logits, y)
        _, gx = backward(self.net, g)
        if tape is not None:
            gx = cg_backward(tape, gx)
        # gradient through clip(.) to [0, 1]
        gx = gx * ((z > 0) & (z < 1))
        return loss, gx.astype(np.float64)


def _adversarial_sigma(obj, base, y, params, eps_a, steps, step, hook):
    """Projected gradient ascent for the worst-case sigma within ``eps_a``."""
    sigma = np.zeros_like(base)
    for _ in range(steps):
        _, g = obj(np.clip(base + sigma, 0, 1), y, params)
        sigma = np.clip(sigma + step * np.sign(g), -eps_a, eps_a)
        # the range fix can move sigma by an ulp, so clip to the budget once more
        sigma = np.clip(np.clip(base + sigma, 0, 1) - base, -eps_a, eps_a)
        if hook is not None:
            hook("sigma", sigma)
    return sigma


def _generate(data: ImageDataset, net: Network, eps: float, eps_a: float, mode: str, cfg: GenConfig,
              family: str, on_step: StepHook | None) -> PerturbationSet:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if eps < 0:
        raise ValueError("epsilon must be nonnegative")
    if tuple(data.image_shape) != tuple(net.input_shape):
        raise ShapeMismatch(f"dataset images {data.image_shape} do not match network input {net.input_shape}")
    samplewise = mode == "sample"
    n = len(data)
    x = data.images.astype(np.float64)
    y = data.labels
    rows = n if samplewise else data.num_classes
    delta = np.zeros((rows,) + data.image_shape)
    keys = np.arange(rows)
    if eps == 0:
        return PerturbationSet(mode, family, eps, delta, keys, True, 0)

    step = cfg.step_size if cfg.step_size is not None else eps / 8
    adv_step = cfg.adv_step_size if cfg.adv_step_size is not None else eps_a / 4
    root = np.random.SeedSequence([cfg.seed, 0x6E4])
    order_rng, cg_rng = (np.random.default_rng(s) for s in root.spawn(2))
    obj = _Objective(net, AugConfig(enabled=("cg",)) if cfg.with_cg else None, cg_rng)
    opt = OptimizerState.for_network(net)
    lrs = [cfg.lr] * net.depth_l
    bs = cfg.batch_size

    def current(idx):
        d = delta[idx] if samplewise else delta[y[idx]]
        return d

    def perturbed(idx, params=None, hook=None):
        base = np.clip(x[idx] + current(idx), 0, 1)
        if eps_a > 0:
            base = np.clip(base + _adversarial_sigma(obj, base, y[idx], params, eps_a, cfg.adv_steps,
                                                     adv_step, hook), 0, 1)
        return base

    converged = False
    rounds = 0
    for rounds in range(1, cfg.max_rounds + 1):
        # (a) model minimization on the currently perturbed data
        order = order_rng.permutation(n)
        for s in range(cfg.model_steps):
            start = (s * bs) % n
            idx = order[start:start + bs]
            params = obj.draw(len(idx))
            z = perturbed(idx, params)
            if params is not None:
                z = cg_forward(z, params)[0]
            logits, _ = forward(net, z.astype(net.dtype), record=True)
            _, g = cross_entropy(logits, y[idx])
            grads, _ = backward(net, g, need_input_grad=False)
            sgd_step(net, grads, opt, lrs)
        # (b) projected signed-gradient descent on delta
        order = order_rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            for _ in range(cfg.inner_steps):
                params = obj.draw(len(idx))
                base = np.clip(x[idx] + current(idx), 0, 1)
                z = base
                if eps_a > 0:
                    z = np.clip(base + _adversarial_sigma(obj, base, y[idx], params, eps_a, cfg.adv_steps,
                                                          adv_step, on_step), 0, 1)
                # d clip(x + delta)/d delta masks saturated pixels
                _, gz = obj(z, y[idx], params)
                g = gz * ((x[idx] + current(idx) > 0) & (x[idx] + current(idx) < 1))
                if samplewise:
                    delta[idx] = _project_delta(delta[idx] - step * np.sign(g), x[idx], eps, True)
                    if on_step is not None:
                        on_step("delta", delta[idx])
                else:
                    labs = y[idx]
                    for c in np.unique(labs):
                        gc = g[labs == c].mean(axis=0)
                        delta[c] = _project_delta(delta[c] - step * np.sign(gc), None, eps, False)
                    if on_step is not None:
                        on_step("delta", delta[np.unique(labs)])
        net.clear_state()
        z = np.clip(x + current(np.arange(n)), 0, 1)
        err = float(np.mean(predict(net, z.astype(net.dtype)) != y))
        if err < cfg.stop_error:
            converged = True
            break
    net.clear_state()
    if not converged:
        warnings.warn(NonConvergence(f"{family} generation stopped after {rounds} rounds without reaching "
                                     f"train error < {cfg.stop_error}"), stacklevel=3)
    return PerturbationSet(mode, family, eps, delta, keys, converged, rounds)


def gen_em(data: ImageDataset, net: Network, eps: float = EPS, mode: str = "sample",
           cfg: GenConfig | None = None, on_step: StepHook | None = None) -> PerturbationSet:
    """Error-minimizing noise by alternating model and perturbation minimization.

    ``net`` is trained in place as the surrogate. ``on_step(kind, values)`` is
    called after every projection with ``kind`` in {"delta", "sigma"}.
    """
    cfg = cfg or GenConfig()
    return _generate(data, net, eps, 0.0, mode, cfg, "EM", on_step)


def gen_rem(data: ImageDataset, net: Network, eps_u: float = EPS, eps_a: float = 4 / 255,
            cfg: GenConfig | None = None, mode: str = "sample", on_step: StepHook | None = None) -> PerturbationSet:
    """Robust error-minimizing noise: min over delta of max over sigma within ``eps_a``.

    With ``cfg.with_cg`` the colour-jitter/grayscale transform is sampled and
    applied inside the loss (the REM-T variant).
    """
    cfg = cfg or GenConfig()
    if eps_a > eps_u:
        raise ValueError(f"adversarial budget {eps_a} exceeds perturbation budget {eps_u}")
    return _generate(data, net, eps_u, eps_a, mode, cfg, "REM", on_step)


def gen_sp(image_shape, k: int, eps: float = EPS, seed: int = 0, grid: int = 8) -> PerturbationSet:
    """Class-wise random sign patterns on a ``grid x grid`` lattice, upsampled to the image."""
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    c, h, w = image_shape
    cells = c * grid * grid
    if k > 2 ** min(cells, 62):
        raise TooManyClasses(f"cannot draw {k} distinct sign patterns on {cells} cells")
    rng = np.random.default_rng([seed, 0x5B])
    seen = set()
    signs = []
    while len(signs) < k:
        s = rng.choice(np.array([-1.0, 1.0]), size=(c, grid, grid))
        key = s.tobytes()
        if key not in seen:
            seen.add(key)
            signs.append(s)
    ry = (np.arange(h) * grid) // h
    rx = (np.arange(w) * grid) // w
    deltas = np.stack([s[:, ry][:, :, rx] for s in signs]) * eps
    return PerturbationSet("class", "SP", eps, deltas, np.arange(k))


def gen_ops(image_shape, k: int, seed: int = 0, margin: int = 4) -> PerturbationSet:
    """One pixel per class at distinct positions, each channel pushed to 0 or 1.

    Positions are drawn from the interior (``margin`` pixels from the border)
    when it has room, so random crops rarely remove the pixel.
    """
    c, h, w = image_shape
    if k > h * w:
        raise TooManyClasses(f"{k} classes need distinct positions but the image has {h * w} pixels")
    rng = np.random.default_rng([seed, 0x095])
    inner_h, inner_w = h - 2 * margin, w - 2 * margin
    if margin > 0 and inner_h > 0 and inner_w > 0 and inner_h * inner_w >= k:
        ys, xs = np.mgrid[margin:h - margin, margin:w - margin]
    else:
        ys, xs = np.mgrid[0:h, 0:w]
    pos = rng.choice(ys.size, size=k, replace=False)
    deltas = np.zeros((k, c, h, w))
    for cls, p in enumerate(pos):
        colour = rng.choice(np.array([-1.0, 1.0]), size=c)
        deltas[cls, :, ys.flat[p], xs.flat[p]] = colour
    return PerturbationSet("class", "OPS", 1.0, deltas, np.arange(k))


def perturbed_indices(n: int, ratio: float, seed: int) -> np.ndarray:
    """Sorted indices of the ``round(ratio * n)`` samples that get perturbed."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    count = int(np.floor(ratio * n + 0.5))
    return np.sort(np.random.default_rng([seed, 0xA99]).permutation(n)[:count])


def apply_perturbations(data: ImageDataset, pset: PerturbationSet, ratio: float = 1.0, seed: int = 0) -> ImageDataset:
    if pset.image_shape != data.image_shape:
        raise ShapeMismatch(f"perturbation shape {pset.image_shape} does not match images {data.image_shape}")
    idx = perturbed_indices(len(data), ratio, seed)
    if len(idx) == 0:
        return data.with_images(data.images.copy())
    keys = idx if pset.mode == "sample" else data.labels[idx]
    images = data.images.copy()
    images[idx] = np.clip(images[idx].astype(np.float64) + pset.lookup(keys), 0, 1)
    return data.with_images(images)


# STPERT1 layout: magic, u8 mode, u8 family, f32 epsilon, u32 count,
# then per entry: u32 key, u32 rank, rank x u32 dims, float32 payload.

def _toward_zero_f32(a: np.ndarray) -> np.ndarray:
    """float32 cast that never increases magnitude, so budgets survive the round trip."""
    f = a.astype(np.float32)
    grew = np.abs(f.astype(np.float64)) > np.abs(a)
    if np.any(grew):
        f[grew] = np.nextafter(f[grew], np.float32(0))
    return f


def to_bytes(pset: PerturbationSet) -> bytes:
    out = [MAGIC, struct.pack("<BBfI", MODES.index(pset.mode), FAMILIES.index(pset.family),
                              pset.epsilon, len(pset))]
    for key, d in zip(pset.keys, pset.deltas):
        out.append(struct.pack("<II", int(key), d.ndim))
        out.append(struct.pack(f"<{d.ndim}I", *d.shape))
        out.append(_toward_zero_f32(np.asarray(d, dtype=np.float64)).astype("<f4").tobytes())
    return b"".join(out)


def from_bytes(data: bytes) -> PerturbationSet:
    if not data.startswith(MAGIC):
        raise CorruptPayload("missing STPERT1 header")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CorruptPayload("truncated STPERT1 payload")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    mode, family, eps, count = struct.unpack("<BBfI", take(10))
    if mode >= len(MODES) or family >= len(FAMILIES):
        raise CorruptPayload("unknown mode or family code")
    keys, deltas = [], []
    for _ in range(count):
        key, rank = struct.unpack("<II", take(8))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape))
        deltas.append(np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float64))
        keys.append(key)
    if pos != len(data):
        raise CorruptPayload("trailing bytes after STPERT1 payload")
    arr = np.stack(deltas) if deltas else np.zeros((0, 0, 0, 0))
    return PerturbationSet(MODES[mode], FAMILIES[family], float(eps), arr, np.array(keys, dtype=np.int64))


def save(pset: PerturbationSet, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(pset))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def load(path) -> PerturbationSet:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return from_bytes(raw)
