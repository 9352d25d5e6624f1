"""Randomized differentiable view chains.

Each optimization step evaluates the embedder on several augmented
views of the decoded image: a random square crop bilinearly resized to
the embedder's input resolution, then optional flip, affine warp,
perspective warp, color jitter, and additive Gaussian noise.  Averaging
the guidance loss over the views suppresses adversarial single-view
gradients.

Chains are sampled from the counter-based stream and stored as explicit
parameters, so a chain can be replayed exactly.  Every stage is affine
in the image; ``apply_chain_vjp`` is the exact adjoint of the linear
part, verified by dot tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ContractError

STAGE_NAMES = ("flip", "affine", "perspective", "color_jitter", "noise")

# Fixed draw lanes per chain, so toggling one stage never shifts the
# draws of another.
_SLOTS = 24
_SLOT_FRAC, _SLOT_TOP, _SLOT_LEFT, _SLOT_FLIP = 0, 1, 2, 3
_SLOT_ROT, _SLOT_TX, _SLOT_TY, _SLOT_SCALE = 4, 5, 6, 7
_SLOT_PERSP_GATE, _SLOT_PERSP0 = 8, 9          # 9..16: corner offsets
_SLOT_BRIGHT, _SLOT_CONTRAST, _SLOT_NOISE = 17, 18, 19

_ID_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
_ID_PERSPECTIVE = np.eye(3)


@dataclass(frozen=True)
class AugmentationConfig:
    cuts: int = 32
    resolution: int = 64
    crop_frac: tuple[float, float] = (0.25, 1.0)
    flip: bool = True
    affine: bool = True
    perspective: bool = True
    color_jitter: bool = True
    noise: bool = True
    max_rotate_deg: float = 15.0
    max_translate: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    perspective_distortion: float = 0.2
    perspective_prob: float = 0.7
    brightness: float = 0.1
    contrast_range: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.cuts < 1:
            raise ContractError("cuts must be >= 1")
        if self.resolution < 1:
            raise ContractError("resolution must be >= 1")
        lo, hi = self.crop_frac
        if not (0.0 < lo <= hi <= 1.0):
            raise ContractError("crop_frac must satisfy 0 < lo <= hi <= 1")
        if self.scale_range[0] <= 0.0 or self.scale_range[0] > self.scale_range[1]:
            raise ContractError("invalid scale range")
        if self.contrast_range[0] < 0.0 or self.contrast_range[0] > self.contrast_range[1]:
            raise ContractError("invalid contrast range")
        if not (0.0 <= self.perspective_prob <= 1.0):
            raise ContractError("perspective_prob must lie in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ContractError("noise_sigma must be >= 0")

    def disable(self, names) -> "AugmentationConfig":
        """Copy with the named stages turned off."""
        updates = {}
        for name in names:
            if name not in STAGE_NAMES:
                raise ContractError(f"unknown augmentation stage '{name}'")
            updates[name] = False
        return AugmentationConfig(**{**self.__dict__, **updates})


@dataclass(frozen=True)
class AugChain:
    """Replayable parameters of one sampled view."""

    crop_top: int
    crop_left: int
    crop_side: int
    flip: bool
    affine: np.ndarray       # 2x3 output->source map, centered coords
    perspective: np.ndarray  # 3x3 output->source homography, pixel coords
    brightness: float
    contrast: float
    noise_key: int | None    # seed for the noise field, None when disabled


# ---------------------------------------------------------------------------
# bilinear sampling primitives

def _taps(ys, xs, h, w):
    """Clamped bilinear tap indices and weights for fractional coords.

    Out-of-range coordinates clamp to the edge: the floor clip plus the
    [0, 1] fraction clip together reproduce sampling at the clamped
    coordinate exactly.
    """
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    weights = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    return corners, weights


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) image at fractional coords; edges clamp."""
    h, w = image.shape[:2]
    corners, weights = _taps(ys, xs, h, w)
    out = np.zeros(ys.shape + (image.shape[2],))
    for (cy, cx), wt in zip(corners, weights):
        out += wt[..., None] * image[cy, cx]
    return out


def bilinear_scatter(cotangent: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     h: int, w: int) -> np.ndarray:
    """Exact adjoint of ``bilinear_sample`` onto an (h, w, C) grid."""
    channels = cotangent.shape[-1]
    corners, weights = _taps(ys, xs, h, w)
    flat_cot = cotangent.reshape(-1, channels)
    grad = np.zeros((h * w, channels))
    for (cy, cx), wt in zip(corners, weights):
        idx = (cy * w + cx).ravel()
        wflat = wt.ravel()
        for c in range(channels):
            grad[:, c] += np.bincount(idx, weights=wflat * flat_cot[:, c],
                                      minlength=h * w)
    return grad.reshape(h, w, channels)


def _resize_coords(src_len: int, out_len: int) -> np.ndarray:
    return (np.arange(out_len) + 0.5) * (src_len / out_len) - 0.5


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with pixel-center alignment and clamped edges."""
    image = np.asarray(image, dtype=np.float64)
    ys = _resize_coords(image.shape[0], out_h)[:, None] * np.ones((1, out_w))
    xs = np.ones((out_h, 1)) * _resize_coords(image.shape[1], out_w)[None, :]
    return bilinear_sample(image, ys, xs)


# ---------------------------------------------------------------------------
# chain sampling

def _solve_homography(from_pts: np.ndarray, to_pts: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping each from_pt to its to_pt (four pairs)."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k in range(4):
        x, y = from_pts[k]
        xt, yt = to_pts[k]
        a[2 * k] = [x, y, 1, 0, 0, 0, -xt * x, -xt * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -yt * x, -yt * y]
        b[2 * k] = xt
        b[2 * k + 1] = yt
    h = np.linalg.solve(a, b)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def sample_crop_batch(stream: rng.DeterministicStream, iteration: int,
                      image_hw: tuple[int, int],
                      config: AugmentationConfig) -> list[AugChain]:
    """Sample ``config.cuts`` independent chains for one iteration."""
    h, w = image_hw
    short = min(h, w)
    res = config.resolution
    # One vectorized draw for every (chain, slot) counter; the counter
    # RNG is stateless, so unused slots cost nothing but the draw.
    lane_grid = (np.arange(config.cuts, dtype=np.uint64)[:, None]
                 * np.uint64(_SLOTS)
                 + np.arange(_SLOTS, dtype=np.uint64)[None, :])
    uniforms = stream.uniform(iteration, lane_grid)
    raw_noise = stream.raw(iteration, lane_grid[:, _SLOT_NOISE])
    chains = []
    for c in range(config.cuts):
        def u(slot: int) -> float:
            return float(uniforms[c, slot])

        lo, hi = config.crop_frac
        frac = lo + u(_SLOT_FRAC) * (hi - lo)
        side = int(np.clip(round(frac * short), 1, short))
        top = min(int(u(_SLOT_TOP) * (h - side + 1)), h - side)
        left = min(int(u(_SLOT_LEFT) * (w - side + 1)), w - side)

        flip = config.flip and u(_SLOT_FLIP) < 0.5

        affine = _ID_AFFINE
        if config.affine:
            theta = np.deg2rad((2 * u(_SLOT_ROT) - 1) * config.max_rotate_deg)
            tx = (2 * u(_SLOT_TX) - 1) * config.max_translate * res
            ty = (2 * u(_SLOT_TY) - 1) * config.max_translate * res
            smin, smax = config.scale_range
            s = smin + u(_SLOT_SCALE) * (smax - smin)
            # forward map: rotate by theta, scale by s, translate by t;
            # store the inverse for output->source sampling.
            cos_t, sin_t = np.cos(theta) / s, np.sin(theta) / s
            lin = np.array([[cos_t, sin_t], [-sin_t, cos_t]])
            offset = -lin @ np.array([tx, ty])
            affine = np.hstack([lin, offset[:, None]])

        perspective = _ID_PERSPECTIVE
        if config.perspective and u(_SLOT_PERSP_GATE) < config.perspective_prob:
            reach = config.perspective_distortion * (res - 1) / 2.0
            d = np.array([u(_SLOT_PERSP0 + k) for k in range(8)]) * reach
            corners = np.array([[0, 0], [res - 1, 0],
                                [res - 1, res - 1], [0, res - 1]], dtype=np.float64)
            inward = np.array([[d[0], d[1]], [-d[2], d[3]],
                               [-d[4], -d[5]], [d[6], -d[7]]])
            perspective = _solve_homography(corners, corners + inward)

        brightness, contrast = 0.0, 1.0
        if config.color_jitter:
            brightness = (2 * u(_SLOT_BRIGHT) - 1) * config.brightness
            cmin, cmax = config.contrast_range
            contrast = cmin + u(_SLOT_CONTRAST) * (cmax - cmin)

        noise_key = None
        if config.noise and config.noise_sigma > 0.0:
            noise_key = int(raw_noise[c])

        chains.append(AugChain(
            crop_top=top, crop_left=left, crop_side=side, flip=flip,
            affine=affine, perspective=perspective,
            brightness=brightness, contrast=contrast, noise_key=noise_key))
    return chains


# ---------------------------------------------------------------------------
# applying and differentiating a chain

def _crop_coords(chain: AugChain, res: int):
    scale = chain.crop_side / res
    ys = chain.crop_top + (np.arange(res) + 0.5) * scale - 0.5
    xs = chain.crop_left + (np.arange(res) + 0.5) * scale - 0.5
    # clamp to the crop rectangle so the view never reads outside it
    ys = np.clip(ys, chain.crop_top, chain.crop_top + chain.crop_side - 1)
    xs = np.clip(xs, chain.crop_left, chain.crop_left + chain.crop_side - 1)
    grid_y = ys[:, None] * np.ones((1, res))
    grid_x = np.ones((res, 1)) * xs[None, :]
    return grid_y, grid_x


def _affine_coords(matrix: np.ndarray, res: int):
    center = (res - 1) / 2.0
    coords = np.arange(res, dtype=np.float64) - center
    gx = np.ones((res, 1)) * coords[None, :]
    gy = coords[:, None] * np.ones((1, res))
    sx = matrix[0, 0] * gx + matrix[0, 1] * gy + matrix[0, 2] + center
    sy = matrix[1, 0] * gx + matrix[1, 1] * gy + matrix[1, 2] + center
    return sy, sx


def _perspective_coords(matrix: np.ndarray, res: int):
    coords = np.arange(res, dtype=np.float64)
    gx = np.ones((res, 1)) * coords[None, :]
    gy = coords[:, None] * np.ones((1, res))
    denom = matrix[2, 0] * gx + matrix[2, 1] * gy + matrix[2, 2]
    sx = (matrix[0, 0] * gx + matrix[0, 1] * gy + matrix[0, 2]) / denom
    sy = (matrix[1, 0] * gx + matrix[1, 1] * gy + matrix[1, 2]) / denom
    return sy, sx


def _noise_field(noise_key: int, res: int, sigma: float) -> np.ndarray:
    lanes = np.arange(res * res * 3, dtype=np.uint64)
    field = rng.draw_normal(noise_key, 0, lanes).reshape(res, res, 3)
    return sigma * field


def apply_chain(image: np.ndarray, chain: AugChain,
                config: AugmentationConfig) -> np.ndarray:
    """Render one augmented view of ``image`` at config.resolution."""
    image = np.asarray(image, dtype=np.float64)
    res = config.resolution
    out = bilinear_sample(image, *_crop_coords(chain, res))
    if chain.flip:
        out = out[:, ::-1, :]
    if not np.array_equal(chain.affine, _ID_AFFINE):
        out = bilinear_sample(out, *_affine_coords(chain.affine, res))
    if not np.array_equal(chain.perspective, _ID_PERSPECTIVE):
        out = bilinear_sample(out, *_perspective_coords(chain.perspective, res))
    if chain.contrast != 1.0 or chain.brightness != 0.0:
        out = out * chain.contrast + chain.brightness
    if chain.noise_key is not None:
        out = out + _noise_field(chain.noise_key, res, config.noise_sigma)
    return out


def apply_chain_vjp(cotangent: np.ndarray, chain: AugChain,
                    image_hw: tuple[int, int],
                    config: AugmentationConfig) -> np.ndarray:
    """Adjoint of the linear part of ``apply_chain``.

    The chain is affine in the image (noise and brightness are
    constants), so the adjoint needs only the chain parameters, not the
    image values.
    """
    res = config.resolution
    grad = np.asarray(cotangent, dtype=np.float64)
    if grad.shape != (res, res, 3):
        raise ContractError(f"cotangent shape {grad.shape} != {(res, res, 3)}")
    if chain.contrast != 1.0 or chain.brightness != 0.0:
        grad = grad * chain.contrast
    if not np.array_equal(chain.perspective, _ID_PERSPECTIVE):
        sy, sx = _perspective_coords(chain.perspective, res)
        grad = bilinear_scatter(grad, sy, sx, res, res)
    if not np.array_equal(chain.affine, _ID_AFFINE):
        sy, sx = _affine_coords(chain.affine, res)
        grad = bilinear_scatter(grad, sy, sx, res, res)
    if chain.flip:
        grad = grad[:, ::-1, :]
    gy, gx = _crop_coords(chain, res)
    return bilinear_scatter(grad, gy, gx, image_hw[0], image_hw[1])


# ---------------------------------------------------------------------------
# batched evaluation: all chains of one iteration through each stage as
# single array operations.  Per-element arithmetic is identical to the
# per-chain functions above (resampling at exactly-integral coordinates
# is an exact identity), so the two paths agree bit for bit.

def _batch_sample(images: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Per-view bilinear gather.

    ``images`` is either one shared (H, W, C) source or per-view
    (V, H, W, C) sources; ``ys``/``xs`` are (V, R, R).
    """
    h, w = images.shape[-3:-1]
    channels = images.shape[-1]
    corners, weights = _taps(ys, xs, h, w)
    flat = images.reshape(-1, channels)
    if images.ndim == 3:
        offset = np.int64(0)
    else:
        offset = (np.arange(images.shape[0], dtype=np.int64)
                  * (h * w))[:, None, None]
    out = np.zeros(ys.shape + (channels,))
    for (cy, cx), wt in zip(corners, weights):
        idx = (offset + cy * w + cx).reshape(-1)
        out += wt[..., None] * flat.take(idx, axis=0).reshape(out.shape)
    return out


def _batch_scatter(cotangent: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                   h: int, w: int) -> np.ndarray:
    """Adjoint of ``_batch_sample`` onto per-view (V, h, w, C) grids."""
    views = cotangent.shape[0]
    channels = cotangent.shape[-1]
    corners, weights = _taps(ys, xs, h, w)
    offsets = (np.arange(views, dtype=np.int64) * (h * w))[:, None, None]
    flat_cot = cotangent.reshape(-1, channels)
    grad = np.zeros((views * h * w, channels))
    for (cy, cx), wt in zip(corners, weights):
        idx = (offsets + cy * w + cx).ravel()
        wflat = wt.ravel()
        for c in range(channels):
            grad[:, c] += np.bincount(idx, weights=wflat * flat_cot[:, c],
                                      minlength=views * h * w)
    return grad.reshape(views, h, w, channels)


def _batch_crop_coords(chains: list[AugChain], res: int):
    tops = np.array([c.crop_top for c in chains], dtype=np.float64)
    lefts = np.array([c.crop_left for c in chains], dtype=np.float64)
    sides = np.array([c.crop_side for c in chains], dtype=np.float64)
    scale = sides / res
    steps = np.arange(res, dtype=np.float64) + 0.5
    ys = tops[:, None] + steps[None, :] * scale[:, None] - 0.5
    xs = lefts[:, None] + steps[None, :] * scale[:, None] - 0.5
    ys = np.clip(ys, tops[:, None], (tops + sides - 1)[:, None])
    xs = np.clip(xs, lefts[:, None], (lefts + sides - 1)[:, None])
    grid_y = ys[:, :, None] * np.ones((1, 1, res))
    grid_x = np.ones((1, res, 1)) * xs[:, None, :]
    return grid_y, grid_x


def _batch_affine_coords(matrices: np.ndarray, res: int):
    center = (res - 1) / 2.0
    coords = np.arange(res, dtype=np.float64) - center
    gx = (np.ones((res, 1)) * coords[None, :])[None]
    gy = (coords[:, None] * np.ones((1, res)))[None]

    def m(r, c):
        return matrices[:, r, c][:, None, None]

    sx = m(0, 0) * gx + m(0, 1) * gy + m(0, 2) + center
    sy = m(1, 0) * gx + m(1, 1) * gy + m(1, 2) + center
    return sy, sx


def _batch_perspective_coords(matrices: np.ndarray, res: int):
    coords = np.arange(res, dtype=np.float64)
    gx = (np.ones((res, 1)) * coords[None, :])[None]
    gy = (coords[:, None] * np.ones((1, res)))[None]

    def m(r, c):
        return matrices[:, r, c][:, None, None]

    denom = m(2, 0) * gx + m(2, 1) * gy + m(2, 2)
    sx = (m(0, 0) * gx + m(0, 1) * gy + m(0, 2)) / denom
    sy = (m(1, 0) * gx + m(1, 1) * gy + m(1, 2)) / denom
    return sy, sx


def _noise_fields(keys: list[int], res: int, sigma: float) -> np.ndarray:
    seeds = np.array(keys, dtype=np.uint64)[:, None]
    lanes = np.arange(res * res * 3, dtype=np.uint64)[None, :]
    fields = rng.draw_normal(seeds, 0, lanes).reshape(-1, res, res, 3)
    return sigma * fields


def _batch_flags(chains: list[AugChain]):
    flips = np.array([c.flip for c in chains], dtype=bool)
    affines = np.stack([c.affine for c in chains])
    persps = np.stack([c.perspective for c in chains])
    do_affine = any(not np.array_equal(c.affine, _ID_AFFINE) for c in chains)
    do_persp = any(not np.array_equal(c.perspective, _ID_PERSPECTIVE)
                   for c in chains)
    do_jitter = any(c.contrast != 1.0 or c.brightness != 0.0 for c in chains)
    noise_keys = [c.noise_key for c in chains]
    do_noise = any(k is not None for k in noise_keys)
    if do_noise and not all(k is not None for k in noise_keys):
        raise ContractError("chains mix noise-on and noise-off views")
    return flips, affines, persps, do_affine, do_persp, do_jitter, do_noise


def apply_chain_batch(image: np.ndarray, chains: list[AugChain],
                      config: AugmentationConfig) -> np.ndarray:
    """All views of one iteration at once: (V, R, R, 3).

    Bit-identical to stacking ``apply_chain`` over ``chains``.
    """
    image = np.asarray(image, dtype=np.float64)
    res = config.resolution
    (flips, affines, persps,
     do_affine, do_persp, do_jitter, do_noise) = _batch_flags(chains)
    out = _batch_sample(image, *_batch_crop_coords(chains, res))
    if flips.any():
        out[flips] = out[flips, :, ::-1, :]
    if do_affine:
        out = _batch_sample(out, *_batch_affine_coords(affines, res))
    if do_persp:
        out = _batch_sample(out, *_batch_perspective_coords(persps, res))
    if do_jitter:
        contrast = np.array([c.contrast for c in chains])[:, None, None, None]
        bright = np.array([c.brightness for c in chains])[:, None, None, None]
        out = out * contrast + bright
    if do_noise:
        out = out + _noise_fields([c.noise_key for c in chains], res,
                                  config.noise_sigma)
    return out


def apply_chain_batch_vjp(cotangents: np.ndarray, chains: list[AugChain],
                          image_hw: tuple[int, int],
                          config: AugmentationConfig) -> np.ndarray:
    """Per-view adjoints, (V, H, W, 3); row v equals ``apply_chain_vjp``
    of cotangent v through chain v."""
    res = config.resolution
    grad = np.asarray(cotangents, dtype=np.float64)
    if grad.shape != (len(chains), res, res, 3):
        raise ContractError(
            f"cotangent shape {grad.shape} != {(len(chains), res, res, 3)}")
    (flips, affines, persps,
     do_affine, do_persp, do_jitter, _) = _batch_flags(chains)
    if do_jitter:
        contrast = np.array([c.contrast for c in chains])[:, None, None, None]
        grad = grad * contrast
    if do_persp:
        sy, sx = _batch_perspective_coords(persps, res)
        grad = _batch_scatter(grad, sy, sx, res, res)
    if do_affine:
        sy, sx = _batch_affine_coords(affines, res)
        grad = _batch_scatter(grad, sy, sx, res, res)
    if flips.any():
        grad = np.ascontiguousarray(grad)
        grad[flips] = grad[flips, :, ::-1, :]
    gy, gx = _batch_crop_coords(chains, res)
    return _batch_scatter(grad, gy, gx, image_hw[0], image_hw[1])
