"""Zero-shot phrase-to-region masking.

An overlapping grid of square crops is scored by the dot product of
each crop's image embedding with the phrase embedding.  Scores are
splatted bilinearly at each crop center with hit-count averaging,
min-max normalized, filled outward at uncovered borders, and finally
thresholded at mean + k_sigma * std.  The pixel mask area-averages down
to the latent grid, where zero cells freeze the latent during edits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .augment import bilinear_resize
from .backend import Backend, check_unit_embedding
from .errors import BackendError, ContractError
from .loss import GuidanceTarget

DEFAULT_K_SIGMA = -2.0  # keep everything above two-below-the-mean


@dataclass(frozen=True)
class ScoreMap:
    """Splatted crop scores before normalization."""

    weighted: np.ndarray  # (H, W) sum of score * splat weight
    hits: np.ndarray      # (H, W) sum of splat weights
    crops: list = field(default_factory=list)  # (top, left, side, score)

    def peak_crop(self):
        return max(self.crops, key=lambda c: c[3])


@dataclass(frozen=True)
class EditSpec:
    """How to derive an edit mask and targets from a phrase."""

    phrase: str
    k_sigma: float = DEFAULT_K_SIGMA
    side: int | None = None
    stride: int | None = None
    struct_weight: float = 0.5


def default_grid(image_hw: tuple[int, int]) -> tuple[int, int]:
    """Default crop side and stride for an image size.

    An eighth of the short side keeps the hot region tight around small
    objects; halving it for the stride gives 2x overlap in each axis.
    """
    side = max(4, min(image_hw) // 8)
    return side, max(1, side // 2)


def score_grid(image: np.ndarray, phrase: str, backend: Backend,
               side: int | None = None, stride: int | None = None) -> ScoreMap:
    """Score an overlapping crop grid against a phrase."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"image shape {image.shape} is not (H, W, 3)")
    h, w = image.shape[:2]
    d_side, d_stride = default_grid((h, w))
    side = d_side if side is None else int(side)
    stride = d_stride if stride is None else int(stride)
    if side < 1 or side > min(h, w) or stride < 1:
        raise ContractError(f"bad crop grid: side={side} stride={stride}")

    res = backend.info().input_size
    text_e = check_unit_embedding(backend.embed_text(phrase), "text embedding")

    weighted = np.zeros((h, w))
    hits = np.zeros((h, w))
    crops = []
    for top in range(0, h - side + 1, stride):
        for left in range(0, w - side + 1, stride):
            crop = image[top:top + side, left:left + side]
            try:
                emb = backend.embed_image(bilinear_resize(crop, res, res))
                emb = check_unit_embedding(emb, "crop embedding")
            except Exception as exc:
                raise BackendError(
                    f"embedding failed for crop at (top={top}, left={left}, "
                    f"side={side}): {exc}") from exc
            score = float(np.dot(emb, text_e))
            crops.append((top, left, side, score))
            _splat(weighted, hits, top + (side - 1) / 2.0,
                   left + (side - 1) / 2.0, score)
    return ScoreMap(weighted=weighted, hits=hits, crops=crops)


def _splat(weighted, hits, cy, cx, value):
    h, w = weighted.shape
    y0 = int(np.clip(np.floor(cy), 0, h - 1))
    x0 = int(np.clip(np.floor(cx), 0, w - 1))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = cy - y0, cx - x0
    for yy, wy in ((y0, 1 - fy), (y1, fy)):
        for xx, wx in ((x0, 1 - fx), (x1, fx)):
            wgt = wy * wx
            if wgt > 0.0:
                weighted[yy, xx] += wgt * value
                hits[yy, xx] += wgt


def normalize_scores(scores: ScoreMap) -> np.ndarray:
    """Hit-averaged scores, border-filled and min-max scaled to [0, 1].

    Pixels no splat reached copy their nearest covered pixel; an
    all-equal map normalizes to all zeros.
    """
    covered = scores.hits > 0.0
    if not covered.any():
        raise ContractError("score map has no coverage")
    values = np.zeros_like(scores.weighted)
    values[covered] = scores.weighted[covered] / scores.hits[covered]
    if not covered.all():
        _, (iy, ix) = ndimage.distance_transform_edt(
            ~covered, return_indices=True)
        values = values[iy, ix]
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def threshold_mask(values: np.ndarray, k_sigma: float = DEFAULT_K_SIGMA) -> np.ndarray:
    """Binary mask of pixels scoring >= mean + k_sigma * std."""
    values = np.asarray(values, dtype=np.float64)
    mu = float(values.mean())
    sigma = float(values.std())  # population std
    return (values >= mu + k_sigma * sigma).astype(np.float64)


def _axis_overlap(n_pixels: int, n_cells: int) -> np.ndarray:
    """(n_cells, n_pixels) fractional overlap of cells with pixel rows."""
    weights = np.zeros((n_cells, n_pixels))
    cell = n_pixels / n_cells
    for i in range(n_cells):
        lo, hi = i * cell, (i + 1) * cell
        for p in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_pixels)):
            weights[i, p] = min(hi, p + 1) - max(lo, p)
    return weights


def pixel_mask_to_latent(mask: np.ndarray, latent_hw: tuple[int, int]) -> np.ndarray:
    """Area-average a pixel mask onto the latent grid, binarized at 0.5."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ContractError("pixel mask must be 2-d")
    h, w = latent_hw
    if mask.shape[0] < h or mask.shape[1] < w:
        raise ContractError("pixel mask smaller than latent grid")
    wy = _axis_overlap(mask.shape[0], h)
    wx = _axis_overlap(mask.shape[1], w)
    cell_area = (mask.shape[0] / h) * (mask.shape[1] / w)
    means = wy @ mask @ wx.T / cell_area
    return (means >= 0.5).astype(np.float64)


def build_edit_targets(backend: Backend, phrase: str, source_image: np.ndarray,
                       struct_weight: float = 0.5) -> list[GuidanceTarget]:
    """Guidance targets for a masked edit: the phrase, plus the source
    image itself so unmasked structure is preserved."""
    res = backend.info().input_size
    text_e = check_unit_embedding(backend.embed_text(phrase), "text embedding")
    targets = [GuidanceTarget(embedding=text_e, weight=1.0, label=phrase)]
    if struct_weight != 0.0:
        src = bilinear_resize(np.asarray(source_image, dtype=np.float64), res, res)
        img_e = check_unit_embedding(backend.embed_image(src), "image embedding")
        targets.append(GuidanceTarget(
            embedding=img_e, weight=struct_weight, label="image-structure"))
    return targets


def selfmask_for_image(backend: Backend, image: np.ndarray, spec: EditSpec,
                       latent_hw: tuple[int, int]):
    """Full phrase-to-mask path: returns (latent_mask, pixel_mask, normalized)."""
    smap = score_grid(image, spec.phrase, backend, side=spec.side,
                      stride=spec.stride)
    normalized = normalize_scores(smap)
    pixel_mask = threshold_mask(normalized, spec.k_sigma)
    latent_mask = pixel_mask_to_latent(pixel_mask, latent_hw)
    return latent_mask, pixel_mask, normalized
