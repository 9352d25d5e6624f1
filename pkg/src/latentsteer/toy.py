"""Analytic toy models: a blockwise logistic decoder and a mean-color
embedder.

Everything here has a closed form, so optimizer behaviour (gradient
checks, convergence, masking) can be verified by hand.  The decoder
maps each latent cell's first three channels through a logistic to an
RGB block; the embedder maps an image to its mean color re-centered at
gray and normalized.  Text maps through a small color vocabulary the
same way, so "red" and an all-red image embed to the same direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .backend import Backend, BackendInfo
from .errors import BackendError, ContractError
from .vq import Codebook

_CLAMP_LO = 0.01
_CLAMP_HI = 0.99

COLOR_TABLE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}

_FALLBACK = np.array([1.0, 0.0, 0.0])  # direction for degenerate (gray) input


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def default_codebook(latent_dim: int = 4) -> Codebook:
    """One code per corner color: channels 0..2 are the logit of the
    clamped color, remaining channels zero."""
    if latent_dim < 3:
        raise ContractError("toy latent dim must be >= 3")
    rows = []
    for color in COLOR_TABLE.values():
        c = np.clip(np.array(color, dtype=np.float64), _CLAMP_LO, _CLAMP_HI)
        row = np.zeros(latent_dim)
        row[:3] = _logit(c)
        rows.append(row)
    return Codebook(np.stack(rows))


def embed_of_color(color) -> np.ndarray:
    """Unit embedding of a constant-color image (closed form)."""
    v = np.asarray(color, dtype=np.float64) - 0.5
    n = np.linalg.norm(v)
    if n == 0.0:
        return _FALLBACK.copy()
    return v / n


def _word_vector(word: str) -> np.ndarray:
    if word in COLOR_TABLE:
        return np.array(COLOR_TABLE[word], dtype=np.float64)
    # Unknown words get a fixed unit vector from a stable string hash.
    key = rng.string_key(word)
    g = rng.draw_normal(key, 0, np.arange(3, dtype=np.uint64))
    n = np.linalg.norm(g)
    if n == 0.0:
        return _FALLBACK.copy()
    return g / n


@dataclass(frozen=True)
class ToyConfig:
    image_hw: tuple[int, int] = (64, 64)
    latent_hw: tuple[int, int] = (8, 8)
    latent_dim: int = 4

    def __post_init__(self):
        H, W = self.image_hw
        h, w = self.latent_hw
        if h < 1 or w < 1 or self.latent_dim < 3:
            raise ContractError("invalid toy latent shape")
        if H % h != 0 or W % w != 0:
            raise ContractError(
                f"image {H}x{W} must divide into latent grid {h}x{w}")


class ToyBackend(Backend):
    """In-process backend over the analytic toy models."""

    def __init__(self, image_hw: tuple[int, int] = (64, 64),
                 latent_hw: tuple[int, int] = (8, 8), latent_dim: int = 4,
                 codebook: Codebook | None = None):
        self.config = ToyConfig(tuple(image_hw), tuple(latent_hw), latent_dim)
        self.codebook = codebook or default_codebook(latent_dim)
        if self.codebook.dim != latent_dim:
            raise ContractError("codebook dim must equal toy latent dim")

    # -- metadata ---------------------------------------------------------
    def info(self) -> BackendInfo:
        H, W = self.config.image_hw
        h, w = self.config.latent_hw
        return BackendInfo(
            name="toy", version="1", embed_dim=3,
            input_size=min(H, W), latent_h=h, latent_w=w,
            latent_dim=self.config.latent_dim, image_h=H, image_w=W,
            codebook=self.codebook)

    # -- shapes -----------------------------------------------------------
    def _blocks(self):
        H, W = self.config.image_hw
        h, w = self.config.latent_hw
        return H // h, W // w

    def _check_latent(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        h, w = self.config.latent_hw
        if z.shape != (h, w, self.config.latent_dim):
            raise BackendError(
                f"latent shape {z.shape} != {(h, w, self.config.latent_dim)}")
        return z

    def _check_image(self, image: np.ndarray, shape) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != shape:
            raise BackendError(f"image shape {image.shape} != {shape}")
        return image

    # -- decoder ----------------------------------------------------------
    def decode(self, z: np.ndarray) -> np.ndarray:
        """Each latent cell paints its pixel block with
        logistic(z[..., :3]); extra latent channels do not reach the
        image."""
        z = self._check_latent(z)
        bh, bw = self._blocks()
        rgb = _sigmoid(z[:, :, :3])
        return np.repeat(np.repeat(rgb, bh, axis=0), bw, axis=1)

    def decode_vjp(self, z: np.ndarray, grad_image: np.ndarray) -> np.ndarray:
        z = self._check_latent(z)
        H, W = self.config.image_hw
        grad_image = self._check_image(grad_image, (H, W, 3))
        bh, bw = self._blocks()
        h, w = self.config.latent_hw
        pooled = grad_image.reshape(h, bh, w, bw, 3).sum(axis=(1, 3))
        s = _sigmoid(z[:, :, :3])
        grad_z = np.zeros_like(z)
        grad_z[:, :, :3] = pooled * s * (1.0 - s)
        return grad_z

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Blockwise mean color through a clamped logit; extra latent
        channels are zero.  Inverse of decode for in-range latents."""
        H, W = self.config.image_hw
        image = self._check_image(image, (H, W, 3))
        bh, bw = self._blocks()
        h, w = self.config.latent_hw
        means = image.reshape(h, bh, w, bw, 3).mean(axis=(1, 3))
        z = np.zeros((h, w, self.config.latent_dim))
        z[:, :, :3] = _logit(np.clip(means, _CLAMP_LO, _CLAMP_HI))
        return z

    # -- embedder ---------------------------------------------------------
    def embed_text(self, text: str) -> np.ndarray:
        words = text.lower().split()
        if not words:
            raise BackendError("cannot embed empty text")
        mean = np.mean([_word_vector(w) for w in words], axis=0)
        v = mean - 0.5
        n = np.linalg.norm(v)
        if n == 0.0:
            return _FALLBACK.copy()
        return v / n

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise BackendError(f"image shape {image.shape} is not (H, W, 3)")
        v = image.mean(axis=(0, 1)) - 0.5
        n = np.linalg.norm(v)
        if n == 0.0:
            return _FALLBACK.copy()
        return v / n

    def embed_image_vjp(self, image: np.ndarray,
                        grad_embedding: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise BackendError(f"image shape {image.shape} is not (H, W, 3)")
        grad_embedding = np.asarray(grad_embedding, dtype=np.float64)
        v = image.mean(axis=(0, 1)) - 0.5
        n = np.linalg.norm(v)
        grad = np.zeros_like(image)
        if n == 0.0:
            # The gray fallback is constant, nothing propagates.
            return grad
        u = v / n
        tangent = (grad_embedding - np.dot(grad_embedding, u) * u) / n
        npix = image.shape[0] * image.shape[1]
        grad[:, :, :] = tangent[None, None, :] / npix
        return grad
