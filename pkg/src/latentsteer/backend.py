"""Contract between the optimizer and a model backend.

A backend supplies the differentiable image model (latent decode and
its adjoint, image encode) and the joint text-image embedder (text and
image embeddings plus the image-side adjoint).  The optimizer never
sees model internals; everything it needs is in ``BackendInfo`` and the
six methods below.  Backends may live in-process (the toy models) or
out of process behind the wire protocol; both present this interface
and must be interchangeable.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .vq import Codebook


@dataclass(frozen=True)
class BackendInfo:
    """Static metadata a backend reports once at attach time."""

    name: str
    version: str
    embed_dim: int        # D, joint embedding dimension
    input_size: int       # R, square resolution the embedder expects
    latent_h: int
    latent_w: int
    latent_dim: int       # channels per latent cell
    image_h: int
    image_w: int
    codebook: Codebook

    def __post_init__(self):
        if min(self.embed_dim, self.input_size, self.latent_h, self.latent_w,
               self.latent_dim, self.image_h, self.image_w) < 1:
            raise ContractError("backend metadata dimensions must be >= 1")
        if self.codebook.dim != self.latent_dim:
            raise ContractError("codebook dim does not match latent dim")


class Backend(abc.ABC):
    """Abstract model backend.

    Shape conventions: images are (H, W, 3) float64 in [0, 1] (embedder
    inputs are (R, R, 3) and may exceed that range after augmentation);
    latents are (h, w, d) float64; embeddings are (D,) and unit norm
    within 1e-5 (callers re-normalize).
    """

    @abc.abstractmethod
    def info(self) -> BackendInfo: ...

    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_image_vjp(self, image: np.ndarray,
                        grad_embedding: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def decode(self, z: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def decode_vjp(self, z: np.ndarray,
                   grad_image: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def close(self) -> None:
        """Release any transport resources (no-op for in-process)."""


def check_unit_embedding(e: np.ndarray, what: str = "embedding") -> np.ndarray:
    """Assert near-unit norm, then re-normalize exactly."""
    e = np.asarray(e, dtype=np.float64)
    n = float(np.linalg.norm(e))
    if not np.isfinite(n) or abs(n - 1.0) > 1e-5:
        raise ContractError(f"{what} norm {n} is not within 1e-5 of 1")
    return e / n


def attach(selector: str, image_size: tuple[int, int] | None = None) -> Backend:
    """Resolve a backend selector string.

    ``toy``           in-process analytic toy backend
    ``socket:<path>`` wire protocol over a unix stream socket
    """
    if selector == "toy":
        from .toy import ToyBackend
        if image_size is None:
            return ToyBackend()
        return ToyBackend(image_hw=image_size)
    if selector.startswith("socket:"):
        from .wire import WireBackend
        return WireBackend.connect_unix(selector[len("socket:"):])
    raise ContractError(f"unknown backend selector '{selector}'")
