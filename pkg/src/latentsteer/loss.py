"""Guidance loss on the unit sphere of joint text-image embeddings.

The per-pair loss is the squared geodesic half-chord distance

    dist(u, v) = 2 * arcsin(min(1, ||u - v|| / 2)) ** 2

which is 0 at u == v and pi^2 / 2 at antipodes.  A run is guided by a
set of weighted targets; the aggregate averages the per-crop distances
to each target and combines targets by signed weight, normalized by the
sum of absolute weights so negative (repulsion) weights are allowed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateWeightsError

# Keep arcsin away from its endpoint singularity when differentiating.
_ARG_CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class PromptSpec:
    """A text prompt with a signed guidance weight."""

    text: str
    weight: float = 1.0

    def __post_init__(self):
        if not self.text.strip():
            raise ContractError("prompt text must be non-empty")
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True)
class GuidanceTarget:
    """A unit embedding to steer toward (w > 0) or away from (w < 0)."""

    embedding: np.ndarray
    weight: float = 1.0
    label: str = ""

    def __post_init__(self):
        e = np.asarray(self.embedding, dtype=np.float64)
        if e.ndim != 1:
            raise ContractError("target embedding must be a 1-d vector")
        n = float(np.linalg.norm(e))
        if not np.isfinite(n) or n == 0.0:
            raise ContractError("target embedding must be finite and nonzero")
        object.__setattr__(self, "embedding", e / n)
        object.__setattr__(self, "weight", float(self.weight))


def unit(vec: np.ndarray) -> np.ndarray:
    """Normalize the last axis to unit length."""
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ContractError("cannot normalize a zero vector")
    return vec / norm


def unit_vjp(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Adjoint of ``unit`` at pre-normalization input ``raw``."""
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    u = raw / norm
    inner = np.sum(grad_unit * u, axis=-1, keepdims=True)
    return (grad_unit - inner * u) / norm


def spherical_sq_dist(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Squared spherical distance between unit vectors, broadcast on
    leading axes."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    half_chord = 0.5 * np.linalg.norm(u - v, axis=-1)
    ang = np.arcsin(np.minimum(1.0, half_chord))
    return 2.0 * ang * ang


def spherical_sq_dist_grad(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gradient of ``spherical_sq_dist`` with respect to ``u``.

    Exactly zero at u == v (the distance has a smooth minimum there);
    near u == -v the arcsin argument is clamped to keep the gradient
    finite.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    diff = u - v
    half_chord = 0.5 * np.linalg.norm(diff, axis=-1, keepdims=True)
    c = np.minimum(_ARG_CLAMP, half_chord)
    ang = np.arcsin(c)
    # d/du [2 * arcsin(c)^2] = ang / (c * sqrt(1 - c^2)) * (u - v);
    # ang / c -> 1 as c -> 0, so substitute 1 there to keep it exact.
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(c > 0.0, ang / np.where(c > 0.0, c, 1.0), 1.0)
    scale = scale / np.sqrt(1.0 - c * c)
    return scale * diff


def aggregate_loss(crop_embeddings: np.ndarray,
                   targets: list[GuidanceTarget]) -> float:
    """Weighted multi-target guidance loss over a batch of crop embeddings.

    crop_embeddings: (C, D) unit rows.  Returns
    (1 / sum |w_p|) * sum_p w_p * mean_c dist(u_c, e_p).
    """
    u, weights, embeds, wsum = _check_aggregate_args(crop_embeddings, targets)
    per_target = np.array([
        float(np.mean(spherical_sq_dist(u, e[None, :]))) for e in embeds
    ])
    return float(np.dot(weights, per_target) / wsum)


def aggregate_loss_grad(crop_embeddings: np.ndarray,
                        targets: list[GuidanceTarget]) -> np.ndarray:
    """Gradient of ``aggregate_loss`` w.r.t. every crop embedding, (C, D)."""
    u, weights, embeds, wsum = _check_aggregate_args(crop_embeddings, targets)
    n_crops = u.shape[0]
    grad = np.zeros_like(u)
    for w, e in zip(weights, embeds):
        grad += (w / (wsum * n_crops)) * spherical_sq_dist_grad(u, e[None, :])
    return grad


def _check_aggregate_args(crop_embeddings, targets):
    u = np.asarray(crop_embeddings, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ContractError("crop embeddings must be a non-empty (C, D) array")
    if not targets:
        raise ContractError("at least one guidance target is required")
    weights = np.array([t.weight for t in targets], dtype=np.float64)
    wsum = float(np.sum(np.abs(weights)))
    if wsum == 0.0:
        raise DegenerateWeightsError("all target weights are zero")
    embeds = [t.embedding for t in targets]
    if any(e.shape != (u.shape[1],) for e in embeds):
        raise ContractError("target dimension does not match crop embeddings")
    return u, weights, embeds, wsum


def regularized_loss(guidance: float, z: np.ndarray, alpha: float) -> float:
    """guidance + alpha * mean(z^2); pulls unused latent mass to zero."""
    if alpha < 0.0:
        raise ContractError("alpha must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    return float(guidance + alpha * np.mean(z * z))
