"""Vector quantization of a continuous latent grid.

The latent is an (h, w, d) float array.  Each cell is snapped to its
nearest codebook row under squared Euclidean distance; ties go to the
smallest row index.  Quantization is not differentiable, so the adjoint
used during optimization is the straight-through estimator: gradients
pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Codebook:
    """A (K, d) table of code vectors."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ContractError("codebook must be a non-empty (K, d) array")
        if not np.isfinite(v).all():
            raise ContractError("codebook contains non-finite entries")
        object.__setattr__(self, "vectors", v)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class QuantizedGrid:
    """Result of quantizing a latent grid."""

    values: np.ndarray   # (h, w, d) selected code vectors
    indices: np.ndarray  # (h, w) int64 row indices


def quantize_cell(cell: np.ndarray, codebook: Codebook) -> int:
    """Index of the nearest code to a single d-vector.

    Distances are accumulated as sums of squared differences so that
    exact ties (duplicate rows, symmetric placements) compare equal and
    resolve to the smallest index, matching np.argmin.
    """
    cell = np.asarray(cell, dtype=np.float64)
    if cell.shape != (codebook.dim,):
        raise ContractError(
            f"cell has shape {cell.shape}, codebook dim is {codebook.dim}")
    diffs = codebook.vectors - cell[None, :]
    return int(np.argmin(np.einsum("kd,kd->k", diffs, diffs)))


def quantize_grid(z: np.ndarray, codebook: Codebook) -> QuantizedGrid:
    """Quantize every cell of an (h, w, d) latent grid."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[2] != codebook.dim:
        raise ContractError(
            f"latent shape {z.shape} incompatible with codebook dim {codebook.dim}")
    if not np.isfinite(z).all():
        raise ContractError("latent contains non-finite entries")
    # (h, w, K, d) differences; grids and codebooks here are small enough
    # that the explicit tensor is cheaper than chunking.
    diffs = z[:, :, None, :] - codebook.vectors[None, None, :, :]
    dist2 = np.einsum("hwkd,hwkd->hwk", diffs, diffs)
    indices = np.argmin(dist2, axis=2).astype(np.int64)
    values = codebook.vectors[indices]
    return QuantizedGrid(values=values, indices=indices)


def straight_through_adjoint(grad_quantized: np.ndarray) -> np.ndarray:
    """Adjoint of quantization under the straight-through estimator.

    The true Jacobian is zero almost everywhere; treating the rounding
    as identity is what lets loss gradients reach the continuous latent.
    """
    return np.asarray(grad_quantized, dtype=np.float64)
