"""Adam optimizer state, regularization schedule, and gradient masking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DivergedError


@dataclass
class AdamState:
    """First/second moment accumulators plus the optimizer step count.

    ``t`` counts optimizer steps for bias correction and is distinct
    from the run's iteration counter: injecting a fresh latent resets
    the moments (and t) without rewinding the run.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape, dtype=np.float64),
                   v=np.zeros(shape, dtype=np.float64), t=0)

    def reset(self) -> None:
        self.m[...] = 0.0
        self.v[...] = 0.0
        self.t = 0


def adam_step(z: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float = 0.15, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One Adam update with bias correction; mutates ``state``.

        m <- b1 m + (1 - b1) g        mhat = m / (1 - b1^t)
        v <- b2 v + (1 - b2) g^2      vhat = v / (1 - b2^t)
        z <- z - lr * mhat / (sqrt(vhat) + eps)
    """
    grad = np.asarray(grad, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if grad.shape != z.shape or grad.shape != state.m.shape:
        raise ContractError("gradient/latent/state shapes disagree")
    if not np.isfinite(grad).all():
        raise DivergedError("gradient")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return z - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class RegSchedule:
    """Decaying weight for the mean-square latent penalty.

    multiplicative: alpha_t = alpha0 * (1 - decay)^t  (default)
    linear:         alpha_t = max(0, alpha0 - decay * t)

    The linear form is clamped at zero because a negative penalty weight
    is meaningless.
    """

    alpha0: float = 0.5
    decay: float = 0.005
    kind: str = "multiplicative"

    def __post_init__(self):
        if self.alpha0 < 0.0:
            raise ContractError("alpha0 must be >= 0")
        if not (0.0 <= self.decay < 1.0):
            raise ContractError("decay must lie in [0, 1)")
        if self.kind not in ("multiplicative", "linear"):
            raise ContractError(f"unknown decay kind '{self.kind}'")


def alpha_at(schedule: RegSchedule, t: int) -> float:
    """Penalty weight after t completed iterations (t=0 gives alpha0)."""
    if t < 0:
        raise ContractError("iteration must be >= 0")
    if schedule.kind == "linear":
        return max(0.0, schedule.alpha0 - schedule.decay * t)
    return schedule.alpha0 * (1.0 - schedule.decay) ** t


def reg_gradient(z: np.ndarray, alpha: float) -> np.ndarray:
    """Gradient of alpha * mean(z^2): (2 * alpha / N) * z."""
    z = np.asarray(z, dtype=np.float64)
    return (2.0 * alpha / z.size) * z


def mask_gradients(grad: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Scale grad[i, j, :] by mask[i, j]; mask values lie in [0, 1].

    A zero mask cell freezes that latent cell exactly: the masked
    gradient is exactly 0.0 there, so Adam's moments stay zero and the
    update is bit-for-bit a no-op.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if mask is None:
        return grad
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != grad.shape[:2]:
        raise ContractError(
            f"mask shape {mask.shape} does not match latent grid {grad.shape[:2]}")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ContractError("mask values must lie in [0, 1]")
    return grad * mask[:, :, None]
