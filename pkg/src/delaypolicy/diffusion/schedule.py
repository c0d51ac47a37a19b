from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear-beta DDPM schedule, indexed ``k = 1..K`` (index 0 of each array is step 1)."""

    betas: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar_at(self, k):
        """``alpha_bar_k`` for 1-based ``k``; ``k == 0`` gives 1."""
        ab = np.concatenate([[1.0], self.alpha_bar])
        return ab[np.asarray(k)]

    @property
    def posterior_variance(self) -> np.ndarray:
        ab = self.alpha_bar
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        return self.betas * (1.0 - ab_prev) / (1.0 - ab)


def default_betas(K: int) -> tuple[float, float]:
    """Beta range of the standard 1000-step schedule rescaled to ``K`` steps.

    Keeps ``alpha_bar_K`` near zero for small ``K`` (with the unscaled range,
    ``K = 100`` ends at ``alpha_bar ~ 0.37``, far from pure noise).
    """
    scale = 1000.0 / K
    return min(1e-4 * scale, 0.05), min(0.02 * scale, 0.5)


def make_schedule(K: int, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    if K < 1:
        raise DataError(f"need at least one diffusion step, got K={K}")
    if beta_start is None or beta_end is None:
        b0, b1 = default_betas(K)
        beta_start = b0 if beta_start is None else beta_start
        beta_end = b1 if beta_end is None else beta_end
    if not (0 < beta_start <= beta_end < 1):
        raise DataError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, K) if K > 1 else np.array([beta_start])
    betas.setflags(write=False)
    return NoiseSchedule(betas, float(beta_start), float(beta_end))
