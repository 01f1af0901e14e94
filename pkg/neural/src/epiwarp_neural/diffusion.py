"""DDPM machinery with a clean-image (x0) prediction objective.

The schedule is the standard linear-beta one.  Step indices are 0-based
internally (index i corresponds to schedule step t = i + 1); index -1
means "no noise".  The ancestral reverse step uses the exact posterior
of the forward process, so at index 0 the sample collapses onto the
network's x0 estimate with no added noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

__all__ = ["NoiseSchedule", "q_sample", "posterior_step", "reverse_from",
           "steps_for_strength"]


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: Tensor = field(init=False, repr=False)
    alpha_bars: Tensor = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got "
                f"({self.beta_start}, {self.beta_end})"
            )
        betas = torch.linspace(self.beta_start, self.beta_end, self.steps,
                               dtype=torch.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars",
                           torch.cumprod(1.0 - betas, dim=0))

    def alpha_bar(self, index: int) -> float:
        """Cumulative signal fraction; index -1 is the no-noise limit."""
        if index < 0:
            return 1.0
        return float(self.alpha_bars[index])


def q_sample(sched: NoiseSchedule, x0: Tensor, index: int,
             noise: Tensor) -> Tensor:
    """Forward-noise x0 to schedule index (0-based)."""
    ab = sched.alpha_bar(index)
    return x0 * ab ** 0.5 + noise * (1.0 - ab) ** 0.5


def posterior_step(sched: NoiseSchedule, x_t: Tensor, x0_hat: Tensor,
                   index: int, noise: Tensor | None) -> Tensor:
    """One ancestral step x_t -> x_{t-1} given the model's x0 estimate.

    At index 0 the posterior is a point mass on x0_hat and ``noise`` is
    ignored.
    """
    if index == 0:
        return x0_hat
    ab_t = sched.alpha_bar(index)
    ab_prev = sched.alpha_bar(index - 1)
    beta_t = float(sched.betas[index])
    alpha_t = 1.0 - beta_t
    coef_x0 = beta_t * ab_prev ** 0.5 / (1.0 - ab_t)
    coef_xt = (1.0 - ab_prev) * alpha_t ** 0.5 / (1.0 - ab_t)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    if noise is None:
        return mean
    return mean + var ** 0.5 * noise


def steps_for_strength(sched: NoiseSchedule, strength: float) -> int:
    """Number of reverse steps a given refinement strength runs."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    return int(round(strength * sched.steps))


@torch.no_grad()
def reverse_from(net, sched: NoiseSchedule, x_start: Tensor, start_index: int,
                 cond_pair: Tensor, t2w: Tensor,
                 generator: torch.Generator | None = None) -> Tensor:
    """Run the reverse process from ``start_index`` down to 0.

    ``x_start`` must already be noised to ``start_index``.  Returns the
    final x0 estimate (the posterior collapses onto it at index 0).
    """
    x = x_start
    for index in range(start_index, -1, -1):
        t = torch.full((x.shape[0],), index + 1, dtype=torch.float32,
                       device=x.device)
        x0_hat = net(x, cond_pair, t2w, t)
        noise = None
        if index > 0:
            noise = torch.empty_like(x).normal_(generator=generator)
        x = posterior_step(sched, x, x0_hat, index, noise)
    return x
