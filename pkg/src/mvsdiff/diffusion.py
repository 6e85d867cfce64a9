"""Noise schedule, forward diffusion of depth residuals, K-iteration reverse
refinement and deterministic DDIM inference.

The diffusion variable is the residual between ground-truth and initial
normalized inverse depth. The network predicts residual *updates*, so the
clean-sample estimate is ``x_t + sum(updates)`` and DDIM steps use the
clean-sample form of the update.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigma: float = 1.0

    def alpha_bar(self, t, like: torch.Tensor | None = None):
        """ᾱ at integer timestep(s) ``t`` in [0, T]; t = 0 means no noise (ᾱ = 1)."""
        table = np.concatenate([[1.0], self.alpha_bars])
        if isinstance(t, torch.Tensor):
            out = torch.as_tensor(table, dtype=torch.float64)[t.long().cpu()]
            if like is not None:
                out = out.to(like.dtype).to(like.device).view(-1, *([1] * (like.ndim - 1)))
            return out
        return float(table[int(t)])


def make_schedule(T: int = 1000, sigma: float = 1.0, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-β schedule with cumulative ᾱ and stage noise scale ``sigma``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    if not ((betas > 0) & (betas < 1)).all():
        raise ValueError("betas must lie in (0, 1)")
    return NoiseSchedule(T, betas, np.cumprod(1.0 - betas), float(sigma))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) σ eps; ``t`` is an int or a (B,) tensor."""
    ab = sched.alpha_bar(t, like=x0 if isinstance(t, torch.Tensor) else None)
    if isinstance(ab, torch.Tensor):
        return ab.sqrt() * x0 + (1 - ab).sqrt() * sched.sigma * eps
    return ab ** 0.5 * x0 + (1 - ab) ** 0.5 * sched.sigma * eps


def gt_residual(dbar_gt, dbar_init):
    return dbar_gt - dbar_init


def noise_scaling_finetune(sched: NoiseSchedule, epoch: int | None, active: bool = True) -> NoiseSchedule:
    """Noise scale for fine-tuning: halved from epoch 0, halved again from epoch 8.

    ``sched`` is the pre-fine-tuning schedule; it is returned unchanged when
    fine-tuning is inactive.
    """
    if not active or epoch is None:
        return sched
    factor = 0.25 if epoch >= 8 else 0.5
    return dataclasses.replace(sched, sigma=sched.sigma * factor)


@dataclass
class DiffusionState:
    """Mutable bookkeeping of one refinement pass at a fixed timestep."""

    x_t: torch.Tensor
    t: torch.Tensor
    k: int = 0
    accumulated: torch.Tensor | None = None
    hidden: torch.Tensor | None = None
    confidence: torch.Tensor | None = None

    def __post_init__(self):
        if self.accumulated is None:
            self.accumulated = torch.zeros_like(self.x_t)
        if not torch.isfinite(self.x_t).all():
            raise ValueError("x_t must be finite")

    @property
    def residual(self) -> torch.Tensor:
        return self.x_t + self.accumulated


@dataclass
class RefineResult:
    x0_hat: torch.Tensor
    depths: list[torch.Tensor]          # normalized inverse depth after each iteration
    confidences: list[torch.Tensor]
    hidden: torch.Tensor | None

    @property
    def confidence(self) -> torch.Tensor | None:
        return self.confidences[-1] if self.confidences else None


# step(state, dbar_prev) -> (delta, confidence, hidden)
StepFn = Callable[[DiffusionState, torch.Tensor], tuple]


def reverse_refine(state: DiffusionState, dbar_init: torch.Tensor, step: StepFn, K: int) -> RefineResult:
    """Run K residual updates at one timestep.

    Iteration k sees the current estimate ``dbar_init + x_t + sum_{n<k} Δx_n``
    and returns ``Δx_k``; the depths after every iteration are recorded.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    depths, confs = [], []
    for k in range(1, K + 1):
        state.k = k
        dbar_prev = dbar_init + state.residual
        delta, conf, hidden = step(state, dbar_prev)
        state.accumulated = state.accumulated + delta
        state.hidden, state.confidence = hidden, conf
        depths.append(dbar_init + state.x_t + state.accumulated)
        confs.append(conf)
    return RefineResult(state.residual, depths, confs, state.hidden)


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Descending timesteps visited by DDIM, starting at T."""
    if num_steps < 1 or num_steps > T:
        raise ValueError(f"sampling steps must be in [1, {T}]")
    return [int(round(v)) for v in np.linspace(T, 0, num_steps + 1)[:-1]]


def ddim_infer(dbar_init: torch.Tensor, refine: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
               sched: NoiseSchedule, num_steps: int = 1, generator: torch.Generator | None = None,
               x_T: torch.Tensor | None = None, clamp: bool = True):
    """Deterministic (η = 0) DDIM refinement of an initial normalized inverse depth.

    ``refine(x_t, t)`` returns the clean residual estimate x̂_0. The start
    state is pure scaled noise σ·ε (ᾱ_T is negligible). Returns the refined
    depth and the last x̂_0.
    """
    steps = ddim_timesteps(sched.T, num_steps)
    if x_T is None:
        eps = torch.randn(dbar_init.shape, generator=generator, dtype=dbar_init.dtype)
        x_T = sched.sigma * eps.to(dbar_init.device)
    x = x_T
    B = dbar_init.shape[0]
    x0_hat = None
    for i, t in enumerate(steps):
        tt = torch.full((B,), t, dtype=torch.long, device=dbar_init.device)
        x0_hat = refine(x, tt)
        if i + 1 < len(steps):
            ab, ab_next = sched.alpha_bar(t), sched.alpha_bar(steps[i + 1])
            eps_hat = (x - ab ** 0.5 * x0_hat) / (sched.sigma * (1 - ab) ** 0.5)
            x = ab_next ** 0.5 * x0_hat + (1 - ab_next) ** 0.5 * sched.sigma * eps_hat
    out = dbar_init + x0_hat
    return (out.clamp(0, 1) if clamp else out), x0_hat
