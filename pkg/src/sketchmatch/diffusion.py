"""Forward noising process, training objective, and reverse samplers.

Pixel-space DDPM mechanics, independent of any network architecture. The
noise-level convention used throughout:

- Schedule arrays are indexed by level ``t in {0, ..., T-1}``.
- ``q_sample(x0, t)`` produces ``x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps``.
- The reverse chain treats the target of its last transition as fully clean
  (``abar = 1``), so stepping from level 1 with the true noise recovers x0
  exactly and the final step is deterministic.

All randomness flows through explicitly seeded ``torch.Generator`` objects;
there is no hidden global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .validation import check_same_shape


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-level variance parameters of the forward process.

    ``betas``, ``alphas`` and ``alpha_bars`` are float64 tensors of length
    ``num_steps``; ``alpha_bars`` is the exact running product of ``alphas``.
    """

    num_steps: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def coverage_ok(self) -> bool:
        """Whether the schedule spans near-clean to near-pure-noise levels."""
        return bool(self.alpha_bars[0] > 0.99 and self.alpha_bars[-1] < 0.05)


@dataclass
class LatentState:
    """A partially denoised image at a given noise level."""

    x: torch.Tensor
    t: int

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError(f"noise level must be >= 0, got {self.t}")


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.03) -> NoiseSchedule:
    """Build a linear-beta schedule with exact float64 running products.

    The default (T=200, betas 1e-4..0.03) spans near-clean (abar > 0.99) to
    near-pure-noise (abar < 0.05), which the samplers rely on when they start
    the reverse chain from unit-normal noise.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(num_steps=num_steps, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def _check_level(t: int, schedule: NoiseSchedule) -> None:
    if not (0 <= t < schedule.num_steps):
        raise ValueError(f"noise level {t} outside [0, {schedule.num_steps})")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Blend signal and noise at level ``t`` via the closed-form forward process.

    ``t`` may be an int (applied to the whole tensor) or a 1-D tensor of
    per-sample levels for a batch. Deterministic given (x0, t, eps).
    """
    check_same_shape(x0, eps, names=("x0", "eps"))
    if isinstance(t, torch.Tensor):
        for ti in t.tolist():
            _check_level(int(ti), schedule)
        abar = schedule.alpha_bars[t].to(x0.dtype)
        abar = abar.view(-1, *([1] * (x0.ndim - 1)))
    else:
        _check_level(int(t), schedule)
        abar = schedule.alpha_bars[int(t)].to(x0.dtype)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward blend: reconstruct x0 from (x_t, predicted noise)."""
    _check_level(t, schedule)
    abar = schedule.alpha_bars[t].to(x_t.dtype)
    return (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def diffusion_loss(
    model: Callable,
    batch: torch.Tensor,
    conditions: Sequence,
    schedule: NoiseSchedule,
    rng_seed: int,
) -> torch.Tensor:
    """Mean squared error between predicted and true noise over a batch.

    ``model`` is called once as ``model(x_t, t, conditions)`` with ``x_t`` of
    shape (N, C, H, W) and ``t`` a (N,) long tensor of noise levels. The seed
    fixes the (t, eps) draws, so the loss is a deterministic, differentiable
    function of the model parameters.
    """
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ValueError(f"batch must be a non-empty (N, C, H, W) tensor, got {tuple(batch.shape)}")
    if len(conditions) != batch.shape[0]:
        raise ValueError(f"{len(conditions)} conditions for {batch.shape[0]} images")
    gen = torch_generator(rng_seed)
    n = batch.shape[0]
    t = torch.randint(0, schedule.num_steps, (n,), generator=gen)
    eps = torch.randn(batch.shape, generator=gen, dtype=batch.dtype)
    x_t = q_sample(batch, t, eps, schedule)
    eps_hat = model(x_t, t, conditions)
    check_same_shape(eps_hat, eps, names=("eps_hat", "eps"))
    return ((eps_hat - eps) ** 2).mean()


def denoise_step(
    state: LatentState,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    rng_seed: int | None = None,
    *,
    t_prev: int | None = None,
    generator: torch.Generator | None = None,
) -> LatentState:
    """One reverse transition from level ``t`` to ``t_prev`` (default ``t-1``).

    Uses the DDPM posterior mean plus scaled noise. When ``t_prev == 0`` the
    target level is treated as clean (abar_prev = 1), which makes the
    posterior variance exactly zero: the final step is deterministic and,
    given the true noise, recovers x0 exactly.
    """
    t = state.t
    if t < 1:
        raise ValueError("cannot denoise below level 0")
    _check_level(t, schedule)
    check_same_shape(state.x, eps_hat, names=("x_t", "eps_hat"))
    if t_prev is None:
        t_prev = t - 1
    if not (0 <= t_prev < t):
        raise ValueError(f"t_prev must be in [0, {t}), got {t_prev}")

    dtype = state.x.dtype
    abar = schedule.alpha_bars[t].to(dtype)
    abar_prev = (
        torch.tensor(1.0, dtype=dtype) if t_prev == 0 else schedule.alpha_bars[t_prev].to(dtype)
    )
    alpha_eff = abar / abar_prev
    beta_eff = 1.0 - alpha_eff

    x0_hat = predict_x0(state.x, t, eps_hat, schedule)
    coef_x0 = torch.sqrt(abar_prev) * beta_eff / (1.0 - abar)
    coef_xt = torch.sqrt(alpha_eff) * (1.0 - abar_prev) / (1.0 - abar)
    mean = coef_x0 * x0_hat + coef_xt * state.x

    var = beta_eff * (1.0 - abar_prev) / (1.0 - abar)
    if float(var) > 0.0:
        if generator is None:
            generator = torch_generator(0 if rng_seed is None else rng_seed)
        z = torch.randn(state.x.shape, generator=generator, dtype=dtype)
        mean = mean + torch.sqrt(var) * z
    return LatentState(x=mean, t=t_prev)


def sampling_levels(schedule: NoiseSchedule, num_steps: int | None = None) -> list[int]:
    """Descending noise levels visited by the sampler.

    ``num_steps=None`` visits every level; smaller values stride evenly while
    always covering the top level and 0.
    """
    top = schedule.num_steps - 1
    if num_steps is None or num_steps >= schedule.num_steps:
        return list(range(top, -1, -1))
    if num_steps < 2:
        raise ValueError("strided sampling needs at least 2 levels")
    levels = torch.linspace(0, top, num_steps, dtype=torch.float64).round().long().tolist()
    return sorted(set(levels), reverse=True)


def sample(
    model: Callable,
    condition,
    schedule: NoiseSchedule,
    rng_seed: int,
    *,
    shape: tuple[int, int, int] = (1, 48, 48),
    num_steps: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run the full reverse loop from unit-normal noise to a clean image.

    Draw order (relevant to anyone replicating the stream): the initial state
    first, then one noise tensor per stochastic transition, top level first.
    The output is clamped to [-1, 1]. Bit-deterministic given ``rng_seed``.
    """
    gen = torch_generator(rng_seed)
    levels = sampling_levels(schedule, num_steps)
    x = torch.randn((1, *shape), generator=gen, dtype=dtype)
    state = LatentState(x=x, t=levels[0])
    with torch.no_grad():
        for t_prev in levels[1:]:
            t_vec = torch.full((1,), state.t, dtype=torch.long)
            eps_hat = model(state.x, t_vec, [condition])
            state = denoise_step(state, eps_hat, schedule, t_prev=t_prev, generator=gen)
    return state.x[0].clamp(-1.0, 1.0)
