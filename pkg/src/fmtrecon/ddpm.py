"""Conditional denoising diffusion: schedule, noising, training step and sampler.

Arrays follow the slice-stack layout ``(channels, n, n)``, optionally with a
leading batch axis. Time indices are 1-based, ``t = 1..T``; the schedule
arrays are stored 0-based so ``beta[t - 1]`` is the variance of step ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import GridSpec, Volume
from .netmodel import OptState, UNet, eps_predict, loss_and_grad, optimizer_update

PAPER_SCHEDULE = {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02}
DESK_SCHEDULE = {"T": 200, "beta_start": 5e-4, "beta_end": 0.1}


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def alpha_bar_at(self, t):
        """``alpha_bar`` indexed by 1-based t, with ``alpha_bar_0 = 1``."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"time index out of range 1..{self.T}: {t}")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


@dataclass(frozen=True)
class ShapeConfig:
    num: int = 4
    b: int = 16
    n: int = 32

    def __post_init__(self):
        if self.num < 1 or self.b < 1 or self.n < 8:
            raise ValueError(f"invalid shape config {self}")


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear variance schedule and its derived products."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T, beta_start, beta_end, beta, alpha, alpha_bar, posterior_var)


def _per_item(coef, like):
    """Broadcast per-item scalars over the trailing (c, n, n) axes of ``like``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return float(coef)
    shape = (-1,) + (1,) * 3
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(coef, dtype=like.dtype).reshape(shape)
    return coef.reshape(shape)


def forward_noise(x0, t, eps, s: NoiseSchedule):
    """Closed-form noising ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is an int or, for batched input, one index per batch item.
    """
    s.check_t(t)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {eps.shape}")
    ab = s.alpha_bar_at(t)
    return _per_item(np.sqrt(ab), x0) * x0 + _per_item(np.sqrt(1.0 - ab), eps) * eps


def markov_noise(x0, t: int, s: NoiseSchedule, rng: np.random.Generator):
    """Apply ``t`` single noising steps ``x <- sqrt(1-beta) x + sqrt(beta) eps``."""
    x = np.array(x0, dtype=float)
    for k in range(t):
        x = math.sqrt(s.alpha[k]) * x + math.sqrt(s.beta[k]) * rng.standard_normal(x.shape)
    return x


def concat_condition(cond, x_t):
    """Stack the condition views in front of the latent slices along the channel axis."""
    if cond.shape[-2:] != x_t.shape[-2:]:
        raise ValueError(f"resolution mismatch {cond.shape[-2:]} vs {x_t.shape[-2:]}")
    if cond.ndim != x_t.ndim:
        raise ValueError("condition and latent must both be batched or both unbatched")
    if isinstance(x_t, torch.Tensor):
        return torch.cat([torch.as_tensor(cond, dtype=x_t.dtype), x_t], dim=-3)
    return np.concatenate([cond, x_t], axis=-3)


def posterior_mean(x_t, eps_hat, t, s: NoiseSchedule):
    """Reverse-step mean ``(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)``."""
    s.check_t(t)
    idx = np.asarray(t) - 1
    beta, alpha, ab = s.beta[idx], s.alpha[idx], s.alpha_bar[idx]
    return _per_item(1.0 / np.sqrt(alpha), x_t) * (x_t - _per_item(beta / np.sqrt(1.0 - ab), eps_hat) * eps_hat)


def q_posterior_mean(x0, x_t, t, s: NoiseSchedule):
    """Mean of ``q(x_{t-1} | x_t, x0)``."""
    idx = np.asarray(t) - 1
    ab, ab_prev = s.alpha_bar[idx], s.alpha_bar_at(np.asarray(t) - 1)
    c0 = np.sqrt(ab_prev) * s.beta[idx] / (1.0 - ab)
    ct = np.sqrt(s.alpha[idx]) * (1.0 - ab_prev) / (1.0 - ab)
    return _per_item(c0, x0) * x0 + _per_item(ct, x_t) * x_t


EpsModel = Callable[[np.ndarray, int], np.ndarray]


class NetDenoiser:
    """Adapts a :class:`UNet` to the numpy ``model(X_t, t) -> eps_hat`` interface."""

    def __init__(self, net: UNet):
        self.net = net

    @torch.no_grad()
    def __call__(self, stacked: np.ndarray, t: int) -> np.ndarray:
        dtype = next(self.net.parameters()).dtype
        out = eps_predict(self.net, torch.as_tensor(stacked, dtype=dtype), t)
        return out.numpy().astype(stacked.dtype, copy=False)


def sample_step(x_t, cond, model: EpsModel, t: int, s: NoiseSchedule,
                rng: np.random.Generator | None, stochastic: bool = True):
    """One ancestral step ``x_{t-1} = mu(X_t, t) + sqrt(var_t) z``; ``z = 0`` at t = 1."""
    s.check_t(t)
    eps_hat = model(concat_condition(cond, x_t), t)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"model returned {eps_hat.shape}, expected {x_t.shape}")
    mean = posterior_mean(x_t, eps_hat, t, s)
    if t == 1 or not stochastic:
        return mean
    z = rng.standard_normal(x_t.shape).astype(x_t.dtype, copy=False)
    return mean + math.sqrt(s.posterior_var[t - 1]) * z


# latent value of empty background and of the brightest voxel
DATA_RANGES = {"signed": (-1.0, 1.0), "unit": (0.0, 1.0)}


def to_unit_range(values: np.ndarray, v_max: float, data_range: str = "signed") -> np.ndarray:
    lo, hi = DATA_RANGES[data_range]
    return lo + (hi - lo) * np.clip(values / v_max, 0.0, 1.0)


def from_unit_range(x: np.ndarray, v_max: float, data_range: str = "signed") -> np.ndarray:
    lo, hi = DATA_RANGES[data_range]
    return np.maximum((x - lo) / (hi - lo) * v_max, 0.0)


def sample_stack(cond: np.ndarray, model: EpsModel, s: NoiseSchedule, rng: np.random.Generator,
                 b: int, stochastic: bool = True, dtype=np.float32, x_T: np.ndarray | None = None) -> np.ndarray:
    """Reverse chain from Gaussian noise to a latent stack.

    ``cond`` is ``(num, n, n)`` or batched ``(B, num, n, n)``.
    """
    cond = np.asarray(cond, dtype=dtype)
    shape = cond.shape[:-3] + (b,) + cond.shape[-2:]
    x = rng.standard_normal(shape).astype(dtype) if x_T is None else np.asarray(x_T, dtype=dtype)
    for t in range(s.T, 0, -1):
        x = sample_step(x, cond, model, t, s, rng, stochastic)
    return x


def sample(cond: np.ndarray, model: EpsModel, s: NoiseSchedule, rng: np.random.Generator,
           grid: GridSpec, v_max: float = 1.0, stochastic: bool = True, data_range: str = "signed"):
    """Reconstruct yield volume(s) from condition views; a list for batched ``cond``."""
    stack = sample_stack(cond, model, s, rng, grid.nz, stochastic)
    if stack.shape[-2:] != (grid.ny, grid.nx):
        raise ValueError("condition resolution does not match the grid")
    values = from_unit_range(stack.astype(np.float64), v_max, data_range)
    if values.ndim == 3:
        return Volume(grid, values)
    return [Volume(grid, v) for v in values]


def draw_training_noise(batch: int, latent_shape: tuple, s: NoiseSchedule, rng: np.random.Generator):
    """Per-item time index and Gaussian noise for one training batch."""
    t = rng.integers(1, s.T + 1, size=batch)
    eps = rng.standard_normal((batch,) + tuple(latent_shape)).astype(np.float32)
    return t, eps


def build_training_input(x0, cond, t, eps, s: NoiseSchedule):
    """Noised latents and the stacked network input for a batch."""
    x_t = forward_noise(x0, t, eps, s)
    return concat_condition(cond, x_t)


def training_step(net: UNet, opt: OptState, x0: np.ndarray, cond: np.ndarray, s: NoiseSchedule,
                  rng: np.random.Generator, step_index: int | None = None) -> float:
    """One optimizer update on the noise-prediction loss; returns the loss."""
    if len(x0) == 0:
        raise ValueError("empty batch")
    t, eps = draw_training_noise(len(x0), x0.shape[1:], s, rng)
    dtype = next(net.parameters()).dtype
    x0_t = torch.as_tensor(x0, dtype=dtype)
    stacked = build_training_input(x0_t, torch.as_tensor(cond, dtype=dtype), t, torch.as_tensor(eps, dtype=dtype), s)
    try:
        loss, grads = loss_and_grad(net, stacked, torch.as_tensor(t), torch.as_tensor(eps, dtype=dtype))
    except FloatingPointError as err:
        raise TrainingError(f"step {step_index}: {err}; t = {t.tolist()}") from err
    optimizer_update(net, grads, opt)
    return loss
