"""Noise schedule, forward corruption, reverse step, loss, and sampling.

The forward chain multiplies the signal by sqrt(1 - beta_t) and adds
Gaussian noise of variance beta_t at each step, which gives the closed-form
marginal x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps. The reverse step
is a Gaussian whose mean is computed from the predicted noise and whose
variance is the posterior value beta_tilde_t; the variance is fixed, not
learned, so the network only predicts the noise.

Timesteps are 1-based: t runs over {1, ..., T} and arrays of per-step
quantities are indexed with t - 1. The t = 0 convention abar_0 = 1 makes
beta_tilde_1 exactly zero, so the final reverse step is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import TensorNode, mse_loss
from .errors import ConfigError, ShapeError
from .volume import Volume3D

OUTPUT_GUARD = (-0.1, 1.1)  # sanity clamp applied before the final [0, 1] clip


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self):
        if self.T < 2:
            raise ConfigError(f"need T >= 2, got {self.T}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got "
                f"({self.beta_start}, {self.beta_end})"
            )


def paper_scale_config() -> DiffusionConfig:
    return DiffusionConfig(T=1000)


class NoiseSchedule:
    """Precomputed per-step noise quantities.

    `beta`, `alpha`, `alpha_bar`, `beta_tilde` are length-T arrays; entry
    [t-1] belongs to step t. All derived values are float64.
    """

    def __init__(self, beta: np.ndarray):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("schedule needs at least 1 step")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ConfigError("every beta_t must lie in (0, 1)")
        self.beta = beta
        self.T = int(beta.size)
        self.alpha = 1.0 - beta
        self.alpha_bar = np.cumprod(self.alpha)
        # previous-step cumulative products, with the t=0 convention of 1
        abar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.beta_tilde = (1.0 - abar_prev) / (1.0 - self.alpha_bar) * beta
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ConfigError("cumulative signal fraction must strictly decrease")
        if not (0.0 < self.alpha_bar[-1] <= self.alpha_bar[0] < 1.0):
            raise ConfigError("cumulative signal fraction out of range")

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")


def make_linear_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Evenly spaced beta_t from beta_start to beta_end inclusive."""
    cfg.validate()
    return NoiseSchedule(np.linspace(cfg.beta_start, cfg.beta_end, cfg.T))


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Corrupt x0 to step t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    sched._check_t(t)
    x0 = np.asarray(x0)
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} must match signal {x0.shape}")
    abar = sched.alpha_bar[t - 1]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def posterior_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                   sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean: (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)."""
    sched._check_t(t)
    alpha = sched.alpha[t - 1]
    abar = sched.alpha_bar[t - 1]
    return (x_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)


def posterior_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                   z: np.ndarray | None, sched: NoiseSchedule) -> np.ndarray:
    """One reverse step: mean plus sqrt(beta_tilde_t) * z.

    The t = 1 step is deterministic (beta_tilde_1 = 0); z is ignored there.
    """
    sched._check_t(t)
    mean = posterior_mean(x_t, t, eps_hat, sched)
    if t == 1 or z is None:
        return mean
    if z.shape != x_t.shape:
        raise ShapeError(f"z shape {z.shape} must match state {x_t.shape}")
    return mean + np.sqrt(sched.beta_tilde[t - 1]) * z


def training_loss(net, sched: NoiseSchedule, x0: np.ndarray, y: np.ndarray,
                  rng: np.random.Generator, t=None, eps=None) -> TensorNode:
    """Noise-prediction squared error on a batch.

    Draws t uniformly from {1..T} per batch item and eps ~ N(0, I) unless
    given explicitly (validation grids and oracle tests inject both).
    Inputs are (B, 1, dx, dy, dz) arrays; returns a scalar node that is
    differentiable with respect to every network parameter.
    """
    x0 = np.asarray(x0)
    y = np.asarray(y)
    if x0.ndim != 5 or y.shape != x0.shape:
        raise ShapeError(f"expected matching (B,1,d,h,w) batches, got {x0.shape} / {y.shape}")
    batch = x0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=batch)
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.shape != (batch,):
        raise ShapeError(f"need one timestep per batch item, got shape {t.shape}")
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} must match batch {x0.shape}")

    x_t = np.empty_like(x0)
    for i in range(batch):
        x_t[i] = q_sample(x0[i], int(t[i]), eps[i], sched).astype(x0.dtype)

    eps_hat = net.forward(TensorNode(x_t), TensorNode(y), t)
    return mse_loss(eps_hat, TensorNode(eps))


def final_export_clip(x: np.ndarray) -> np.ndarray:
    """Clamp a finished sample into [0, 1] (guard band first, by policy:
    never applied mid-chain)."""
    return np.clip(np.clip(x, *OUTPUT_GUARD), 0.0, 1.0)


def sample(net, y: Volume3D, sched: NoiseSchedule, rng: np.random.Generator,
           clip_output: bool = True) -> Volume3D:
    """Generate a volume conditioned on `y` by running the reverse chain
    from pure noise over the whole volume (no patching at inference)."""
    dims = y.dims
    if any(d % 16 for d in dims):
        raise ShapeError(f"condition dims {dims} must be divisible by 16")
    y_batch = y.data.astype(np.float32)[None, None]
    y_node = TensorNode(y_batch)
    x = rng.standard_normal(y_batch.shape).astype(np.float32)
    for t in range(sched.T, 0, -1):
        eps_hat = net.forward(TensorNode(x), y_node, np.array([t])).values
        z = rng.standard_normal(x.shape).astype(np.float32) if t > 1 else None
        x = posterior_step(x, t, eps_hat, z, sched).astype(np.float32)
    out = x[0, 0]
    if clip_output:
        out = final_export_clip(out)
    return Volume3D(out, y.spacing)
