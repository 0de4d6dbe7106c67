"""Noise schedule and the closed-form forward (noising) process.

Timesteps are 1-indexed: t runs over [1, T] in every public signature,
with the convention alpha_bar(0) = 1 (a clean image). The retention
coefficients alpha_t are interpolated linearly, not the betas; many
DDPM codebases interpolate beta instead, which yields a slightly
different cumulative schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ScheduleConfig:
    """Run-config surface for the schedule. Defaults: T=1000, alpha from
    1-1e-4 down to 1-2e-2."""

    timesteps: int = 1000
    alpha_start: float = 1.0 - 1e-4
    alpha_end: float = 1.0 - 2e-2

    def build(self) -> "NoiseSchedule":
        return build_linear_schedule(self.timesteps, self.alpha_start, self.alpha_end)


@dataclass(frozen=True)
class NoiseSchedule:
    """The alpha_t / alpha_bar_t sequence governing noising and sampling.

    Arrays are stored 0-indexed (entry i holds step t = i + 1); the
    accessors below take paper-style t. Instances built by
    ``build_linear_schedule`` satisfy all invariants; hand-built
    degenerate schedules can be checked with ``validate``.
    """

    T: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    betas: np.ndarray

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        """alpha_bar at t in [0, T]; alpha_bar(0) == 1 by convention."""
        t = np.asarray(t)
        clipped = np.where(t > 0, t, 1)
        return np.where(t > 0, self.alpha_bars[clipped - 1], 1.0)

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError("schedule needs at least one timestep")
        if not (np.all(self.alphas > 0.0) and np.all(self.alphas < 1.0)):
            raise ConfigError("all alphas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ConfigError("alpha_bars must be strictly decreasing")
        running = np.concatenate([[self.alphas[0]], self.alpha_bars[:-1] * self.alphas[1:]])
        if not np.allclose(self.alpha_bars, running, rtol=1e-12, atol=0.0):
            raise ConfigError("alpha_bars is not the cumulative product of alphas")


def build_linear_schedule(T: int, alpha_start: float, alpha_end: float) -> NoiseSchedule:
    """Linear interpolation of alpha_t from alpha_start (t=1) to alpha_end (t=T)."""
    if T < 1:
        raise ConfigError(f"timesteps must be >= 1, got {T}")
    if not (0.0 < alpha_end <= alpha_start < 1.0):
        raise ConfigError(
            f"need 0 < alpha_end <= alpha_start < 1, got start={alpha_start}, end={alpha_end}"
        )
    alphas = np.linspace(alpha_start, alpha_end, T, dtype=np.float64)
    # cumulative product in double precision; 1000 factors drift otherwise
    alpha_bars = np.cumprod(alphas)
    sched = NoiseSchedule(T=T, alphas=alphas, alpha_bars=alpha_bars, betas=1.0 - alphas)
    for arr in (sched.alphas, sched.alpha_bars, sched.betas):
        arr.setflags(write=False)
    sched.validate()
    return sched


def _per_item(values, like: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-item [B] vector over the trailing axes of `like`."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    if values.shape[0] != like.shape[0]:
        raise ValueError(f"per-item vector of length {values.shape[0]} for batch {like.shape[0]}")
    return values.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_noise(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    `t` is a scalar or a per-item vector; the caller owns the randomness
    in `eps`.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t = sched.check_t(t)
    abar = _per_item(sched.alpha_bar(t), x0)
    out = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return out.astype(np.float32, copy=False)


def mean_from_eps(x_t, t, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """Posterior mean from a noise prediction:

        mu = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    """
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"x_t shape {x_t.shape} != eps_hat shape {eps_hat.shape}")
    t = sched.check_t(t)
    alpha = _per_item(sched.alpha(t), x_t)
    abar = _per_item(sched.alpha_bar(t), x_t)
    mu = (x_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    return mu.astype(np.float32, copy=False)
