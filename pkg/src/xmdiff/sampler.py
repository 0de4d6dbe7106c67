"""Reverse process: guided sampling, acceleration, and translation.

Translation never reuses the source pixels directly: it computes the
condition from the source, then denoises a fresh Gaussian while asking
for the opposite modality indicator. The partial-noise baseline does the
opposite (no condition, noised source as the start) and exists only as
the comparison arm for the ablation study.

Every entry point takes an explicit schedule and seeds its own numpy
generator from the config, so sampling trajectories are reproducible and
independent of training-side rng state.

The `predictor` hook (defaulting to the network forward) exists so tests
can substitute closed-form noise oracles; production callers never pass
it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import FilterConfig, condition_for
from .data import ImageBatch, ModalityIndicator, as_array
from .denoiser import DenoiserParams, predict_eps
from .errors import ConfigError
from .schedule import NoiseSchedule, forward_noise, mean_from_eps

SIGMA_MODES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class SamplerConfig:
    guidance_weight: float = 1.0
    sigma_mode: str = "beta_tilde"
    ddim_steps: int | None = 25
    seed: int = 0

    def check(self, T: int | None = None) -> None:
        if not (np.isfinite(self.guidance_weight) and self.guidance_weight >= 0):
            raise ConfigError(f"guidance_weight must be >= 0, got {self.guidance_weight}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")
        if self.ddim_steps is not None:
            if self.ddim_steps < 1:
                raise ConfigError(f"ddim_steps must be >= 1, got {self.ddim_steps}")
            if T is not None and self.ddim_steps > T:
                raise ConfigError(f"ddim_steps {self.ddim_steps} exceeds schedule length {T}")


def _check_target(e_target) -> int:
    e_target = ModalityIndicator(int(e_target))
    if e_target is ModalityIndicator.NONE:
        raise ValueError("target modality must be visible or infrared, not none")
    return int(e_target)


def guided_eps(params, x_t, t, c, e_target, guidance_weight, predictor=predict_eps) -> np.ndarray:
    """Linear combination of the conditional and unconditional predictions:

        (1 + w) * eps(x_t, t, c, e_target) - w * eps(x_t, t, c, none)

    The condition c is supplied to BOTH branches; only the indicator is
    nulled on the unconditional side. w = 0 short-circuits to a single
    conditional evaluation.
    """
    e_target = _check_target(e_target)
    eps_cond = predictor(params, x_t, t, c, e_target)
    if guidance_weight == 0:
        return eps_cond
    eps_uncond = predictor(params, x_t, t, c, int(ModalityIndicator.NONE))
    return (1.0 + guidance_weight) * eps_cond - guidance_weight * eps_uncond


def sigma_for(t: int, cfg: SamplerConfig, sched: NoiseSchedule) -> float:
    """Reverse-step noise scale at t; both classical constant choices."""
    beta = float(sched.beta(t))
    if cfg.sigma_mode == "beta":
        return float(np.sqrt(beta))
    abar_prev = float(sched.alpha_bar(t - 1))
    abar = float(sched.alpha_bar(t))
    return float(np.sqrt((1.0 - abar_prev) / (1.0 - abar) * beta))


def ddpm_step(
    params,
    x_t,
    t: int,
    c,
    e_target,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    predictor=predict_eps,
) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; the final step (t=1) adds no noise."""
    t = int(sched.check_t(t))
    x_t = as_array(x_t)
    eps_hat = guided_eps(params, x_t, t, c, e_target, cfg.guidance_weight, predictor)
    mu = mean_from_eps(x_t, t, eps_hat, sched)
    if t == 1:
        return mu
    noise = rng.standard_normal(x_t.shape, dtype=np.float32)
    return mu + np.float32(sigma_for(t, cfg, sched)) * noise


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced increasing subsequence of [1, T] that always contains T."""
    if not 1 <= steps <= T:
        raise ConfigError(f"ddim_steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    taus = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in taus]


def _ddim_loop(params, x, taus, c, e_target, cfg, sched, predictor) -> np.ndarray:
    """Deterministic (eta=0) update along the timestep subsequence.

    The predicted clean image is clipped each step; the loop lands exactly
    on the clean image at the end because alpha_bar(0) = 1.
    """
    for idx in reversed(range(len(taus))):
        t = taus[idx]
        t_prev = taus[idx - 1] if idx > 0 else 0
        eps_hat = guided_eps(params, x, t, c, e_target, cfg.guidance_weight, predictor)
        abar = float(sched.alpha_bar(t))
        abar_prev = float(sched.alpha_bar(t_prev))
        x0_pred = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        x0_pred = np.clip(x0_pred, -1.0, 1.0)
        x = np.sqrt(abar_prev) * x0_pred + np.sqrt(1.0 - abar_prev) * eps_hat
        x = x.astype(np.float32)
    return np.clip(x, -1.0, 1.0)


def _ddpm_loop(params, x, t_start, c, e_target, cfg, sched, rng, predictor) -> np.ndarray:
    for t in range(t_start, 0, -1):
        x = ddpm_step(params, x, t, c, e_target, cfg, sched, rng, predictor)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def _start_noise(shape, cfg: SamplerConfig, rng: np.random.Generator | None) -> tuple:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal(shape, dtype=np.float32), rng


def ddim_sample(
    params: DenoiserParams,
    c,
    e_target,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    shape: tuple | None = None,
    rng: np.random.Generator | None = None,
    predictor=predict_eps,
) -> ImageBatch:
    """Generate from pure noise with the accelerated deterministic sampler.

    The batch/spatial shape is inferred from the condition batch; pass
    `shape` explicitly for unconditional models (c=None).
    """
    cfg.check(T=sched.T)
    if cfg.ddim_steps is None:
        raise ConfigError("ddim_sample needs ddim_steps set")
    e_target = _check_target(e_target)
    if shape is None:
        if c is None:
            raise ConfigError("need either a condition batch or an explicit shape")
        cond = as_array(c)
        shape = (cond.shape[0], params.cfg.image_channels) + cond.shape[2:]
    x, _ = _start_noise(shape, cfg, rng)
    taus = ddim_timesteps(sched.T, cfg.ddim_steps)
    out = _ddim_loop(params, x, taus, c, e_target, cfg, sched, predictor)
    return ImageBatch(data=out, modality=np.full(shape[0], e_target))


def ddpm_sample(
    params: DenoiserParams,
    c,
    e_target,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    shape: tuple | None = None,
    rng: np.random.Generator | None = None,
    predictor=predict_eps,
) -> ImageBatch:
    """Full ancestral sampling from pure noise over all T steps."""
    cfg.check(T=sched.T)
    e_target = _check_target(e_target)
    if shape is None:
        if c is None:
            raise ConfigError("need either a condition batch or an explicit shape")
        cond = as_array(c)
        shape = (cond.shape[0], params.cfg.image_channels) + cond.shape[2:]
    x, rng = _start_noise(shape, cfg, rng)
    out = _ddpm_loop(params, x, sched.T, c, e_target, cfg, sched, rng, predictor)
    return ImageBatch(data=out, modality=np.full(shape[0], e_target))


def translate(
    params: DenoiserParams,
    x_src: ImageBatch,
    target,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    filter_cfg: FilterConfig | None = None,
    rng: np.random.Generator | None = None,
    predictor=predict_eps,
) -> ImageBatch:
    """Cross-modality translation: condition on the source, flip the indicator.

    Starts from a fresh Gaussian; the source enters only through its
    condition image. Output order matches input order, which is how
    callers carry source identity over to the generated batch.
    """
    target = _check_target(target)
    if np.any(x_src.modality == target):
        raise ValueError("source batch already contains the target modality")
    if not params.cfg.use_condition:
        raise ConfigError("model has no condition channel; use partial_noise_translate")
    c = condition_for(x_src, filter_cfg or FilterConfig())
    if cfg.ddim_steps is not None:
        return ddim_sample(params, c, target, cfg, sched, rng=rng, predictor=predictor)
    return ddpm_sample(params, c, target, cfg, sched, rng=rng, predictor=predictor)


def partial_noise_translate(
    params: DenoiserParams,
    x_src: ImageBatch,
    target,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    t_start: int | None = None,
    rng: np.random.Generator | None = None,
    predictor=predict_eps,
) -> ImageBatch:
    """Condition-free baseline: denoise a partially noised copy of the source.

    The source image is noised to t_start (default T/2) and denoised with
    the flipped indicator. Requires a model trained without the condition
    channel; identity content survives only through whatever the partial
    noising left intact.
    """
    target = _check_target(target)
    if params.cfg.use_condition:
        raise ConfigError("model expects a condition channel; use translate instead")
    cfg.check(T=sched.T)
    if t_start is None:
        t_start = sched.T // 2
    if not 0 <= t_start <= sched.T:
        raise ConfigError(f"t_start must lie in [0, {sched.T}], got {t_start}")
    if t_start == 0:
        return ImageBatch(data=x_src.data.copy(), modality=np.full(len(x_src), target))
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    eps = rng.standard_normal(x_src.data.shape, dtype=np.float32)
    x = forward_noise(x_src.data, t_start, eps, sched)
    if cfg.ddim_steps is not None:
        taus = ddim_timesteps(t_start, min(cfg.ddim_steps, t_start))
        out = _ddim_loop(params, x, taus, None, target, cfg, sched, predictor)
    else:
        out = _ddpm_loop(params, x, t_start, None, target, cfg, sched, rng, predictor)
    return ImageBatch(data=out, modality=np.full(len(x_src), target))
