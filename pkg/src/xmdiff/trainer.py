"""Diffusion training: noise-prediction regression with indicator dropout.

Each step draws a batch, noises it to per-item random timesteps, computes
the condition on the fly from the clean images, and regresses the
predicted noise onto the true noise. The modality indicator is replaced
by the learned "none" vector with probability p_uncond so the network
also learns the unconditional branch needed for guidance; the condition
image itself is never dropped, since it carries the identity content the
translation must preserve.

All randomness (batch choice, t, eps, dropout) flows from one numpy
generator seeded by the config, so identical configs give identical loss
logs in single-threaded mode.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import FilterConfig, condition_for
from .data import DiffusionDataset, ImageBatch, ModalityIndicator
from .denoiser import DenoiserConfig, DenoiserParams, build_module, init_params, save_checkpoint
from .errors import ConfigError, TrainingDiverged
from .schedule import NoiseSchedule, ScheduleConfig, forward_noise


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)

    def check(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        self.filter.check()


@dataclass
class StepInputs:
    """Everything one training step feeds the network, before the forward pass."""

    x_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    c: np.ndarray | None
    e: np.ndarray


def sample_step_inputs(
    batch: ImageBatch,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    use_condition: bool = True,
) -> StepInputs:
    """Draw (t, eps, dropout) for a batch and build the noised inputs."""
    x0 = batch.data
    t = rng.integers(1, sched.T + 1, size=len(batch))
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    x_t = forward_noise(x0, t, eps, sched)
    c = condition_for(x0, cfg.filter) if use_condition else None
    e = batch.modality.copy()
    e[rng.random(len(batch)) < cfg.p_uncond] = int(ModalityIndicator.NONE)
    return StepInputs(x_t=x_t, t=t, eps=eps, c=c, e=e)


def mse_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Per-element mean squared error between true and predicted noise."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"eps shape {eps.shape} != prediction shape {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


class Trainer:
    """Owns the module, optimizer and rng for one training run."""

    def __init__(
        self,
        dataset: DiffusionDataset,
        cfg: TrainConfig,
        dcfg: DenoiserConfig,
        init: DenoiserParams | None = None,
    ):
        cfg.check()
        dcfg.check()
        if len(dataset) == 0:
            raise ConfigError("training dataset is empty")
        if (
            dataset.count(ModalityIndicator.VISIBLE) == 0
            or dataset.count(ModalityIndicator.INFRARED) == 0
        ):
            warnings.warn(
                "dataset has a single modality; the indicator embedding cannot "
                "learn a contrast and the model degenerates to unconditional-in-e"
            )
        self.dataset = dataset
        self.cfg = cfg
        self.sched = cfg.schedule.build()
        self.net = build_module(dcfg)
        start = init if init is not None else init_params(dcfg, cfg.seed)
        self.net.load_state_dict(start.tensors)
        self.opt = torch.optim.AdamW(
            self.net.parameters(),
            lr=cfg.learning_rate,
            betas=(0.9, 0.999),
            weight_decay=cfg.weight_decay,
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0

    def sample_batch(self) -> ImageBatch:
        idx = self.rng.integers(0, len(self.dataset), size=self.cfg.batch_size)
        return ImageBatch(data=self.dataset.images[idx], modality=self.dataset.modalities[idx])

    def training_step(self, batch: ImageBatch | None = None) -> float:
        """One optimizer update; returns the step's loss."""
        if batch is None:
            batch = self.sample_batch()
        inputs = sample_step_inputs(
            batch, self.sched, self.cfg, self.rng, use_condition=self.net.cfg.use_condition
        )
        x_t = torch.from_numpy(inputs.x_t)
        if inputs.c is not None:
            x_t = torch.cat([x_t, torch.from_numpy(inputs.c)], dim=1)
        t = torch.from_numpy(inputs.t.astype(np.int64))
        e = torch.from_numpy(inputs.e.astype(np.int64))
        target = torch.from_numpy(inputs.eps)

        self.opt.zero_grad()
        loss = torch.mean((target - self.net(x_t, t, e)) ** 2)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at step {self.step_count + 1}; "
                f"t draws were {inputs.t.tolist()}"
            )
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.cfg.grad_clip)
        self.opt.step()
        self.step_count += 1
        return value

    def snapshot(self) -> DenoiserParams:
        return DenoiserParams.from_module(self.net)


def write_loss_log(path, rows: list[tuple[int, float, float]]) -> None:
    lines = ["step,loss,lr"] + [f"{s},{l:.8f},{lr:g}" for s, l, lr in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def train(
    dataset: DiffusionDataset,
    cfg: TrainConfig,
    dcfg: DenoiserConfig,
    init: DenoiserParams | None = None,
    ckpt_dir=None,
    checkpoint_every: int = 0,
    log_path=None,
) -> tuple[DenoiserParams, list[tuple[int, float, float]]]:
    """Full training run; returns final params and the per-step loss log.

    With steps=0 the initial parameters come back unchanged. Periodic
    checkpoints are written when ckpt_dir is set (always including a
    final one).
    """
    trainer = Trainer(dataset, cfg, dcfg, init=init)
    log: list[tuple[int, float, float]] = []

    def checkpoint(name: str):
        if ckpt_dir is None:
            return
        path = Path(ckpt_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {"schedule": asdict(cfg.schedule), "filter": asdict(cfg.filter)}
        save_checkpoint(path, trainer.snapshot(), step=trainer.step_count, seed=cfg.seed, extra=extra)

    for step in range(1, cfg.steps + 1):
        loss = trainer.training_step()
        log.append((step, loss, cfg.learning_rate))
        if checkpoint_every and step % checkpoint_every == 0 and step < cfg.steps:
            checkpoint(f"step_{step:06d}.npz")
    checkpoint("final.npz")
    if log_path is not None:
        write_loss_log(log_path, log)
    return trainer.snapshot(), log
