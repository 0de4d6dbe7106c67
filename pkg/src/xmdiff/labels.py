"""Noise-robust classification losses for training on assigned labels.

Generated images inherit the label of their source image, so their labels
are noisy by construction. Two mitigations are offered: generalized cross
entropy, which interpolates between CE (q -> 0) and the linear 1 - p loss
(q = 1), and label smoothing, which softens the one-hot target. Real
items always use plain cross entropy.

All arithmetic is double precision; probabilities are clamped at 1e-12
before powers and logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PROB_FLOOR = 1e-12

MODES = ("ce_only", "gce", "lsr", "gce+lsr")


@dataclass(frozen=True)
class GceConfig:
    q: float = 0.7

    def check(self) -> None:
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"gce q must lie in (0, 1], got {self.q}")


@dataclass(frozen=True)
class LsrConfig:
    alpha: float = 0.1
    K: int = 0  # number of identities; must be set before use

    def check(self) -> None:
        if self.K < 1:
            raise ConfigError(f"lsr needs at least one class, got K={self.K}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"lsr alpha must lie in [0, 1), got {self.alpha}")


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2:
        raise ValueError(f"probs must be [K] or [N,K], got shape {np.shape(probs)}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("probs rows must be valid distributions")
    return p


def _prob_of_label(probs, y_index) -> np.ndarray:
    p = _check_probs(probs)
    y = np.atleast_1d(np.asarray(y_index, dtype=np.int64))
    if y.shape[0] != p.shape[0]:
        if y.shape[0] == 1:
            y = np.full(p.shape[0], y[0])
        else:
            raise ValueError(f"{y.shape[0]} labels for {p.shape[0]} rows")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ValueError(f"label index out of range [0, {p.shape[1]})")
    return np.clip(p[np.arange(p.shape[0]), y], PROB_FLOOR, None)


def gce_loss(probs, y_index, q: float) -> float:
    """(1 - p_y^q) / q, averaged over rows.

    q = 1 gives the linear 1 - p_y loss; the q -> 0 limit is cross
    entropy (verified against -ln p in tests).
    """
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"gce q must lie in (0, 1], got {q}")
    p_y = _prob_of_label(probs, y_index)
    return float(np.mean((1.0 - p_y**q) / q))


def ce_loss(probs, y_index) -> float:
    """Plain cross entropy -ln p_y, averaged over rows."""
    return float(np.mean(-np.log(_prob_of_label(probs, y_index))))


def lsr_smooth(y_index: int, cfg: LsrConfig) -> np.ndarray:
    """Smoothed target: alpha/K off the label, (1 - alpha) + alpha/K on it."""
    cfg.check()
    if not 0 <= y_index < cfg.K:
        raise ValueError(f"label {y_index} out of range [0, {cfg.K})")
    target = np.full(cfg.K, cfg.alpha / cfg.K, dtype=np.float64)
    target[y_index] += 1.0 - cfg.alpha
    return target


def lsr_loss(probs, y_index, cfg: LsrConfig) -> float:
    """Cross entropy against the smoothed target, averaged over rows."""
    p = np.clip(_check_probs(probs), PROB_FLOOR, None)
    y = np.atleast_1d(np.asarray(y_index, dtype=np.int64))
    if y.shape[0] == 1 and p.shape[0] > 1:
        y = np.full(p.shape[0], y[0])
    targets = np.stack([lsr_smooth(int(label), cfg) for label in y])
    return float(np.mean(-np.sum(targets * np.log(p), axis=1)))


def mixed_objective(
    probs,
    y_index,
    is_generated,
    mode: str,
    gce_cfg: GceConfig | None = None,
    lsr_cfg: LsrConfig | None = None,
) -> float:
    """Batch loss: CE on real items, the selected robust loss on generated ones.

    Every row must be flagged real (False) or generated (True); the batch
    value is the mean of per-item losses.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    p = _check_probs(probs)
    n, k = p.shape
    flags = np.asarray(is_generated)
    if flags.shape != (n,) or flags.dtype not in (np.bool_, np.int64, np.int32):
        raise ValueError(f"need one real/generated flag per row, got {flags.shape} {flags.dtype}")
    flags = flags.astype(bool)
    y = np.atleast_1d(np.asarray(y_index, dtype=np.int64))
    if y.shape != (n,):
        raise ValueError(f"need one label per row, got {y.shape}")

    gce_cfg = gce_cfg or GceConfig()
    gce_cfg.check()
    lsr_cfg = lsr_cfg or LsrConfig(K=k)
    if lsr_cfg.K != k:
        raise ConfigError(f"lsr K={lsr_cfg.K} does not match {k} classes")

    per_item = np.empty(n, dtype=np.float64)
    for i in range(n):
        row, label = p[i], int(y[i])
        if not flags[i]:
            per_item[i] = ce_loss(row, label)
        elif mode == "ce_only":
            per_item[i] = ce_loss(row, label)
        elif mode == "gce":
            per_item[i] = gce_loss(row, label, gce_cfg.q)
        elif mode == "lsr":
            per_item[i] = lsr_loss(row, label, lsr_cfg)
        else:  # gce+lsr: both generated-item terms summed
            per_item[i] = gce_loss(row, label, gce_cfg.q) + lsr_loss(row, label, lsr_cfg)
    return float(per_item.mean())
