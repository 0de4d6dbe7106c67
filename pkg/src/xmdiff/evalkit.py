"""Downstream evaluation: retrieval metrics, modality gap, identity scores,
modality classification, and the toy re-identification classifier.

The gap metric uses a fixed handcrafted extractor (block-averaged
luminance) rather than a learned network, so its value is a property of
the images alone and stable across runs. Retrieval uses cosine distance
on L2-normalized embeddings; queries with no same-label gallery item are
excluded with a warning count.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .conditioning import FilterConfig, high_pass_condition, luminance
from .data import ImageBatch, ModalityIndicator, as_array
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .labels import MODES, GceConfig, LsrConfig

# Midpoint between per-class mean saturation statistics of 200+200 held-out
# synthetic renders (see calibrate_modality_threshold); frozen constant.
# Measured class means: visible 0.786, infrared 0.051.
DEFAULT_MODALITY_THRESHOLD = 0.42


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # [N, d]
    labels: np.ndarray  # [N]
    modalities: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be [N,d], got shape {self.vectors.shape}")
        if self.labels.shape != (self.vectors.shape[0],):
            raise ValueError("need one label per vector")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors contain non-finite values")

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass(frozen=True)
class RetrievalResult:
    ranks: dict[int, float]
    mAP: float
    skipped_queries: int = 0


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.clip(norms, 1e-12, None)


def cmc_map_from_distances(
    dist: np.ndarray, query_labels, gallery_labels, ks=(1, 5, 10, 20)
) -> RetrievalResult:
    """CMC Rank-k and mAP from a [n_query, n_gallery] distance matrix."""
    dist = np.asarray(dist, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    n_query, n_gallery = dist.shape
    if query_labels.shape != (n_query,) or gallery_labels.shape != (n_gallery,):
        raise ValueError("label lengths do not match the distance matrix")
    if any(k < 1 for k in ks):
        raise ValueError(f"ranks must be >= 1, got {ks}")

    hits_at_k = {k: [] for k in ks}
    average_precisions = []
    skipped = 0
    for qi in range(n_query):
        order = np.argsort(dist[qi], kind="stable")
        matches = gallery_labels[order] == query_labels[qi]
        if not matches.any():
            skipped += 1
            continue
        found = np.cumsum(matches) > 0
        for k in ks:
            hits_at_k[k].append(bool(found[min(k, n_gallery) - 1]))
        positive_ranks = np.flatnonzero(matches) + 1
        precision_at_hits = np.arange(1, len(positive_ranks) + 1) / positive_ranks
        average_precisions.append(precision_at_hits.mean())
    if skipped:
        warnings.warn(f"excluded {skipped} queries with no same-label gallery item")
    if not average_precisions:
        raise ValueError("no query has a same-label gallery item")
    return RetrievalResult(
        ranks={k: float(np.mean(v)) for k, v in hits_at_k.items()},
        mAP=float(np.mean(average_precisions)),
        skipped_queries=skipped,
    )


def cmc_map(queries: EmbeddingSet, gallery: EmbeddingSet, ks=(1, 5, 10, 20)) -> RetrievalResult:
    """Retrieval metrics with cosine distance on L2-normalized embeddings."""
    if queries.vectors.shape[1] != gallery.vectors.shape[1]:
        raise ValueError("query and gallery feature dimensions differ")
    q = _normalize_rows(queries.vectors)
    g = _normalize_rows(gallery.vectors)
    dist = 1.0 - q @ g.T
    return cmc_map_from_distances(dist, queries.labels, gallery.labels, ks)


def gap_features(x) -> np.ndarray:
    """Fixed extractor for the gap metric: 8x8 block-mean luminance, flattened."""
    lum = luminance(as_array(x))[:, 0]
    n, h, w = lum.shape
    if h < 8 or w < 8:
        raise ValueError(f"images must be at least 8x8 for block pooling, got {h}x{w}")
    rows = np.array_split(np.arange(h), 8)
    cols = np.array_split(np.arange(w), 8)
    out = np.empty((n, 64), dtype=np.float64)
    for i, r in enumerate(rows):
        band = lum[:, r, :]
        for j, c in enumerate(cols):
            out[:, i * 8 + j] = band[:, :, c].mean(axis=(1, 2))
    return out


def modality_gap(features_a, features_b) -> float:
    """Euclidean distance between the two per-modality feature centers."""
    a = features_a.vectors if isinstance(features_a, EmbeddingSet) else np.asarray(features_a)
    b = features_b.vectors if isinstance(features_b, EmbeddingSet) else np.asarray(features_b)
    if a.size == 0 or b.size == 0:
        raise ValueError("modality_gap needs non-empty feature sets")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be [N,d] with equal d, got {a.shape} and {b.shape}")
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    va = a - a.mean()
    vb = b - b.mean()
    denom = math.sqrt(float(np.dot(va, va)) * float(np.dot(vb, vb)))
    if denom == 0.0:
        warnings.warn("zero-variance input to identity_preservation; score defined as 0")
        return 0.0
    return float(np.clip(np.dot(va, vb) / denom, -1.0, 1.0))


def identity_preservation(x_gen, c_src, filter_cfg: FilterConfig | None = None) -> float:
    """Pearson correlation between the output's high-pass condition and c_src.

    Takes one generated image ([C,H,W] or a singleton batch) and its
    source condition; batch scoring goes through
    identity_preservation_scores.
    """
    x = as_array(x_gen)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError("identity_preservation scores one pair; use the batch helper")
    c = np.asarray(c_src)
    if c.ndim == 2:
        c = c[None, None]
    elif c.ndim == 3:
        c = c[None]
    if c.shape[2:] != x.shape[2:]:
        raise ValueError(f"condition spatial size {c.shape[2:]} != image {x.shape[2:]}")
    cond_gen = high_pass_condition(x, filter_cfg or FilterConfig())
    return _pearson(cond_gen, c)


def identity_preservation_scores(x_gen, c_src, filter_cfg: FilterConfig | None = None) -> np.ndarray:
    """Per-item identity preservation for aligned batches."""
    x = as_array(x_gen)
    c = np.asarray(c_src)
    if x.shape[0] != c.shape[0]:
        raise ValueError("batch sizes differ")
    cond_gen = high_pass_condition(x, filter_cfg or FilterConfig())
    return np.array([_pearson(cond_gen[i], c[i]) for i in range(x.shape[0])])


def saturation(x) -> np.ndarray:
    """Per-image mean of the per-pixel channel spread (max - min)."""
    arr = as_array(x)
    if arr.ndim != 4:
        raise ValueError(f"expected [B,C,H,W], got shape {arr.shape}")
    return (arr.max(axis=1) - arr.min(axis=1)).mean(axis=(1, 2)).astype(np.float64)


def modality_score(x, threshold: float = DEFAULT_MODALITY_THRESHOLD) -> np.ndarray:
    """Classify each image as visible or infrared from its color saturation.

    Single-channel input has no channel spread and is always infrared.
    """
    arr = as_array(x)
    if arr.ndim != 4:
        raise ValueError(f"expected [B,C,H,W], got shape {arr.shape}")
    if arr.shape[1] == 1:
        return np.full(arr.shape[0], int(ModalityIndicator.INFRARED))
    sat = saturation(arr)
    return np.where(sat > threshold, int(ModalityIndicator.VISIBLE), int(ModalityIndicator.INFRARED))


def calibrate_modality_threshold(visible, infrared) -> float:
    """Midpoint between the class-mean saturation statistics."""
    return float((saturation(visible).mean() + saturation(infrared).mean()) / 2.0)


# --- toy re-identification classifier -------------------------------------


@dataclass(frozen=True)
class ReidConfig:
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    embedding_dim: int = 32
    seed: int = 0
    gce: GceConfig = field(default_factory=GceConfig)
    lsr_alpha: float = 0.1

    def check(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        self.gce.check()
        if not 0.0 <= self.lsr_alpha < 1.0:
            raise ConfigError(f"lsr_alpha must lie in [0, 1), got {self.lsr_alpha}")


@dataclass
class LabeledImages:
    """An image stream with raw (not yet vocabulary-mapped) identity labels."""

    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("one label per image required")

    def __len__(self) -> int:
        return len(self.images)


class _ReidNet(nn.Module):
    def __init__(self, in_channels: int, embedding_dim: int, k: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 32, 3, stride=2, padding=1)
        self.embed_lin = nn.Linear(32, embedding_dim)
        self.head = nn.Linear(embedding_dim, k)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h))
        h = F.silu(self.conv3(h))
        return self.embed_lin(h.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


def _init_reid(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(module.weight[0].numel())
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)


def _per_item_torch_loss(
    logits: torch.Tensor,
    y: torch.Tensor,
    generated: torch.Tensor,
    mode: str,
    q: float,
    alpha: float,
) -> torch.Tensor:
    """Differentiable twin of labels.mixed_objective (tested for agreement)."""
    logp = F.log_softmax(logits, dim=1)
    k = logits.shape[1]
    logp_y = logp.gather(1, y[:, None])[:, 0]
    ce = -logp_y
    if mode == "ce_only":
        robust = ce
    else:
        gce = (1.0 - logp_y.exp().clamp_min(1e-12) ** q) / q
        # CE against the smoothed target: -(1-a)*logp_y - (a/K)*sum_j logp_j
        lsr = -(1.0 - alpha) * logp_y - (alpha / k) * logp.sum(dim=1)
        robust = {"gce": gce, "lsr": lsr, "gce+lsr": gce + lsr}[mode]
    return torch.where(generated, robust, ce)


class ToyClassifier:
    """Convolutional identity classifier with an embedding layer for retrieval."""

    def __init__(self, net: _ReidNet, vocab: np.ndarray, embedding_dim: int):
        self.net = net
        self.vocab = vocab  # raw label value per class index
        self.embedding_dim = embedding_dim

    @property
    def K(self) -> int:
        return len(self.vocab)

    def _forward(self, images) -> torch.Tensor:
        arr = np.ascontiguousarray(as_array(images), dtype=np.float32)
        with torch.no_grad():
            return self.net(torch.from_numpy(arr))

    def predict_proba(self, images) -> np.ndarray:
        return F.softmax(self._forward(images), dim=1).numpy().astype(np.float64)

    def predict(self, images) -> np.ndarray:
        """Raw label values (vocabulary-mapped back from class indices)."""
        return self.vocab[self._forward(images).argmax(dim=1).numpy()]

    def embed(self, images) -> np.ndarray:
        arr = np.ascontiguousarray(as_array(images), dtype=np.float32)
        with torch.no_grad():
            return self.net.embed(torch.from_numpy(arr)).numpy().astype(np.float64)

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))


def symmetric_label_noise(labels, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each label to a uniformly chosen different one with probability rate.

    The vocabulary is the set of values present in labels; a corrupted
    label is never equal to the original, so the realized flip fraction
    matches rate in expectation.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"noise rate must be in [0,1], got {rate}")
    out = np.asarray(labels).copy()
    vocab = np.unique(out)
    if len(vocab) < 2:
        raise ConfigError("label noise needs at least 2 distinct labels")
    flip = rng.random(len(out)) < rate
    for i in np.flatnonzero(flip):
        others = vocab[vocab != out[i]]
        out[i] = others[rng.integers(0, len(others))]
    return out


def train_reid(
    real: LabeledImages,
    generated: LabeledImages | None,
    mode: str,
    cfg: ReidConfig,
) -> tuple[ToyClassifier, list[tuple[int, float]]]:
    """Train the toy classifier on real plus generated streams.

    Real items always contribute plain CE; generated items contribute the
    loss selected by `mode`. An empty generated stream reduces to plain
    single-modality CE training.
    """
    cfg.check()
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if len(real) == 0:
        raise ConfigError("real stream is empty")
    if generated is not None and len(generated) == 0:
        generated = None

    if generated is not None:
        real_ids = set(np.unique(real.labels).tolist())
        gen_ids = set(np.unique(generated.labels).tolist())
        if not real_ids & gen_ids:
            warnings.warn("real and generated identity sets are disjoint")
        images = np.concatenate([real.images, generated.images])
        raw_labels = np.concatenate([real.labels, generated.labels])
        flags = np.concatenate(
            [np.zeros(len(real), dtype=bool), np.ones(len(generated), dtype=bool)]
        )
    else:
        images, raw_labels = real.images, real.labels
        flags = np.zeros(len(real), dtype=bool)

    vocab = np.unique(raw_labels)
    y = np.searchsorted(vocab, raw_labels)
    net = _ReidNet(images.shape[1], cfg.embedding_dim, len(vocab))
    _init_reid(net, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    log: list[tuple[int, float]] = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        xb = torch.from_numpy(images[idx])
        yb = torch.from_numpy(y[idx])
        gb = torch.from_numpy(flags[idx])
        opt.zero_grad()
        loss = _per_item_torch_loss(
            net(xb), yb, gb, mode, cfg.gce.q, cfg.lsr_alpha
        ).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite classifier loss {value} at step {step}")
        loss.backward()
        opt.step()
        log.append((step, value))
    return ToyClassifier(net, vocab, cfg.embedding_dim), log


def save_classifier(path, clf: ToyClassifier) -> Path:
    """Write a trained classifier to an npz checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        f"param.{name}": tensor.detach().numpy()
        for name, tensor in clf.net.state_dict().items()
    }
    manifest = {
        "kind": "toy_classifier",
        "embedding_dim": clf.embedding_dim,
        "in_channels": int(clf.net.conv1.weight.shape[1]),
        "k": clf.K,
    }
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8
    )
    arrays["__vocab__"] = clf.vocab
    np.savez(path, **arrays)
    return path


def load_classifier(path) -> ToyClassifier:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"classifier checkpoint not found: {path}")
    with np.load(path) as blob:
        if "__manifest__" not in blob or "__vocab__" not in blob:
            raise CheckpointError(f"not a classifier checkpoint: {path}")
        manifest = json.loads(bytes(blob["__manifest__"]).decode())
        if manifest.get("kind") != "toy_classifier":
            raise CheckpointError(f"not a classifier checkpoint: {path}")
        vocab = blob["__vocab__"]
        net = _ReidNet(manifest["in_channels"], manifest["embedding_dim"], manifest["k"])
        state = {}
        for key in blob.files:
            if key.startswith("param."):
                state[key[len("param."):]] = torch.from_numpy(blob[key])
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"classifier checkpoint mismatch: {exc}") from exc
    return ToyClassifier(net, vocab, manifest["embedding_dim"])
