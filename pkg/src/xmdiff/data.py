"""Core data containers: modality tags, image batches, dataset records.

Images are float32 arrays of shape [batch, channels, height, width] with
values in [-1, 1]. Conditions are single-channel arrays [batch, 1, H, W].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class ModalityIndicator(IntEnum):
    """Trinary modality tag. NONE selects the unconditional guidance branch."""

    VISIBLE = 0
    INFRARED = 1
    NONE = 2

    @classmethod
    def from_name(cls, name: str) -> "ModalityIndicator":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown modality {name!r}; expected visible/infrared/none")

    def flipped(self) -> "ModalityIndicator":
        if self is ModalityIndicator.NONE:
            raise ValueError("NONE has no opposite modality")
        return ModalityIndicator(1 - int(self))


def as_array(x) -> np.ndarray:
    """Accept an ImageBatch or a bare array and return the [B,C,H,W] array."""
    if isinstance(x, ImageBatch):
        return x.data
    return np.asarray(x)


@dataclass
class ImageBatch:
    """A batch of images plus a per-item modality tag."""

    data: np.ndarray  # [B, C, H, W], float32, values in [-1, 1]
    modality: np.ndarray  # [B], int values of ModalityIndicator

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        mod = np.asarray(self.modality)
        if mod.ndim == 0:
            mod = np.full(self.data.shape[0], int(mod))
        self.modality = mod.astype(np.int64)
        if self.data.ndim != 4:
            raise ValueError(f"image batch must be [B,C,H,W], got shape {self.data.shape}")
        if self.data.shape[1] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.data.shape[1]}")
        if len(self.modality) != len(self.data):
            raise ValueError("modality tags must match batch size")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image batch contains non-finite values")

    def __len__(self) -> int:
        return len(self.data)


@dataclass
class DiffusionDataset:
    """Unpaired two-modality training pool for the diffusion model.

    Carries no cross-modality pair links by construction; ground-truth
    pairs live only in evaluation helpers.
    """

    images: np.ndarray  # [N, C, H, W]
    modalities: np.ndarray  # [N]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.modalities = np.asarray(self.modalities, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    def count(self, modality: ModalityIndicator) -> int:
        return int(np.sum(self.modalities == int(modality)))


@dataclass(frozen=True)
class ManifestEntry:
    source: str  # file path, or "synth:<id>:<modality>:<k>" for generated items
    label: int | None  # None encodes the missing label on the unlabeled modality
    modality: ModalityIndicator


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def n_visible(self) -> int:
        return sum(1 for e in self.entries if e.modality is ModalityIndicator.VISIBLE)

    @property
    def n_infrared(self) -> int:
        return sum(1 for e in self.entries if e.modality is ModalityIndicator.INFRARED)

    def labels_of(self, modality: ModalityIndicator) -> list[int | None]:
        return [e.label for e in self.entries if e.modality is modality]

    def to_lines(self) -> list[str]:
        """Line-oriented serialization: ``path,label,modality``."""
        out = []
        for e in self.entries:
            label = "unknown" if e.label is None else str(e.label)
            out.append(f"{e.source},{label},{e.modality.name.lower()}")
        return out

    @classmethod
    def from_lines(cls, lines) -> "DatasetManifest":
        entries = []
        for line in lines:
            line = line.strip()
            if not line:
                continue
            source, label, modality = line.rsplit(",", 2)
            entries.append(
                ManifestEntry(
                    source=source,
                    label=None if label == "unknown" else int(label),
                    modality=ModalityIndicator.from_name(modality),
                )
            )
        return cls(entries)
