"""Label-noise robustness for the re-identification head.

Translated images inherit their source labels, and some of those labels
are effectively wrong once generation artifacts creep in. This script
reproduces the study at desk scale: train the toy classifier on a small
clean visible set plus a generated infrared stream whose labels carry
20% symmetric noise, once per robust-loss mode, and compare accuracy on
clean held-out renders of the same identities.

Run demo 02 first (the generated stream comes from its checkpoint), then:
    python3 demos/04_noisy_label_study.py
"""

from pathlib import Path

import numpy as np
import torch

from xmdiff.conditioning import FilterConfig
from xmdiff.config import toy_run_config
from xmdiff.data import ImageBatch, ModalityIndicator
from xmdiff.denoiser import load_checkpoint
from xmdiff.evalkit import LabeledImages, symmetric_label_noise, train_reid
from xmdiff.sampler import translate
from xmdiff.schedule import ScheduleConfig
from xmdiff.synthdata import build_eval_dataset

torch.set_num_threads(1)
OUT = Path(__file__).parent / "out"
ckpt = OUT / "final.npz"
if not ckpt.exists():
    raise SystemExit(f"no checkpoint at {ckpt}; run demos/02_train_toy_translator.py first")

params, manifest = load_checkpoint(ckpt)
sched = ScheduleConfig(**manifest["extra"]["schedule"]).build()
fcfg = FilterConfig(**manifest["extra"]["filter"])
cfg = toy_run_config(0)

# labeled visible renders plus fresh holdout renders of the same identities
ds, man = build_eval_dataset(n_ids=4, per_id=12, seed=cfg.dataset.seed + 500,
                             size=cfg.dataset.size)
labels = np.array([e.label for e in man.entries], dtype=np.int64)
is_vis = ds.modalities == int(ModalityIndicator.VISIBLE)
vis, vis_labels = ds.images[is_vis], labels[is_vis]

train_idx, hold_idx = [], []
for lab in np.unique(vis_labels):
    rows = np.flatnonzero(vis_labels == lab)
    train_idx.extend(rows[:8])
    hold_idx.extend(rows[8:])
train_idx, hold_idx = np.array(train_idx), np.array(hold_idx)

# generated infrared stream: translate the labeled visible renders
src = ImageBatch(
    data=vis[train_idx],
    modality=np.full(len(train_idx), int(ModalityIndicator.VISIBLE), dtype=np.int64),
)
out = translate(params, src, ModalityIndicator.INFRARED, cfg.sampler, sched, filter_cfg=fcfg)
noisy = symmetric_label_noise(vis_labels[train_idx], 0.2, np.random.default_rng(7))
flipped = int((noisy != vis_labels[train_idx]).sum())
print(f"generated stream: {len(noisy)} translated renders, {flipped} labels flipped")

real = LabeledImages(images=vis[train_idx][:16], labels=vis_labels[train_idx][:16])
generated = LabeledImages(images=out.data, labels=noisy)

print(f"{'mode':<10} holdout accuracy (clean labels)")
for mode in ("ce_only", "gce", "lsr", "gce+lsr"):
    clf, _ = train_reid(real, generated, mode, cfg.reid)
    acc = clf.accuracy(vis[hold_idx], vis_labels[hold_idx])
    print(f"{mode:<10} {acc:.3f}")
