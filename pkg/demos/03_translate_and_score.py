"""Translate held-out renders across modalities and score the result.

Loads the checkpoint from demo 02, translates a fresh eval split in both
directions, and prints the three numbers that matter: how often the
output lands in the target modality, how much source identity survives
(correlation between the output's structure and the source condition),
and the same score under a shuffled pairing as the chance floor. A
source | condition | output grid is saved for the infrared-to-visible
direction.

Run demo 02 first, then:  python3 demos/03_translate_and_score.py
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from xmdiff.conditioning import FilterConfig, condition_for
from xmdiff.config import toy_run_config
from xmdiff.data import ImageBatch, ModalityIndicator
from xmdiff.denoiser import load_checkpoint
from xmdiff.evalkit import identity_preservation_scores, modality_score
from xmdiff.sampler import translate
from xmdiff.schedule import ScheduleConfig
from xmdiff.synthdata import build_eval_dataset, to_uint8

torch.set_num_threads(1)
OUT = Path(__file__).parent / "out"
ckpt = OUT / "final.npz"
if not ckpt.exists():
    raise SystemExit(f"no checkpoint at {ckpt}; run demos/02_train_toy_translator.py first")

params, manifest = load_checkpoint(ckpt)
sched = ScheduleConfig(**manifest["extra"]["schedule"]).build()
fcfg = FilterConfig(**manifest["extra"]["filter"])
cfg = toy_run_config(0)

ds, manifest_data = build_eval_dataset(n_ids=4, per_id=8, seed=cfg.dataset.seed + 500,
                                       size=cfg.dataset.size)
labels = np.array([e.label for e in manifest_data.entries])
is_vis = ds.modalities == int(ModalityIndicator.VISIBLE)
vis = ds.images[is_vis]
ir = ds.images[~is_vis]
lab = labels[is_vis]


def shuffled(labels, seed=11):
    # chance floor: pair every output with a DIFFERENT identity's condition
    rng = np.random.default_rng(seed)
    uniq = np.unique(labels)
    lp = rng.permutation(len(uniq))
    while np.any(lp == np.arange(len(uniq))):
        lp = rng.permutation(len(uniq))
    out = np.empty(len(labels), dtype=np.int64)
    for a, b in enumerate(lp):
        out[labels == uniq[a]] = rng.permutation(np.flatnonzero(labels == uniq[b]))
    return out


for name, src, source_mod, target in (
    ("infrared -> visible", ir, ModalityIndicator.INFRARED, ModalityIndicator.VISIBLE),
    ("visible -> infrared", vis, ModalityIndicator.VISIBLE, ModalityIndicator.INFRARED),
):
    batch = ImageBatch(data=src, modality=np.full(len(src), int(source_mod), dtype=np.int64))
    out = translate(params, batch, target, cfg.sampler, sched, filter_cfg=fcfg)
    cond = condition_for(src, fcfg)
    frac = float((modality_score(out.data) == int(target)).mean())
    idp = identity_preservation_scores(out.data, cond, fcfg)
    null = identity_preservation_scores(out.data, cond[shuffled(lab)], fcfg)
    print(f"{name}: target-modality fraction {frac:.2f}, "
          f"identity preservation {idp.mean():.2f} (chance {null.mean():.2f})")
    if target is ModalityIndicator.VISIBLE:
        rows = []
        for i in range(0, 8):
            c_rgb = np.repeat(np.clip(cond[i], -1, 1), 3, axis=0)
            rows.append(np.concatenate([src[i], c_rgb, out.data[i]], axis=2))
        sheet = to_uint8(np.concatenate(rows, axis=1))
        Image.fromarray(sheet).save(OUT / "translations.png")
        print(f"wrote {OUT / 'translations.png'} (source | condition | output per row)")
