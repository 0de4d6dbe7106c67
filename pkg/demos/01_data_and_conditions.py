"""Synthetic identities, two modalities, and what the condition keeps.

Renders a handful of identities in both modalities, saves a contact
sheet, and compares the cross-modality distance of high-pass conditions
against plain low-pass references. The point of the high-pass choice is
visible in the numbers: the condition carries identity structure while
the two modalities' condition statistics nearly coincide.

Run from the repository root:  python3 demos/01_data_and_conditions.py
"""

from pathlib import Path

import numpy as np
from PIL import Image

from xmdiff.conditioning import FilterConfig, condition_for, low_pass_reference
from xmdiff.data import ModalityIndicator
from xmdiff.evalkit import gap_features, modality_gap
from xmdiff.synthdata import build_eval_dataset, generate_identity, render, to_uint8

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# --- a few identities, side by side in both modalities ------------------
rows = []
for seed in range(4):
    spec = generate_identity(seed)
    vis = render(spec, ModalityIndicator.VISIBLE)
    ir = render(spec, ModalityIndicator.INFRARED)
    cond = condition_for(vis[None], FilterConfig())[0]
    cond_rgb = np.repeat(np.clip(cond, -1, 1), 3, axis=0)
    rows.append(np.concatenate([vis, ir, cond_rgb], axis=2))
sheet = to_uint8(np.concatenate(rows, axis=1))
Image.fromarray(sheet).save(OUT / "identities.png")
print(f"wrote {OUT / 'identities.png'} (visible | infrared | condition per row)")

# --- the gap numbers on a larger sample ----------------------------------
ds, _ = build_eval_dataset(n_ids=32, per_id=4, seed=0, size=(32, 64))
vis = ds.images[ds.modalities == int(ModalityIndicator.VISIBLE)]
ir = ds.images[ds.modalities == int(ModalityIndicator.INFRARED)]

fcfg = FilterConfig()
low_cfg = FilterConfig(kind="lowpass_gaussian", sigma=fcfg.sigma)
gap_high = modality_gap(
    gap_features(condition_for(vis, fcfg)), gap_features(condition_for(ir, fcfg))
)
gap_low = modality_gap(
    gap_features(low_pass_reference(vis, low_cfg)), gap_features(low_pass_reference(ir, low_cfg))
)
print(f"modality gap, high-pass conditions: {gap_high:.3f}")
print(f"modality gap, low-pass references:  {gap_low:.3f}")
print("the conditioning signal is nearly modality-free; the low-pass image is not")
