"""Train the desk-scale translator end to end.

Uses the frozen toy preset: 500 steps on a 6-identity unpaired set,
about six minutes on one CPU core. The checkpoint and the loss log land
in demos/out/ and feed the two scripts after this one.

Run from the repository root:  python3 demos/02_train_toy_translator.py
"""

import time
from pathlib import Path

import numpy as np
import torch

from xmdiff.config import toy_run_config
from xmdiff.synthdata import build_single_modality_dataset
from xmdiff.trainer import train

torch.set_num_threads(1)
OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

cfg = toy_run_config(0)
d = cfg.dataset
dataset, manifest = build_single_modality_dataset(
    n_ids=d.n_ids,
    per_id=d.per_id,
    labeled_modality=d.labeled,
    seed=d.seed,
    id_overlap=d.id_overlap,
    size=d.size,
)
print(f"training on {len(dataset)} unpaired renders "
      f"({d.n_ids} identities, {d.per_id} per identity and modality)")

t0 = time.time()
params, log = train(
    dataset, cfg.train, cfg.denoiser, ckpt_dir=OUT, log_path=OUT / "toy_loss.csv"
)
seconds = time.time() - t0

losses = [l for _, l, _ in log]
print(f"{cfg.train.steps} steps in {seconds:.0f}s; "
      f"loss {np.mean(losses[:50]):.3f} -> {np.mean(losses[-50:]):.3f}")
print(f"checkpoint: {OUT / 'final.npz'}")
print(f"loss log:   {OUT / 'toy_loss.csv'}")
