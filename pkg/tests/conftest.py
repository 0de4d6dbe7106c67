"""Shared fixtures. The expensive one, toy_bundle, runs the frozen toy
training once per session (conditional and no-condition models) and is
reused by the end-to-end acceptance tests."""

import sys
import time
from dataclasses import dataclass, replace

import numpy as np
import pytest
import torch


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Repeat the acceptance PASS/FAIL lines after the test tally."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

from xmdiff.config import toy_run_config
from xmdiff.data import ImageBatch, ModalityIndicator
from xmdiff.denoiser import DenoiserParams
from xmdiff.sampler import translate
from xmdiff.schedule import NoiseSchedule
from xmdiff.synthdata import build_eval_dataset, build_single_modality_dataset
from xmdiff.trainer import train

VIS = int(ModalityIndicator.VISIBLE)
IR = int(ModalityIndicator.INFRARED)

EVAL_IDS = 4
EVAL_PER_ID = 8
HOLDOUT_PER_ID = 4  # extra renders of the same identities, items 8..11


@dataclass
class ToyBundle:
    cfg: object
    sched: NoiseSchedule
    params: DenoiserParams  # conditional model
    uncond_params: DenoiserParams  # ablation model, no condition channel
    vis: np.ndarray  # held-out visible renders [N,3,H,W]
    ir: np.ndarray  # held-out infrared renders, same identity/slot order
    labels: np.ndarray  # identity label per row of vis/ir
    holdout_images: np.ndarray  # fresh renders of the same identities
    holdout_labels: np.ndarray
    train_seconds: float  # conditional training wall clock


@dataclass
class ToyTranslations:
    to_visible: np.ndarray  # translate(ir) -> visible
    to_infrared: np.ndarray  # translate(vis) -> infrared
    seconds: float


def _eval_split(cfg, per_id):
    ds, manifest = build_eval_dataset(
        n_ids=EVAL_IDS, per_id=per_id, seed=cfg.dataset.seed + 500, size=cfg.dataset.size
    )
    labels = np.array([e.label for e in manifest.entries], dtype=np.int64)
    is_vis = ds.modalities == VIS
    return ds.images[is_vis], ds.images[~is_vis], labels[is_vis], labels[~is_vis]


@pytest.fixture(scope="session")
def toy_bundle():
    torch.set_num_threads(1)
    cfg = toy_run_config(0)
    d = cfg.dataset
    dataset, _ = build_single_modality_dataset(
        n_ids=d.n_ids,
        per_id=d.per_id,
        labeled_modality=d.labeled,
        seed=d.seed,
        id_overlap=d.id_overlap,
        size=d.size,
    )
    t0 = time.time()
    params, _ = train(dataset, cfg.train, cfg.denoiser)
    train_seconds = time.time() - t0

    uncond_denoiser = replace(cfg.denoiser, use_condition=False, in_channels=3)
    uncond_params, _ = train(dataset, cfg.train, uncond_denoiser)

    vis, ir, vis_labels, ir_labels = _eval_split(cfg, EVAL_PER_ID)
    assert np.array_equal(vis_labels, ir_labels)

    big_vis, big_ir, big_vl, big_il = _eval_split(cfg, EVAL_PER_ID + HOLDOUT_PER_ID)
    # items are seeded independently of per_id, so the first EVAL_PER_ID
    # renders per identity coincide with the eval split and the rest are new
    fresh_v = np.ones(len(big_vl), dtype=bool)
    fresh_i = np.ones(len(big_il), dtype=bool)
    for lab in np.unique(big_vl):
        fresh_v[np.flatnonzero(big_vl == lab)[:EVAL_PER_ID]] = False
        fresh_i[np.flatnonzero(big_il == lab)[:EVAL_PER_ID]] = False
    holdout_images = np.concatenate([big_vis[fresh_v], big_ir[fresh_i]])
    holdout_labels = np.concatenate([big_vl[fresh_v], big_il[fresh_i]])

    return ToyBundle(
        cfg=cfg,
        sched=cfg.train.schedule.build(),
        params=params,
        uncond_params=uncond_params,
        vis=vis,
        ir=ir,
        labels=vis_labels,
        holdout_images=holdout_images,
        holdout_labels=holdout_labels,
        train_seconds=train_seconds,
    )


@pytest.fixture(scope="session")
def toy_translations(toy_bundle):
    b = toy_bundle
    cfg = b.cfg
    rng = np.random.default_rng(cfg.sampler.seed)
    t0 = time.time()
    out_v = translate(
        b.params,
        ImageBatch(data=b.ir, modality=np.full(len(b.ir), IR, dtype=np.int64)),
        ModalityIndicator.VISIBLE,
        cfg.sampler,
        b.sched,
        filter_cfg=cfg.train.filter,
        rng=rng,
    )
    out_i = translate(
        b.params,
        ImageBatch(data=b.vis, modality=np.full(len(b.vis), VIS, dtype=np.int64)),
        ModalityIndicator.INFRARED,
        cfg.sampler,
        b.sched,
        filter_cfg=cfg.train.filter,
        rng=rng,
    )
    seconds = time.time() - t0
    return ToyTranslations(to_visible=out_v.data, to_infrared=out_i.data, seconds=seconds)
