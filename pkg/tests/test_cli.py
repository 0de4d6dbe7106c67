"""Command-line driver: artifacts, exit codes, determinism, chaining."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from xmdiff.cli import main

# small everything: the chain test exercises wiring, not model quality
TINY = [
    "--set", "dataset.n_ids=2",
    "--set", "dataset.per_id=2",
    "--set", "denoiser.base_channels=4",
    "--set", "denoiser.embedding_dim=8",
    "--set", "train.schedule.timesteps=10",
    "--set", "train.batch_size=4",
    "--set", "sampler.ddim_steps=5",
    "--set", "reid.steps=2",
    "--set", "reid.batch_size=4",
]


def _tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def _run(argv) -> int:
    return main([str(a) for a in argv])


def test_synth_layout_and_determinism(tmp_path):
    rc = _run(["synth", "--out-root", tmp_path, "--run-name", "a",
               "--n-ids", 2, "--per-id", 2])
    assert rc == 0
    run = tmp_path / "a"
    assert (run / "config.yaml").is_file()
    assert (run / "command.txt").is_file()
    for sub in ("logs", "ckpt", "images", "metrics"):
        assert (run / sub).is_dir()
    manifest = run / "images" / "manifest.csv"
    assert manifest.is_file()
    pngs = sorted((run / "images").rglob("*.png"))
    assert len(pngs) == 8  # 2 ids x 2 renders x 2 modalities

    rc = _run(["synth", "--out-root", tmp_path, "--run-name", "b",
               "--n-ids", 2, "--per-id", 2])
    assert rc == 0
    assert _tree_digest(run / "images") == _tree_digest(tmp_path / "b" / "images")

    # a different seed changes the pixels
    rc = _run(["synth", "--out-root", tmp_path, "--run-name", "c",
               "--n-ids", 2, "--per-id", 2, "--seed", 1])
    assert rc == 0
    assert _tree_digest(run / "images") != _tree_digest(tmp_path / "c" / "images")


def test_run_name_collision_gets_suffix(tmp_path):
    for _ in range(2):
        assert _run(["synth", "--out-root", tmp_path, "--run-name", "same",
                     "--n-ids", 2, "--per-id", 1]) == 0
    assert (tmp_path / "same").is_dir()
    assert (tmp_path / "same-2").is_dir()


def test_out_root_env_var_and_flag_precedence(tmp_path, monkeypatch):
    env_root = tmp_path / "envroot"
    monkeypatch.setenv("XMDIFF_RUNS", str(env_root))
    assert _run(["synth", "--run-name", "viaenv", "--n-ids", 2, "--per-id", 1]) == 0
    assert (env_root / "viaenv" / "images" / "manifest.csv").is_file()
    flag_root = tmp_path / "flagroot"
    assert _run(["synth", "--out-root", flag_root, "--run-name", "viaflag",
                 "--n-ids", 2, "--per-id", 1]) == 0
    assert (flag_root / "viaflag").is_dir()
    assert not (env_root / "viaflag").exists()


def test_invalid_config_exits_2_with_key_path(tmp_path, capsys):
    rc = _run(["synth", "--out-root", tmp_path, "--set", "dataset.n_idss=3"])
    assert rc == 2
    assert "dataset.n_idss" in capsys.readouterr().err
    rc = _run(["synth", "--out-root", tmp_path, "--set", "badpair"])
    assert rc == 2
    assert "key=value" in capsys.readouterr().err
    rc = _run(["synth", "--out-root", tmp_path, "--n-ids", 1])
    assert rc == 2
    assert "n_ids" in capsys.readouterr().err


def test_missing_checkpoint_exits_3(tmp_path, capsys):
    assert _run(["synth", "--out-root", tmp_path, "--run-name", "d",
                 "--n-ids", 2, "--per-id", 1]) == 0
    rc = _run(["translate", "--out-root", tmp_path,
               "--ckpt", tmp_path / "absent.npz",
               "--data", tmp_path / "d" / "images",
               "--target", "visible", *TINY])
    assert rc == 3
    assert "checkpoint error" in capsys.readouterr().err


def test_full_pipeline_chain(tmp_path):
    root = tmp_path

    # training data (unpaired, visible labeled) and eval data (all labeled)
    assert _run(["synth", "--out-root", root, "--run-name", "train-data", *TINY]) == 0
    assert _run(["synth", "--out-root", root, "--run-name", "eval-data",
                 "--kind", "eval", *TINY]) == 0
    train_images = root / "train-data" / "images"
    eval_images = root / "eval-data" / "images"
    before = _tree_digest(train_images) | _tree_digest(eval_images)

    # conditional denoiser, 2 steps
    assert _run(["train-diff", "--out-root", root, "--run-name", "diff",
                 "--data", train_images, "--steps", 2, *TINY]) == 0
    ckpt = root / "diff" / "ckpt" / "final.npz"
    assert ckpt.is_file()
    loss_csv = (root / "diff" / "logs" / "train_loss.csv").read_text().splitlines()
    assert loss_csv[0] == "step,loss,lr"
    assert len(loss_csv) == 3

    # translate the eval set's infrared side to visible
    assert _run(["translate", "--out-root", root, "--run-name", "tr",
                 "--ckpt", ckpt, "--data", eval_images,
                 "--target", "visible", "--ddim-steps", 5, *TINY]) == 0
    tr_images = root / "tr" / "images"
    assert len(list((tr_images / "visible").rglob("*.png"))) == 4
    assert not (tr_images / "infrared").exists()
    assert (root / "tr" / "images" / "grid.png").is_file()
    tr_csv = (root / "tr" / "metrics" / "translate.csv").read_text().splitlines()
    assert tr_csv[0] == "index,label,saturation,predicted_modality,identity_preservation"
    assert len(tr_csv) == 5

    # classifier on real visible + translated (noisy labels)
    assert _run(["train-reid", "--out-root", root, "--run-name", "reid",
                 "--real", train_images, "--generated", tr_images,
                 "--mode", "gce", "--label-noise", 0.5, *TINY]) == 0
    reid_ckpt = root / "reid" / "ckpt" / "reid.npz"
    assert reid_ckpt.is_file()
    assert (root / "reid" / "logs" / "reid_loss.csv").read_text().startswith("step,loss")

    # retrieval metrics on a synthesized eval split
    assert _run(["eval", "--out-root", root, "--run-name", "ev",
                 "--reid-ckpt", reid_ckpt, *TINY]) == 0
    metrics = (root / "ev" / "metrics" / "retrieval.csv").read_text().splitlines()
    assert metrics[0] == "metric,value"
    names = [line.split(",")[0] for line in metrics[1:]]
    assert names[:1] == ["mAP"]
    assert "rank1" in names and "embedding_gap" in names and "skipped_queries" in names

    # ablation grid, self-contained
    assert _run(["ablate", "--out-root", root, "--run-name", "ab",
                 "--label-noise", 0.2, *TINY]) == 0
    ab = (root / "ab" / "metrics" / "ablation.csv").read_text().splitlines()
    assert ab[0] == "GCE,LSR,accuracy"
    assert [line.split(",")[:2] for line in ab[1:]] == [
        ["0", "0"], ["1", "0"], ["0", "1"], ["1", "1"]
    ]

    # gap summary
    assert _run(["gap-plot", "--out-root", root, "--run-name", "gp",
                 "--n-images", 8, "--n-seeds", 2, *TINY]) == 0
    gap = (root / "gp" / "metrics" / "gap.csv").read_text().splitlines()
    assert gap[0] == "seed,highpass_gap,lowpass_gap"
    assert len(gap) == 3
    assert (root / "gp" / "images" / "gap.png").is_file()

    # input datasets were never touched
    assert _tree_digest(train_images) | _tree_digest(eval_images) == before


def test_snapshot_replays_identically(tmp_path):
    assert _run(["synth", "--out-root", tmp_path, "--run-name", "orig",
                 "--n-ids", 3, "--per-id", 2, "--overlap", 0.5, "--seed", 4]) == 0
    snapshot = tmp_path / "orig" / "config.yaml"
    assert _run(["synth", "--out-root", tmp_path, "--run-name", "replay",
                 "--config", snapshot]) == 0
    assert _tree_digest(tmp_path / "orig" / "images") == _tree_digest(
        tmp_path / "replay" / "images"
    )


def test_unconditional_checkpoint_and_partial_baseline(tmp_path):
    root = tmp_path
    assert _run(["synth", "--out-root", root, "--run-name", "data",
                 "--kind", "eval", *TINY]) == 0
    images = root / "data" / "images"
    assert _run(["train-diff", "--out-root", root, "--run-name", "uncond",
                 "--data", images, "--steps", 2, "--no-condition", *TINY]) == 0
    ckpt = root / "uncond" / "ckpt" / "final.npz"

    # the conditional path must refuse an unconditional checkpoint
    rc = _run(["translate", "--out-root", root, "--run-name", "bad",
               "--ckpt", ckpt, "--data", images,
               "--target", "visible", "--ddim-steps", 5, *TINY])
    assert rc == 2

    assert _run(["translate", "--out-root", root, "--run-name", "part",
                 "--ckpt", ckpt, "--data", images, "--target", "visible",
                 "--partial", "--t-start", 4, "--ddim-steps", 5, *TINY]) == 0
    assert len(list((root / "part" / "images" / "visible").rglob("*.png"))) == 4


def test_translate_with_no_sources_exits_2(tmp_path, capsys):
    root = tmp_path
    assert _run(["synth", "--out-root", root, "--run-name", "data",
                 "--kind", "eval", *TINY]) == 0
    assert _run(["train-diff", "--out-root", root, "--run-name", "diff",
                 "--data", root / "data" / "images", "--steps", 1, *TINY]) == 0
    ckpt = root / "diff" / "ckpt" / "final.npz"
    assert _run(["translate", "--out-root", root, "--run-name", "tr",
                 "--ckpt", ckpt, "--data", root / "data" / "images",
                 "--target", "visible", "--ddim-steps", 5, *TINY]) == 0
    # the translated tree holds only visible images; translating it toward
    # visible again leaves nothing to do
    rc = _run(["translate", "--out-root", root, "--run-name", "tr2",
               "--ckpt", ckpt, "--data", root / "tr" / "images",
               "--target", "visible", "--ddim-steps", 5, *TINY])
    assert rc == 2
    assert "no source images" in capsys.readouterr().err
