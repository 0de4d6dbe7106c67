"""Command-line pipeline driver.

Every command creates a run directory under the output root::

    runs/<name>/
        config.yaml   resolved config snapshot; replaying it repeats the run
        logs/         loss curves as CSV
        ckpt/         model checkpoints
        images/       datasets, translations, comparison grids, plots
        metrics/      metric tables as CSV

Commands exit 0 on success, 2 on an invalid configuration (the message
names the offending key path), 3 on a missing or unreadable checkpoint,
and 1 on runtime failures such as diverged training. The output root
comes from --out-root, the XMDIFF_RUNS environment variable, or the
config, in that order.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from .conditioning import FilterConfig, condition_for, low_pass_reference
from .config import RunConfig, load_run_config, save_run_config
from .data import (
    DatasetManifest,
    DiffusionDataset,
    ImageBatch,
    ManifestEntry,
    ModalityIndicator,
)
from .denoiser import load_checkpoint
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .evalkit import (
    EmbeddingSet,
    LabeledImages,
    cmc_map,
    gap_features,
    identity_preservation_scores,
    load_classifier,
    modality_gap,
    modality_score,
    saturation,
    save_classifier,
    symmetric_label_noise,
    train_reid,
)
from .sampler import partial_noise_translate, translate
from .schedule import ScheduleConfig
from .synthdata import (
    build_eval_dataset,
    build_single_modality_dataset,
    load_directory_dataset,
    to_uint8,
    write_dataset,
)
from .trainer import train, write_loss_log

TRANSLATE_CHUNK = 16  # fixed so a replayed config consumes the rng identically


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key] = yaml.safe_load(raw)
    return out


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    root = Path(args.out_root or os.environ.get("XMDIFF_RUNS") or cfg.out_root)
    name = args.run_name or f"{command}-{time.strftime('%Y%m%d-%H%M%S', time.gmtime())}"
    path = root / name
    suffix = 2
    while path.exists():
        path = root / f"{name}-{suffix}"
        suffix += 1
    for sub in ("logs", "ckpt", "images", "metrics"):
        (path / sub).mkdir(parents=True)
    return path


def _prepare(args, command: str, extra: dict | None = None) -> tuple[RunConfig, Path]:
    overrides = _parse_overrides(args.set)
    overrides.update(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = load_run_config(args.config, overrides)
    run = _run_dir(args, cfg, command)
    save_run_config(cfg, run / "config.yaml")
    flags = {k: v for k, v in vars(args).items() if k != "func" and v is not None}
    (run / "command.txt").write_text(
        yaml.safe_dump({"command": command, "flags": flags}, sort_keys=True)
    )
    return cfg, run


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _labeled_subset(dataset: DiffusionDataset, manifest: DatasetManifest) -> LabeledImages:
    keep = [i for i, e in enumerate(manifest.entries) if e.label is not None]
    if not keep:
        raise ConfigError("dataset has no labeled items")
    labels = np.array([manifest.entries[i].label for i in keep], dtype=np.int64)
    return LabeledImages(images=dataset.images[keep], labels=labels)


def _load_training_checkpoint(path):
    """Checkpoint plus the schedule and filter it was trained with."""
    params, manifest = load_checkpoint(path)
    extra = manifest.get("extra") or {}
    try:
        sched_cfg = ScheduleConfig(**extra["schedule"])
        filter_cfg = FilterConfig(**extra["filter"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(
            f"checkpoint {path} lacks schedule/filter metadata: {exc}"
        ) from exc
    return params, sched_cfg.build(), filter_cfg


def cmd_synth(args) -> int:
    extra = {}
    if args.n_ids is not None:
        extra["dataset.n_ids"] = args.n_ids
    if args.per_id is not None:
        extra["dataset.per_id"] = args.per_id
    if args.overlap is not None:
        extra["dataset.id_overlap"] = args.overlap
    if args.labeled is not None:
        extra["dataset.labeled_modality"] = args.labeled
    cfg, run = _prepare(args, "synth", extra)
    d = cfg.dataset
    if args.kind == "eval":
        dataset, manifest = build_eval_dataset(
            n_ids=d.n_ids, per_id=d.per_id, seed=d.seed, size=d.size
        )
    else:
        dataset, manifest = build_single_modality_dataset(
            n_ids=d.n_ids,
            per_id=d.per_id,
            labeled_modality=d.labeled,
            seed=d.seed,
            id_overlap=d.id_overlap,
            size=d.size,
        )
    manifest_path = write_dataset(dataset, manifest, run / "images")
    print(f"wrote {len(dataset)} images ({manifest.n_visible} visible, "
          f"{manifest.n_infrared} infrared) under {run / 'images'}")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_train_diff(args) -> int:
    extra = {}
    if args.steps is not None:
        extra["train.steps"] = args.steps
    if args.batch_size is not None:
        extra["train.batch_size"] = args.batch_size
    if args.no_condition:
        extra["denoiser.use_condition"] = False
        extra["denoiser.in_channels"] = 3
    cfg, run = _prepare(args, "train-diff", extra)
    if args.data:
        dataset, _ = load_directory_dataset(args.data, size=cfg.dataset.size)
    else:
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
    params, log = train(
        dataset,
        cfg.train,
        cfg.denoiser,
        ckpt_dir=run / "ckpt",
        checkpoint_every=args.checkpoint_every,
        log_path=run / "logs" / "train_loss.csv",
    )
    final = np.mean([loss for _, loss, _ in log[-50:]]) if log else float("nan")
    print(f"trained {cfg.train.steps} steps in {time.time() - t0:.0f}s "
          f"(mean loss over last 50: {final:.4f})")
    print(f"checkpoint: {run / 'ckpt' / 'final.npz'}")
    return 0


def _comparison_grid(path, sources, conditions, outputs) -> None:
    """Stack (source | condition | translated) rows into one PNG."""
    from PIL import Image

    rows = []
    pad_v = np.full((2, sources.shape[3] * 3 + 4, 3), 255, dtype=np.uint8)
    for i in range(len(sources)):
        cond_rgb = np.repeat(conditions[i], 3, axis=0)
        cells = [to_uint8(sources[i]), to_uint8(cond_rgb), to_uint8(outputs[i])]
        pad_h = np.full((sources.shape[2], 2, 3), 255, dtype=np.uint8)
        row = np.concatenate(
            [cells[0], pad_h, cells[1], pad_h, cells[2]], axis=1
        )
        rows.append(row)
        rows.append(pad_v)
    Image.fromarray(np.concatenate(rows[:-1], axis=0)).save(path)


def cmd_translate(args) -> int:
    extra = {}
    if args.guidance_weight is not None:
        extra["sampler.guidance_weight"] = args.guidance_weight
    if args.ddim_steps is not None:
        extra["sampler.ddim_steps"] = args.ddim_steps
    cfg, run = _prepare(args, "translate", extra)
    params, sched, filter_cfg = _load_training_checkpoint(args.ckpt)
    cfg.sampler.check(T=sched.T)
    dataset, manifest = load_directory_dataset(args.data, require_both=False)
    target = ModalityIndicator.from_name(args.target)

    keep = [
        i for i, e in enumerate(manifest.entries) if e.modality is not target
    ]
    if not keep:
        raise ConfigError(f"no source images to translate toward {args.target}")
    sources = dataset.images[keep]
    src_modalities = dataset.modalities[keep]
    labels = [manifest.entries[i].label for i in keep]

    rng = np.random.default_rng(cfg.sampler.seed)
    outputs = []
    for start in range(0, len(sources), TRANSLATE_CHUNK):
        stop = start + TRANSLATE_CHUNK
        batch = ImageBatch(
            data=sources[start:stop], modality=src_modalities[start:stop]
        )
        if args.partial:
            out = partial_noise_translate(
                params, batch, target, cfg.sampler, sched,
                t_start=args.t_start, rng=rng,
            )
        else:
            out = translate(
                params, batch, target, cfg.sampler, sched,
                filter_cfg=filter_cfg, rng=rng,
            )
        outputs.append(out.data)
    outputs = np.concatenate(outputs, axis=0)

    out_entries = [
        ManifestEntry(source=f"translated:{i}", label=label, modality=target)
        for i, label in zip(keep, labels)
    ]
    out_dataset = DiffusionDataset(
        images=outputs, modalities=np.full(len(outputs), int(target), dtype=np.int64)
    )
    manifest_path = write_dataset(
        out_dataset, DatasetManifest(out_entries), run / "images"
    )

    conditions = condition_for(sources, filter_cfg)
    idp = identity_preservation_scores(outputs, conditions, filter_cfg)
    sat = saturation(outputs)
    pred = modality_score(outputs)
    frac = float(np.mean(pred == int(target)))
    _write_csv(
        run / "metrics" / "translate.csv",
        ["index", "label", "saturation", "predicted_modality", "identity_preservation"],
        [
            (i, "unknown" if lab is None else lab, f"{s:.6f}",
             ModalityIndicator(int(p)).name.lower(), f"{r:.6f}")
            for i, (lab, s, p, r) in enumerate(zip(labels, sat, pred, idp))
        ],
    )
    n_grid = min(8, len(sources))
    _comparison_grid(
        run / "images" / "grid.png",
        sources[:n_grid], conditions[:n_grid], outputs[:n_grid],
    )
    print(f"translated {len(outputs)} images toward {args.target}: "
          f"{frac:.0%} classify as target, "
          f"mean identity preservation {idp.mean():.3f}")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_train_reid(args) -> int:
    extra = {}
    if args.mode is not None:
        extra["reid_mode"] = args.mode
    if args.steps is not None:
        extra["reid.steps"] = args.steps
    cfg, run = _prepare(args, "train-reid", extra)
    real_ds, real_manifest = load_directory_dataset(args.real, require_both=False)
    real = _labeled_subset(real_ds, real_manifest)
    generated = None
    if args.generated:
        gen_ds, gen_manifest = load_directory_dataset(args.generated, require_both=False)
        generated = _labeled_subset(gen_ds, gen_manifest)
        if args.label_noise > 0:
            noisy = symmetric_label_noise(
                generated.labels, args.label_noise,
                np.random.default_rng([cfg.reid.seed, 1]),
            )
            generated = LabeledImages(images=generated.images, labels=noisy)
    clf, log = train_reid(real, generated, cfg.reid_mode, cfg.reid)
    ckpt = save_classifier(run / "ckpt" / "reid.npz", clf)
    _write_csv(
        run / "logs" / "reid_loss.csv",
        ["step", "loss"],
        [(s, f"{v:.6f}") for s, v in log],
    )
    acc = clf.accuracy(real.images, real.labels)
    print(f"trained {cfg.reid_mode} classifier for {cfg.reid.steps} steps "
          f"(train accuracy {acc:.3f})")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg, run = _prepare(args, "eval")
    clf = load_classifier(args.reid_ckpt)
    if args.data:
        dataset, manifest = load_directory_dataset(args.data)
    else:
        d = cfg.dataset
        dataset, manifest = build_eval_dataset(
            n_ids=d.n_ids, per_id=d.per_id, seed=d.seed, size=d.size
        )
    labels = np.array(
        [-1 if e.label is None else e.label for e in manifest.entries], dtype=np.int64
    )
    if np.any(labels < 0):
        raise ConfigError("eval dataset must be fully labeled")
    is_ir = dataset.modalities == int(ModalityIndicator.INFRARED)
    if not is_ir.any() or is_ir.all():
        raise ConfigError("eval dataset needs both modalities")
    queries = EmbeddingSet(
        vectors=clf.embed(dataset.images[is_ir]), labels=labels[is_ir]
    )
    gallery = EmbeddingSet(
        vectors=clf.embed(dataset.images[~is_ir]), labels=labels[~is_ir]
    )
    result = cmc_map(queries, gallery)
    gap = modality_gap(queries.vectors, gallery.vectors)
    rows = [("mAP", f"{result.mAP:.6f}")]
    rows += [(f"rank{k}", f"{v:.6f}") for k, v in sorted(result.ranks.items())]
    rows.append(("embedding_gap", f"{gap:.6f}"))
    rows.append(("skipped_queries", str(result.skipped_queries)))
    _write_csv(run / "metrics" / "retrieval.csv", ["metric", "value"], rows)
    shown = ", ".join(f"rank{k} {v:.3f}" for k, v in sorted(result.ranks.items()))
    print(f"retrieval (infrared queries, visible gallery): "
          f"mAP {result.mAP:.3f}, {shown}")
    print(f"metrics: {run / 'metrics' / 'retrieval.csv'}")
    return 0


def cmd_gap_plot(args) -> int:
    cfg, run = _prepare(args, "gap-plot")
    per_id = 8
    n_ids = max(2, (args.n_images + per_id - 1) // per_id)
    rows = []
    for offset in range(args.n_seeds):
        seed = cfg.dataset.seed + offset
        dataset, _ = build_eval_dataset(
            n_ids=n_ids, per_id=per_id, seed=seed, size=cfg.dataset.size
        )
        is_vis = dataset.modalities == int(ModalityIndicator.VISIBLE)
        vis = dataset.images[is_vis][: args.n_images]
        ir = dataset.images[~is_vis][: args.n_images]
        fcfg = cfg.train.filter
        low_cfg = FilterConfig(kind="lowpass_gaussian", sigma=fcfg.sigma)
        gap_high = modality_gap(
            gap_features(condition_for(vis, fcfg)),
            gap_features(condition_for(ir, fcfg)),
        )
        gap_low = modality_gap(
            gap_features(low_pass_reference(vis, low_cfg)),
            gap_features(low_pass_reference(ir, low_cfg)),
        )
        rows.append((seed, gap_high, gap_low))
    _write_csv(
        run / "metrics" / "gap.csv",
        ["seed", "highpass_gap", "lowpass_gap"],
        [(s, f"{h:.6f}", f"{l:.6f}") for s, h, l in rows],
    )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(len(rows))
    ax.bar(xs - 0.18, [r[1] for r in rows], width=0.36, label="high-pass condition")
    ax.bar(xs + 0.18, [r[2] for r in rows], width=0.36, label="low-pass reference")
    ax.set_xticks(xs, [f"seed {r[0]}" for r in rows])
    ax.set_ylabel("modality gap (feature center distance)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(run / "images" / "gap.png", dpi=150)
    plt.close(fig)

    med_high = float(np.median([r[1] for r in rows]))
    med_low = float(np.median([r[2] for r in rows]))
    print(f"median modality gap: high-pass {med_high:.4f} vs "
          f"low-pass {med_low:.4f} over {args.n_seeds} seeds")
    print(f"plot: {run / 'images' / 'gap.png'}")
    return 0


def cmd_ablate(args) -> int:
    cfg, run = _prepare(args, "ablate")
    d = cfg.dataset
    if args.real and args.generated:
        real_ds, real_manifest = load_directory_dataset(args.real, require_both=False)
        real = _labeled_subset(real_ds, real_manifest)
        gen_ds, gen_manifest = load_directory_dataset(args.generated, require_both=False)
        generated = _labeled_subset(gen_ds, gen_manifest)
        holdout = real
    else:
        # self-contained stand-in: the labeled visible split plays the real
        # stream, infrared renders of the same identities play the
        # translated stream, and extra renders of those identities form a
        # clean holdout
        per_id_total = d.per_id + max(2, d.per_id // 2)
        dataset, manifest = build_eval_dataset(
            n_ids=d.n_ids, per_id=per_id_total, seed=d.seed, size=d.size
        )
        labels = np.array([e.label for e in manifest.entries], dtype=np.int64)
        is_vis = dataset.modalities == int(ModalityIndicator.VISIBLE)
        vis_x, vis_y = dataset.images[is_vis], labels[is_vis]
        ir_x, ir_y = dataset.images[~is_vis], labels[~is_vis]
        train_mask = np.zeros(len(vis_y), dtype=bool)
        for lab in np.unique(vis_y):
            idx = np.flatnonzero(vis_y == lab)[: d.per_id]
            train_mask[idx] = True
        real = LabeledImages(images=vis_x[train_mask], labels=vis_y[train_mask])
        holdout = LabeledImages(images=vis_x[~train_mask], labels=vis_y[~train_mask])
        generated = LabeledImages(images=ir_x, labels=ir_y)

    noisy = symmetric_label_noise(
        generated.labels, args.label_noise, np.random.default_rng([cfg.reid.seed, 1])
    )
    generated = LabeledImages(images=generated.images, labels=noisy)

    grid = [("0", "0", "ce_only"), ("1", "0", "gce"),
            ("0", "1", "lsr"), ("1", "1", "gce+lsr")]
    rows = []
    for gce_flag, lsr_flag, mode in grid:
        clf, _ = train_reid(real, generated, mode, cfg.reid)
        acc = clf.accuracy(holdout.images, holdout.labels)
        rows.append((gce_flag, lsr_flag, f"{acc:.4f}"))
        print(f"  GCE={gce_flag} LSR={lsr_flag} ({mode:8s}): "
              f"clean accuracy {acc:.4f}")
    _write_csv(run / "metrics" / "ablation.csv", ["GCE", "LSR", "accuracy"], rows)
    print(f"metrics: {run / 'metrics' / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmdiff",
        description="Cross-modality diffusion translation and noisy-label "
                    "re-identification, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file; flags override it")
        p.add_argument("--run-name", help="run directory name (default: timestamped)")
        p.add_argument("--out-root", help="output root (default: $XMDIFF_RUNS or config)")
        p.add_argument("--seed", type=int, help="global seed; stage seeds derive from it")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key by dotted path, repeatable")

    p = sub.add_parser("synth", help="render a synthetic two-modality dataset")
    common(p)
    p.add_argument("--n-ids", type=int)
    p.add_argument("--per-id", type=int)
    p.add_argument("--overlap", type=float, help="fraction of identities in both modalities")
    p.add_argument("--labeled", choices=["visible", "infrared"])
    p.add_argument("--kind", choices=["train", "eval"], default="train",
                   help="train: unpaired, one side labeled; eval: paired, all labeled")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-diff", help="train the conditional denoiser")
    common(p)
    p.add_argument("--data", help="dataset directory (default: synthesize per config)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-condition", action="store_true",
                   help="train without the high-pass condition (ablation model)")
    p.set_defaults(func=cmd_train_diff)

    p = sub.add_parser("translate", help="translate images to the other modality")
    common(p)
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint")
    p.add_argument("--data", required=True, help="source dataset directory")
    p.add_argument("--target", required=True, choices=["visible", "infrared"])
    p.add_argument("--guidance-weight", type=float)
    p.add_argument("--ddim-steps", type=int)
    p.add_argument("--partial", action="store_true",
                   help="partial-noise baseline (needs a no-condition checkpoint)")
    p.add_argument("--t-start", type=int, help="noising depth for --partial")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("train-reid", help="train the identity classifier")
    common(p)
    p.add_argument("--real", required=True, help="labeled real dataset directory")
    p.add_argument("--generated", help="translated dataset directory (pseudo-labels)")
    p.add_argument("--mode", choices=["ce_only", "gce", "lsr", "gce+lsr"])
    p.add_argument("--label-noise", type=float, default=0.0,
                   help="symmetric noise rate applied to generated labels")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_reid)

    p = sub.add_parser("eval", help="cross-modality retrieval metrics")
    common(p)
    p.add_argument("--reid-ckpt", required=True, help="classifier checkpoint")
    p.add_argument("--data", help="eval dataset directory (default: synthesize)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gap-plot", help="modality gap: high-pass vs low-pass")
    common(p)
    p.add_argument("--n-images", type=int, default=500, help="images per modality per seed")
    p.add_argument("--n-seeds", type=int, default=3)
    p.set_defaults(func=cmd_gap_plot)

    p = sub.add_parser("ablate", help="loss ablation grid on a noisy generated stream")
    common(p)
    p.add_argument("--real", help="labeled real dataset directory")
    p.add_argument("--generated", help="translated dataset directory")
    p.add_argument("--label-noise", type=float, default=0.2)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # bit-for-bit replays need a fixed thread count
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
