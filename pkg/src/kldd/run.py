"""Run orchestration: dataset generation, training, segmentation,
evaluation, and receptive-field visualization.

Every entry point is a plain function over paths and RunConfig values so
the CLI stays a thin argument-parsing shell and tests can drive runs
directly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, parse_config
from .data import (
    SampleRecord,
    augment,
    extract_patches,
    gen_synthetic_vessels,
    load_folder,
    load_images,
    mask_to_diffusion,
    read_image_file,
    reassemble,
    write_image,
)
from .deform import predict_offsets
from .diffusion import build_schedule, q_sample, sample_loop
from .errors import ConfigError, DataError, NumericError
from .kalman import ChainMode, tap_coordinates
from .losses import ConfusionCounts, MetricsReport, auc, confusion, full_report, loss_components, scalar_metrics
from .networks import ModelBundle, denoiser_forward, extractor_forward, init_model
from .optim import Adam
from . import report

LAST_CHECKPOINT = "last.kldd"
FINAL_CHECKPOINT = "final.kldd"
SEGMENT_STREAM = 101


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def gen_dataset(out_dir, n_train: int, n_val: int, size: int = 64,
                seed: int = 0, n_curves: int = 4) -> dict:
    """Write train/ and val/ splits of synthetic pairs plus a seed manifest."""
    if n_train < 0 or n_val < 0:
        raise ConfigError("sample counts must be non-negative")
    out_dir = Path(out_dir)
    children = np.random.SeedSequence(seed).spawn(n_train + n_val)
    manifest = []
    idx = 0
    for split, count in (("train", n_train), ("val", n_val)):
        img_dir = out_dir / split / "images"
        mask_dir = out_dir / split / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            child_seed = int(children[idx].generate_state(1, np.uint64)[0])
            rec = gen_synthetic_vessels(child_seed, h=size, w=size, n_curves=n_curves)
            name = f"{split}_{i:03d}.png"
            write_image(img_dir / name, rec.image)
            write_image(mask_dir / name, rec.mask)
            manifest.append((name, child_seed, split))
            idx += 1
    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("filename", "seed", "split"))
        writer.writerows(manifest)
    return {"out_dir": str(out_dir), "n_train": n_train, "n_val": n_val}


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def _apply_params(bundle: ModelBundle, params: dict[str, np.ndarray]) -> None:
    named = bundle.named_parameters()
    missing = sorted(set(named) - set(params))
    extra = sorted(set(params) - set(named))
    if missing or extra:
        raise ConfigError(
            f"checkpoint does not match the configured model "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, tensor in named.items():
        if tensor.shape != params[name].shape:
            raise ConfigError(
                f"checkpoint parameter {name} has shape {params[name].shape}, "
                f"model expects {tensor.shape}"
            )
        tensor.data[...] = params[name]


def _snapshot(cfg: RunConfig, bundle: ModelBundle, adam: Adam,
              rng: np.random.Generator, epoch: int) -> CheckpointState:
    named = bundle.named_parameters()
    return CheckpointState(
        config_text=cfg.to_text(),
        epoch=epoch,
        adam_step=adam.step_count,
        rng_state=rng.bit_generator.state,
        params={k: t.data.copy() for k, t in named.items()},
        moments=({k: m.copy() for k, m in adam.m.items()},
                 {k: v.copy() for k, v in adam.v.items()}),
    )


def _schedule_for(cfg: RunConfig):
    try:
        return build_schedule(cfg.T)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_model(checkpoint_path) -> tuple[RunConfig, ModelBundle, CheckpointState]:
    """Rebuild the configured model with a checkpoint's weights applied."""
    state = load_checkpoint(checkpoint_path)
    cfg = parse_config(state.config_text)
    bundle = init_model(cfg.model_config(), seed=cfg.seed)
    _apply_params(bundle, state.params)
    return cfg, bundle, state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _patch_pool(records: list[SampleRecord], patch: int) -> list[SampleRecord]:
    pool = []
    for rec in records:
        imgs, grid = extract_patches(rec.image, patch, patch)
        masks, _ = extract_patches(rec.mask, patch, patch)
        for j in range(len(grid.offsets)):
            pool.append(SampleRecord(f"{rec.id}#{j}", imgs[j], masks[j]))
    if not pool:
        raise DataError("training set produced no patches")
    return pool


def train(cfg: RunConfig | None = None, resume=None,
          overrides: dict[str, str] | None = None) -> dict:
    """Train per the config; optionally continue from a checkpoint.

    A resume ignores cfg and rebuilds the run from the checkpoint's own
    config, with any overrides applied on top (model-shape changes are
    rejected when the stored weights no longer fit). Writes per-step loss
    rows to out_dir/loss.csv, refreshes out_dir/last.kldd after every
    epoch, and writes out_dir/final.kldd when the epoch budget completes.
    A non-finite loss aborts naming the step.
    """
    if resume is not None:
        state = load_checkpoint(resume)
        cfg = parse_config(state.config_text)
        if overrides:
            cfg = apply_overrides(cfg, overrides)
    elif cfg is None:
        raise ConfigError("train needs a config or a checkpoint to resume from")
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_root = Path(cfg.data_dir)
    train_dir = data_root / "train" if (data_root / "train").is_dir() else data_root
    records = load_folder(train_dir)
    if not records:
        raise DataError(f"no training records under {train_dir}")
    pool = _patch_pool(records, cfg.patch)

    sched = _schedule_for(cfg)
    bundle = init_model(cfg.model_config(), seed=cfg.seed)
    adam = Adam(bundle.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    if resume is not None:
        _apply_params(bundle, state.params)
        if state.moments is not None:
            m, v = state.moments
            for k in adam.m:
                adam.m[k][...] = m[k]
                adam.v[k][...] = v[k]
        adam.step_count = state.adam_step
        rng.bit_generator.state = state.rng_state
        start_epoch = state.epoch

    loss_csv = out_dir / "loss.csv"
    global_step = adam.step_count
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(pool))
        rows = []
        for lo in range(0, len(pool), cfg.batch):
            idxs = order[lo:lo + cfg.batch]
            imgs = np.empty((len(idxs), 1, cfg.patch, cfg.patch))
            masks = np.empty_like(imgs)
            for row, idx in enumerate(idxs):
                aug = augment(pool[idx], rng)
                imgs[row] = aug.image
                masks[row] = aug.mask
            t = int(rng.integers(1, cfg.T + 1))
            eps = rng.standard_normal(imgs.shape)
            x_t = q_sample(mask_to_diffusion(masks), t, eps, sched).data
            global_step += 1
            try:
                with ad.recording() as tape:
                    feats = extractor_forward(bundle, Tensor(imgs))
                    eps_pred = denoiser_forward(bundle, Tensor(x_t), t, feats)
                    parts = loss_components(
                        Tensor(eps), eps_pred, Tensor(x_t), t, Tensor(masks),
                        sched, cldice_weight=cfg.cldice_weight,
                    )
                total = parts["total"].item()
                if not np.isfinite(total):
                    raise NumericError("loss is non-finite")
                bundle.zero_grad()
                tape.backward(parts["total"])
                adam.step()
            except NumericError as exc:
                raise NumericError(f"training step {global_step}: {exc}") from exc
            rows.append((global_step, parts["noise"].item(),
                         parts["cldice"].item(), total))
        report.append_loss_rows(loss_csv, rows)
        save_checkpoint(out_dir / LAST_CHECKPOINT,
                        _snapshot(cfg, bundle, adam, rng, epoch + 1))
    save_checkpoint(out_dir / FINAL_CHECKPOINT,
                    _snapshot(cfg, bundle, adam, rng, cfg.epochs))
    return {
        "steps": global_step,
        "loss_csv": str(loss_csv),
        "last": str(out_dir / LAST_CHECKPOINT),
        "final": str(out_dir / FINAL_CHECKPOINT),
    }


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def segment(checkpoint_path, input_dir, out_dir, overrides: dict | None = None) -> list[dict]:
    """Sample masks for every image under input_dir.

    Patches are batched across same-sized images; each of the ensemble
    passes runs the full reverse process from its own derived seed. The
    averaged estimates land as <id>_prob.png and thresholded
    <id>_mask.png under out_dir.
    """
    cfg, bundle, _ = load_model(checkpoint_path)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    sched = _schedule_for(cfg)
    images = load_images(input_dir)
    if not images:
        raise DataError(f"no images under {input_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    groups: dict[tuple, list[int]] = {}
    for i, (_, img) in enumerate(images):
        groups.setdefault(img.shape[1:], []).append(i)

    probs: dict[int, np.ndarray] = {}
    for gi, (shape, members) in enumerate(sorted(groups.items())):
        tiles = []
        grids = []
        for i in members:
            patches, grid = extract_patches(images[i][1], cfg.patch, cfg.patch)
            tiles.append(patches)
            grids.append(grid)
        counts = [len(g.offsets) for g in grids]
        batch = np.concatenate(tiles, axis=0)
        with ad.no_grad():
            feats = extractor_forward(bundle, Tensor(batch))

        def eps_fn(xt, t, cond):
            return denoiser_forward(bundle, xt, t, feats)

        acc = np.zeros((batch.shape[0], 1, cfg.patch, cfg.patch))
        for m in range(cfg.ensemble):
            seed_m = int(
                np.random.SeedSequence(
                    entropy=cfg.seed, spawn_key=(SEGMENT_STREAM, gi, m)
                ).generate_state(1, np.uint64)[0]
            )
            acc += sample_loop(eps_fn, batch, sched, seed_m)
        prob = (acc / cfg.ensemble + 1.0) / 2.0
        offset = 0
        for i, grid, count in zip(members, grids, counts):
            probs[i] = reassemble(prob[offset:offset + count], grid)
            offset += count

    results = []
    for i, (name, _) in enumerate(images):
        prob = np.clip(probs[i], 0.0, 1.0)
        mask = (prob >= cfg.threshold).astype(np.float64)
        prob_path = out_dir / f"{name}_prob.png"
        mask_path = out_dir / f"{name}_mask.png"
        write_image(prob_path, prob)
        write_image(mask_path, mask)
        results.append({"id": name, "prob": str(prob_path), "mask": str(mask_path)})
    return results


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _read_mask_file(path: Path) -> np.ndarray:
    arr = read_image_file(path)
    return (arr > (127.0 / 255.0)).astype(np.float64)


def evaluate(pred_dir, gt_dir, out_csv=None, fig_png=None) -> tuple[list, MetricsReport]:
    """Score predicted masks against ground truth, per image plus pooled.

    The aggregate row pools confusion counts and ranks pooled scores for
    AUC; the centerline score is averaged over images (it has no count
    decomposition to pool).
    """
    pred_dir = Path(pred_dir)
    gt_root = Path(gt_dir)
    if (gt_root / "masks").is_dir():
        gt_root = gt_root / "masks"
    mask_files = sorted(pred_dir.glob("*_mask.png"))
    if not mask_files:
        raise DataError(f"no *_mask.png predictions under {pred_dir}")

    per_image = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    all_scores = []
    all_labels = []
    cl_values = []
    for mask_path in mask_files:
        stem = mask_path.name[:-len("_mask.png")]
        gt_path = next(
            (p for p in (gt_root / f"{stem}{s}" for s in (".png", ".pgm", ".ppm")) if p.is_file()),
            None,
        )
        if gt_path is None:
            raise DataError(f"no ground truth for prediction {mask_path.name}")
        pred = _read_mask_file(mask_path)[0]
        gt = _read_mask_file(gt_path)[0]
        if pred.shape != gt.shape:
            raise DataError(f"{mask_path.name}: prediction {pred.shape} vs truth {gt.shape}")
        prob_path = pred_dir / f"{stem}_prob.png"
        scores = read_image_file(prob_path)[0] if prob_path.is_file() else pred
        rep = full_report(pred, gt, scores)
        per_image.append((stem, rep))
        pooled = pooled + confusion(pred, gt)
        all_scores.append(scores.ravel())
        all_labels.append(gt.ravel())
        cl_values.append(rep.cl_dice)

    base = scalar_metrics(pooled)
    aggregate = MetricsReport(
        acc=base["acc"], sen=base["sen"], spe=base["spe"],
        auc=auc(np.concatenate(all_scores), np.concatenate(all_labels).astype(int)),
        dice=base["dice"], iou=base["iou"],
        cl_dice=float(np.mean(cl_values)),
    )
    if out_csv is not None:
        report.write_metrics_csv(out_csv, per_image, aggregate)
    if fig_png is not None:
        report.save_metrics_figure(per_image, aggregate, fig_png)
    return per_image, aggregate


# ---------------------------------------------------------------------------
# receptive-field visualization
# ---------------------------------------------------------------------------


def viz_rf(checkpoint_path, image_path, positions: list[tuple[int, int]], out_dir) -> dict:
    """Emit tap coordinates and an overlay for the first deformable layer.

    Both chain modes are rendered side by side for each orientation, so a
    CSV holds 9 taps x positions x 2 orientations x 2 modes rows.
    """
    cfg, bundle, _ = load_model(checkpoint_path)
    if not cfg.ld_enabled:
        raise ConfigError("checkpoint model has no deformable layers to visualize")
    image = read_image_file(image_path)
    _, h, w = image.shape
    for r, c in positions:
        if not (0 <= r < h and 0 <= c < w):
            raise ConfigError(f"position ({r}, {c}) outside {h}x{w} image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paired = bundle.ext_stages[0].b0.paired
    rows = []
    with ad.no_grad():
        for layer, orient_name in ((paired.horizontal, "horizontal"),
                                   (paired.vertical, "vertical")):
            deltas_map = predict_offsets(layer, Tensor(image[None])).data[0]
            for r, c in positions:
                deltas = deltas_map[:, r, c]
                for mode in (ChainMode.KALMAN, ChainMode.CUMULATIVE):
                    taps = tap_coordinates(
                        (r, c), layer.orientation,
                        (deltas[:4], deltas[4:]), layer.kalman, mode,
                    )
                    for j, (tr, tc) in zip(range(-4, 5), taps):
                        rows.append({
                            "row": r, "col": c, "mode": mode.name.lower(),
                            "orientation": orient_name, "tap": j,
                            "tap_row": float(tr), "tap_col": float(tc),
                        })
    csv_path = out_dir / "taps.csv"
    png_path = out_dir / "overlay.png"
    report.write_taps_csv(csv_path, rows)
    report.save_rf_overlay(image[0], rows, png_path)
    return {"csv": str(csv_path), "overlay": str(png_path), "rows": len(rows)}
