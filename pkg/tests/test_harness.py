"""End-to-end harness tests: dataset generation, training, resume,
segmentation, evaluation, visualization, and the CLI shell around them.

Everything runs at toy scale (32px images, 16px patches, 4-channel model)
so the whole file stays under a minute.
"""

import os

import numpy as np
import pytest

from kldd import cli, run
from kldd.checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from kldd.config import RunConfig, apply_overrides
from kldd.data import read_image_file, write_image
from kldd.errors import ConfigError, DataError
from kldd.losses import auc
from kldd.networks import init_model
from kldd.report import read_loss_csv

TINY = {
    "base_channels": "4",
    "time_embed_dim": "8",
    "T": "25",
    "epochs": "8",
    "batch": "4",
    "patch": "16",
    "lr": "1e-3",
    "ensemble": "1",
    "seed": "3",
}


def tiny_cfg(**extra) -> RunConfig:
    merged = dict(TINY)
    merged.update({k: str(v) for k, v in extra.items()})
    return apply_overrides(RunConfig(), merged)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("harness")
    run.gen_dataset(root / "data", n_train=8, n_val=2, size=32, seed=5)
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    cfg = tiny_cfg(data_dir=workspace / "data", out_dir=workspace / "run")
    info = run.train(cfg)
    return cfg, info


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def test_gen_dataset_layout_and_manifest(workspace):
    data = workspace / "data"
    assert sorted(p.name for p in (data / "train" / "images").iterdir()) == [
        f"train_{i:03d}.png" for i in range(8)
    ]
    assert len(list((data / "val" / "masks").iterdir())) == 2
    lines = (data / "manifest.csv").read_text(encoding="utf-8").strip().splitlines()
    assert lines[0] == "filename,seed,split"
    assert len(lines) == 1 + 8 + 2
    # masks decode as strictly binary, images stay inside [0, 1]
    mask = read_image_file(data / "train" / "masks" / "train_000.png")
    assert set(np.unique(mask)) <= {0.0, 1.0}
    img = read_image_file(data / "train" / "images" / "train_000.png")
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_gen_dataset_deterministic(tmp_path):
    run.gen_dataset(tmp_path / "a", n_train=2, n_val=1, size=32, seed=9)
    run.gen_dataset(tmp_path / "b", n_train=2, n_val=1, size=32, seed=9)
    run.gen_dataset(tmp_path / "c", n_train=2, n_val=1, size=32, seed=10)
    name = "train/images/train_001.png"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "c" / name).read_bytes()


def test_gen_dataset_rejects_negative_counts(tmp_path):
    with pytest.raises(ConfigError):
        run.gen_dataset(tmp_path / "x", n_train=-1, n_val=0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_train_writes_log_and_checkpoints(trained):
    cfg, info = trained
    out = cfg.out_dir
    assert info["steps"] == 8 * (8 * 4 // 4)  # epochs * (patches / batch)
    log = read_loss_csv(info["loss_csv"])
    assert list(log) == ["step", "noise", "cldice", "total"]
    assert len(log["step"]) == info["steps"]
    np.testing.assert_array_equal(log["step"], np.arange(1, info["steps"] + 1))
    assert (np.asarray(log["total"]) >= np.asarray(log["noise"])).all()
    assert os.path.exists(os.path.join(out, "last.kldd"))
    assert os.path.exists(info["final"])


def test_train_loss_decreases(trained):
    _, info = trained
    total = read_loss_csv(info["loss_csv"])["total"]
    third = len(total) // 3
    assert np.mean(total[-third:]) < np.mean(total[:third])


def test_final_checkpoint_stores_config_and_state(trained):
    cfg, info = trained
    state = load_checkpoint(info["final"])
    assert state.epoch == cfg.epochs
    assert state.adam_step == info["steps"]
    assert state.moments is not None
    from kldd.config import parse_config

    assert parse_config(state.config_text) == cfg


def test_resume_matches_uninterrupted_run(workspace):
    data = workspace / "data"
    straight = tiny_cfg(data_dir=data, out_dir=workspace / "straight", epochs=4)
    info_a = run.train(straight)

    split = tiny_cfg(data_dir=data, out_dir=workspace / "split", epochs=2)
    run.train(split)
    info_b = run.train(
        resume=workspace / "split" / "last.kldd",
        overrides={"epochs": "4"},
    )

    a = load_checkpoint(info_a["final"])
    b = load_checkpoint(info_b["final"])
    assert a.adam_step == b.adam_step
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    for ma, mb in zip(a.moments, b.moments):
        for k in ma:
            np.testing.assert_array_equal(ma[k], mb[k])
    assert a.rng_state == b.rng_state


def test_train_with_modules_disabled(workspace):
    cfg = tiny_cfg(
        data_dir=workspace / "data",
        out_dir=workspace / "plain",
        epochs=1,
        ld_enabled="false",
        kalman_enabled="false",
        fusion_enabled="false",
    )
    info = run.train(cfg)
    names = list(load_checkpoint(info["final"]).params)
    assert not any(".paired." in n for n in names)
    assert not any("fuse" in n for n in names)


def test_train_requires_config_or_resume():
    with pytest.raises(ConfigError):
        run.train()


def test_train_missing_data_dir(tmp_path):
    cfg = tiny_cfg(data_dir=tmp_path / "absent", out_dir=tmp_path / "out")
    with pytest.raises(DataError):
        run.train(cfg)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def test_segment_outputs(workspace, trained):
    _, info = trained
    pred = workspace / "pred"
    results = run.segment(info["final"], workspace / "data" / "val", pred)
    assert sorted(r["id"] for r in results) == ["val_000", "val_001"]
    for r in results:
        prob = read_image_file(r["prob"])
        mask = read_image_file(r["mask"])
        assert prob.shape == (1, 32, 32)
        assert prob.min() >= 0.0 and prob.max() <= 1.0
        assert set(np.unique(mask)) <= {0.0, 1.0}


def test_segment_is_deterministic(workspace, trained):
    _, info = trained
    a = workspace / "pred_a"
    b = workspace / "pred_b"
    run.segment(info["final"], workspace / "data" / "val", a)
    run.segment(info["final"], workspace / "data" / "val", b)
    for name in ("val_000_prob.png", "val_000_mask.png", "val_001_prob.png"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_segment_threshold_override(workspace, trained):
    _, info = trained
    out = workspace / "pred_t0"
    run.segment(info["final"], workspace / "data" / "val", out,
                overrides={"threshold": "0.0"})
    mask = read_image_file(out / "val_000_mask.png")
    np.testing.assert_array_equal(mask, np.ones_like(mask))


def test_segment_groups_mixed_sizes(tmp_path, trained):
    _, info = trained
    from kldd.data import gen_synthetic_vessels

    inp = tmp_path / "mixed"
    inp.mkdir()
    write_image(inp / "small.png", gen_synthetic_vessels(1, h=32, w=32).image)
    write_image(inp / "large.png", gen_synthetic_vessels(2, h=48, w=48).image)
    results = run.segment(info["final"], inp, tmp_path / "mixed_out")
    shapes = {r["id"]: read_image_file(r["prob"]).shape for r in results}
    assert shapes == {"small": (1, 32, 32), "large": (1, 48, 48)}


def test_segment_empty_input(tmp_path, trained):
    _, info = trained
    empty = tmp_path / "none"
    empty.mkdir()
    with pytest.raises(DataError):
        run.segment(info["final"], empty, tmp_path / "out")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def line_mask(h, w, row):
    m = np.zeros((h, w))
    m[row, 2:-2] = 1.0
    return m


def test_evaluate_perfect_prediction(tmp_path):
    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    for i in range(2):
        mask = line_mask(24, 24, 6 + 8 * i)
        write_image(pred / f"img{i}_mask.png", mask)
        write_image(gt / f"img{i}.png", mask)
    per_image, agg = run.evaluate(pred, gt)
    assert len(per_image) == 2
    for _, rep in per_image:
        assert rep.dice == 1.0
        assert rep.cl_dice >= 0.9999
    assert agg.dice == 1.0
    assert agg.auc == 1.0
    assert agg.cl_dice >= 0.9999


def test_evaluate_pools_counts_not_means(tmp_path):
    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    # image 0: half the truth covered by an all-ones prediction
    gt0 = np.zeros((8, 8))
    gt0[:, :4] = 1.0
    write_image(gt / "a.png", gt0)
    write_image(pred / "a_mask.png", np.ones((8, 8)))
    # image 1: exact match on a sparse truth
    gt1 = np.zeros((8, 8))
    gt1[0, :] = 1.0
    write_image(gt / "b.png", gt1)
    write_image(pred / "b_mask.png", gt1)

    per_image, agg = run.evaluate(pred, gt)
    dice_by_id = {name: rep.dice for name, rep in per_image}
    assert abs(dice_by_id["a"] - 2 / 3) < 1e-12
    assert dice_by_id["b"] == 1.0
    # pooled counts: tp=40, fp=32, fn=0 -> dice 80/112, not the mean of 2/3 and 1
    assert abs(agg.dice - 80 / 112) < 1e-12
    assert abs(agg.sen - 1.0) < 1e-12
    assert abs(agg.spe - 56 / 88) < 1e-12
    # centerline has no count decomposition; it averages over images
    cl_vals = [rep.cl_dice for _, rep in per_image]
    assert abs(agg.cl_dice - np.mean(cl_vals)) < 1e-12
    # pooled ranking feeds the aggregate AUC
    scores = np.concatenate([np.ones(64), gt1.ravel()])
    labels = np.concatenate([gt0.ravel(), gt1.ravel()]).astype(int)
    assert abs(agg.auc - auc(scores, labels)) < 1e-12


def test_evaluate_uses_prob_scores_when_present(tmp_path):
    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    truth = line_mask(16, 16, 8)
    write_image(gt / "x.png", truth)
    write_image(pred / "x_mask.png", truth)
    # a probability map that ranks every vessel pixel above every background
    prob = truth * 0.75 + 0.1
    write_image(pred / "x_prob.png", prob)
    _, agg = run.evaluate(pred, gt)
    assert agg.auc == 1.0


def test_evaluate_descends_into_masks_subfolder(tmp_path, workspace):
    pred = tmp_path / "pred"
    pred.mkdir()
    val = workspace / "data" / "val"
    for p in sorted((val / "masks").iterdir()):
        write_image(pred / f"{p.stem}_mask.png", read_image_file(p))
    _, agg = run.evaluate(pred, val)
    assert agg.dice == 1.0


def test_evaluate_error_cases(tmp_path):
    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    with pytest.raises(DataError, match="no .*predictions"):
        run.evaluate(pred, gt)
    write_image(pred / "a_mask.png", np.zeros((8, 8)))
    with pytest.raises(DataError, match="no ground truth"):
        run.evaluate(pred, gt)
    write_image(gt / "a.png", np.zeros((10, 10)))
    with pytest.raises(DataError, match="vs"):
        run.evaluate(pred, gt)


# ---------------------------------------------------------------------------
# receptive-field visualization
# ---------------------------------------------------------------------------


def make_checkpoint(path, cfg, mutate=None):
    bundle = init_model(cfg.model_config(), seed=cfg.seed)
    if mutate is not None:
        mutate(bundle)
    state = CheckpointState(
        config_text=cfg.to_text(),
        epoch=0,
        adam_step=0,
        rng_state=np.random.default_rng(cfg.seed).bit_generator.state,
        params={k: t.data.copy() for k, t in bundle.named_parameters().items()},
        moments=None,
    )
    save_checkpoint(path, state)
    return path


def read_taps(csv_path):
    import csv as csv_mod

    with open(csv_path, newline="", encoding="utf-8") as fh:
        return list(csv_mod.DictReader(fh))


def test_viz_rf_fresh_model_is_collinear(tmp_path, workspace):
    # offset predictors start at zero, so taps sit on the undeformed line
    # and both chain modes agree exactly
    ckpt = make_checkpoint(tmp_path / "fresh.kldd", tiny_cfg())
    image = workspace / "data" / "val" / "images" / "val_000.png"
    info = run.viz_rf(ckpt, image, [(16, 16), (5, 20)], tmp_path / "rf")
    rows = read_taps(info["csv"])
    assert len(rows) == 9 * 2 * 2 * 2
    assert info["rows"] == len(rows)
    for row in rows:
        r, c, j = int(row["row"]), int(row["col"]), int(row["tap"])
        if row["orientation"] == "horizontal":
            assert float(row["tap_col"]) == c + j
            assert float(row["tap_row"]) == r
        else:
            assert float(row["tap_row"]) == r + j
            assert float(row["tap_col"]) == c


def test_viz_rf_kalman_bends_less(tmp_path, workspace):
    # push every raw offset toward +max_offset; gains below one must then
    # pull each smoothed tap strictly closer to the center line
    def bend(bundle):
        paired = bundle.ext_stages[0].b0.paired
        for layer in (paired.horizontal, paired.vertical):
            layer.pred_b.data[:] = 4.0

    ckpt = make_checkpoint(tmp_path / "bent.kldd", tiny_cfg(), mutate=bend)
    image = workspace / "data" / "val" / "images" / "val_000.png"
    info = run.viz_rf(ckpt, image, [(16, 16)], tmp_path / "rf")
    rows = read_taps(info["csv"])
    by_key = {}
    for row in rows:
        key = (row["orientation"], int(row["tap"]), row["mode"])
        axis = "tap_row" if row["orientation"] == "horizontal" else "tap_col"
        center = 16
        by_key[key] = abs(float(row[axis]) - center)
    for orientation in ("horizontal", "vertical"):
        for j in range(-4, 5):
            kal = by_key[(orientation, j, "kalman")]
            cum = by_key[(orientation, j, "cumulative")]
            if j == 0:
                assert kal == cum == 0.0
            else:
                assert kal < cum


def test_viz_rf_rejects_bad_inputs(tmp_path, workspace):
    image = workspace / "data" / "val" / "images" / "val_000.png"
    plain = make_checkpoint(tmp_path / "plain.kldd", tiny_cfg(ld_enabled="false"))
    with pytest.raises(ConfigError, match="deformable"):
        run.viz_rf(plain, image, [(1, 1)], tmp_path / "rf")
    ckpt = make_checkpoint(tmp_path / "ok.kldd", tiny_cfg())
    with pytest.raises(ConfigError, match="outside"):
        run.viz_rf(ckpt, image, [(40, 0)], tmp_path / "rf")


# ---------------------------------------------------------------------------
# model loading guards
# ---------------------------------------------------------------------------


def test_load_model_rejects_mismatched_weights(tmp_path):
    path = make_checkpoint(tmp_path / "w.kldd", tiny_cfg())
    state = load_checkpoint(path)
    # drop one parameter and rewrite: the rebuilt model must refuse it
    params = dict(state.params)
    params.pop(sorted(params)[0])
    broken = CheckpointState(state.config_text, state.epoch, state.adam_step,
                             state.rng_state, params, None)
    save_checkpoint(tmp_path / "broken.kldd", broken)
    with pytest.raises(ConfigError, match="does not match"):
        run.load_model(tmp_path / "broken.kldd")


# ---------------------------------------------------------------------------
# CLI shell
# ---------------------------------------------------------------------------


def test_cli_pipeline(tmp_path):
    data = tmp_path / "data"
    out = tmp_path / "run"
    assert cli.main(["gen-data", "--out", str(data), "--n-train", "4",
                     "--n-val", "1", "--size", "32", "--seed", "2"]) == 0
    args = ["train", "--data-dir", str(data), "--out-dir", str(out),
            "--epochs", "1"]
    for key, value in TINY.items():
        if key != "epochs":
            args += [f"--{key.replace('_', '-')}", value]
    assert cli.main(args) == 0
    assert (out / "loss.png").exists()

    pred = tmp_path / "pred"
    assert cli.main(["segment", "--checkpoint", str(out / "final.kldd"),
                     "--input", str(data / "val"), "--out", str(pred)]) == 0
    assert (pred / "val_000_prob.png").exists()

    metrics = tmp_path / "metrics"
    assert cli.main(["eval", "--pred", str(pred), "--gt", str(data / "val"),
                     "--out", str(metrics)]) == 0
    assert (metrics / "metrics.csv").exists()
    assert (metrics / "metrics.png").exists()

    rf = tmp_path / "rf"
    assert cli.main(["viz-rf", "--checkpoint", str(out / "final.kldd"),
                     "--image", str(data / "val" / "images" / "val_000.png"),
                     "--position", "16,16", "--out", str(rf)]) == 0
    assert (rf / "taps.csv").exists()
    assert (rf / "overlay.png").exists()


def test_cli_exit_codes(tmp_path):
    assert cli.main(["train", "--T", "0"]) == 2
    assert cli.main(["train", "--data-dir", str(tmp_path / "absent"),
                     "--out-dir", str(tmp_path / "out")]) == 3
    assert cli.main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path)]) == 3
    assert cli.main(["viz-rf", "--checkpoint", "x", "--image", "y",
                     "--position", "1;2", "--out", str(tmp_path)]) == 2


def test_cli_thread_cap(monkeypatch, tmp_path):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("KLDD_THREADS", "3")
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"),
                     "--n-train", "1", "--n-val", "0", "--size", "32"]) == 0
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        assert os.environ[var] == "3"


def test_cli_thread_cap_rejects_garbage(monkeypatch):
    monkeypatch.setenv("KLDD_THREADS", "many")
    assert cli.main(["gen-data", "--out", "/tmp/never"]) == 2
