import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equnet.data import SyntheticSpec, synth_generate
from equnet.tensor import Tensor
from equnet.training import (
    DATASET_PRESETS,
    AugParams,
    EpochRecord,
    RunLog,
    TrainConfig,
    apply_geometry,
    augment_pair,
    color_stats,
    dice_loss,
    evaluate,
    make_folds,
    make_grouped_folds,
    normalize_colors,
    sample_augmentation,
    train_run,
)
from equnet.unet import build_model, preset
from gradcheck import TOL, gradcheck


# -- dice loss -------------------------------------------------------------------

def test_dice_loss_binary_by_hand():
    logits = Tensor(np.array([[[[0.0, 0.0]]]]), dtype=np.float64)
    loss = dice_loss(logits, np.array([[[1, 0]]]))
    # p = (0.5, 0.5); inter = 0.5; (2*0.5 + 1) / (1 + 1 + 1)
    assert loss.item() == pytest.approx(1 - 2 / 3)


def test_dice_loss_perfect_prediction_is_near_zero():
    target = np.array([[[1, 0], [0, 1]]])
    logits = Tensor(np.where(target, 50.0, -50.0)[:, None], dtype=np.float64)
    assert dice_loss(logits, target).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_loss_semantic_skips_absent_classes():
    target = np.array([[[0, 1]]])
    logits = np.zeros((1, 3, 1, 2))
    logits[0, 0, 0, 0] = logits[0, 1, 0, 1] = 60.0
    assert dice_loss(Tensor(logits, dtype=np.float64), target).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_loss_shape_check():
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 3, 3)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("c", [1, 3])
def test_dice_loss_gradcheck(rng, dtype, c):
    target = rng.integers(0, max(c, 2), (2, 4, 4))
    err = gradcheck(lambda z: dice_loss(z, target), [rng.standard_normal((2, c, 4, 4))], dtype, rng)
    assert err < TOL[dtype]


# -- augmentation ------------------------------------------------------------------

def test_geometry_applies_same_transform_to_image_and_mask(rng):
    img = rng.random((6, 6, 3))
    mask = rng.integers(0, 2, (6, 6))
    for params in [AugParams(k, h, v) for k in range(4) for h in (0, 1) for v in (0, 1)]:
        a, b = apply_geometry(img, params), apply_geometry(mask, params)
        np.testing.assert_array_equal(a[..., 0] > 0.5, apply_geometry(img[..., 0] > 0.5, params))
        assert b.shape == (6, 6)


def test_augmentation_is_label_preserving(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    mask = (img[..., 0] > 0.5).astype(int)
    out_img, out_mask = augment_pair(img, mask, np.random.default_rng(0))
    np.testing.assert_array_equal(out_mask, (out_img[..., 0] > 0.5).astype(int))


def test_augmentation_rejects_non_square():
    with pytest.raises(ValueError):
        augment_pair(np.zeros((4, 6, 3)), np.zeros((4, 6)), np.random.default_rng(0))


def test_augmentation_frequencies():
    rng = np.random.default_rng(0)
    draws = [sample_augmentation(rng) for _ in range(10_000)]
    ks = np.bincount([d.quarter_turns for d in draws], minlength=4) / 10_000
    np.testing.assert_allclose(ks, 0.25, atol=0.02)
    assert abs(np.mean([d.hflip for d in draws]) - 0.5) < 0.02
    assert abs(np.mean([d.vflip for d in draws]) - 0.5) < 0.02


def test_normalize_colors():
    img = np.full((2, 2, 3), 0.5)
    out = normalize_colors(img, (0.25, 0.5, 0.75), (0.5, 1.0, 0.25))
    np.testing.assert_allclose(out[0, 0], [0.5, 0.0, -1.0])


def test_color_stats_match_pixel_pool():
    data = synth_generate(SyntheticSpec(n_images=4, image_size=32, cell_px=3))
    mean, std = color_stats(data)
    pix = np.concatenate([p.image.reshape(-1, 3) for p in data]).astype(np.float64)
    np.testing.assert_allclose(mean, pix.mean(axis=0), rtol=1e-10)
    np.testing.assert_allclose(std, pix.std(axis=0), rtol=1e-10)


# -- folds -------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(n=st.integers(5, 300), seed=st.integers(0, 10_000))
def test_fold_plan_disjoint_covering_deterministic(n, seed):
    plan = make_folds(n, seed)
    allidx = np.concatenate(plan.folds)
    assert sorted(allidx.tolist()) == list(range(n))
    assert max(map(len, plan.folds)) - min(map(len, plan.folds)) <= 1
    again = make_folds(n, seed)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))
    for k in range(5):
        small = plan.train_indices(k, "small")
        large = plan.train_indices(k, "large")
        assert not set(small) & set(plan.test_indices(k))
        assert set(small) <= set(large)
        assert len(small) == sum(int(np.floor(0.1 * len(f))) for j, f in enumerate(plan.folds) if j != k)


def test_grouped_folds_keep_sources_together():
    groups = [f"src{i // 3}" for i in range(30)]
    plan = make_grouped_folds(groups, seed=1)
    for f in plan.folds:
        srcs = {groups[i] for i in f}
        for s in srcs:
            assert all(groups[i] in srcs for i in range(30) if groups[i] == s)
            assert {i for i in range(30) if groups[i] == s} <= set(f.tolist())


def test_too_few_items():
    with pytest.raises(ValueError):
        make_folds(3)


# -- configs and logs ------------------------------------------------------------------

def test_dataset_presets():
    assert DATASET_PRESETS["kvasir"] == TrainConfig(batch_size=8, learning_rate=1e-4, n_epochs=150)
    assert DATASET_PRESETS["urde"].batch_size == 4
    assert DATASET_PRESETS["coco-stuff"].learning_rate == 1e-3
    assert DATASET_PRESETS["isaid"].n_epochs == 250


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(data_setting="medium")


def test_runlog_csv_round_trip(tmp_path):
    log = RunLog()
    log.append(EpochRecord(1, 0.5, 0.9, {"iou": 0.1}))
    log.append(EpochRecord(2, 1.25, 0.8, {"iou": 1 / 3}))
    back = RunLog.read_csv(log.write_csv(tmp_path / "r.csv"))
    assert back.records == log.records


def test_runlog_requires_increasing_time():
    log = RunLog()
    log.append(EpochRecord(1, 1.0, 0.5, {}))
    with pytest.raises(ValueError):
        log.append(EpochRecord(2, 1.0, 0.4, {}))


# -- a tiny end-to-end run -----------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return synth_generate(SyntheticSpec(n_images=20, image_size=32, cell_px=3, seed=2))


def test_train_run_writes_artifacts(tmp_path, tiny_data):
    model = build_model(preset("vanilla", "small", input_hw=32), seed=0)
    cfg = TrainConfig(batch_size=4, n_epochs=3, seed=0)
    res = train_run(model, tiny_data, cfg, fold=1, out_dir=tmp_path)
    assert [r.epoch for r in res.log.records] == [1, 2, 3]
    secs = [r.cumulative_seconds for r in res.log.records]
    assert all(b > a for a, b in zip(secs, secs[1:]))
    assert {"runlog.csv", "final.ckpt", "best.ckpt"} <= {p.name for p in tmp_path.iterdir()}
    assert RunLog.read_csv(tmp_path / "runlog.csv").records == res.log.records


def test_train_run_is_deterministic(tiny_data):
    cfg = TrainConfig(batch_size=4, n_epochs=2, seed=0)
    runs = []
    for _ in range(2):
        model = build_model(preset("vanilla", "small", input_hw=32), seed=0)
        train_run(model, tiny_data, cfg, fold=0)
        runs.append([p.data.copy() for p in model.parameters()])
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_evaluate_per_image(tiny_data):
    model = build_model(preset("vanilla", "small", input_hw=32), seed=0)
    res = evaluate(model, tiny_data[:3])
    assert len(res.per_image) == 3
    assert set(res.mean) == {"dice", "iou", "precision", "recall", "accuracy"}
