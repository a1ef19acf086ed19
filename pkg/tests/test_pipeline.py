import numpy as np
import pytest

from nodecorr.exceptions import ConfigError, InsufficientPointsError, ShapeError, StateError, TrainingError, VersionError
from nodecorr.graph import PointCloud
from nodecorr.pipeline import (
    NUM_CLASSES,
    VARIANTS,
    BlockConfig,
    SegmentationModel,
    confusion_matrix,
    cross_entropy,
    evaluate,
    fit,
    gen_dataset,
    gen_synthetic_scene,
    loss_and_grads,
    parameter_count,
    scene_layout,
    scores_from_confusion,
    segmentation_scores,
)
from nodecorr.pipeline.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from nodecorr.verify import gradcheck_model


def small_config(variant="full", **kw):
    return BlockConfig(channels=kw.pop("channels", 8), k=kw.pop("k", 4), dilation=kw.pop("dilation", 1),
                       reduction=kw.pop("reduction", 2), variant=variant, **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        BlockConfig(variant="bogus")
    with pytest.raises(ConfigError):
        BlockConfig(channels=30, reduction=8)
    with pytest.raises(ConfigError):
        BlockConfig(k=0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_parameter_count_formula_matches_store(variant):
    for c, r in ((8, 2), (32, 8), (64, 8)):
        cfg = BlockConfig(channels=c, reduction=r, variant=variant)
        for in_dim, n_cls in ((3, 4), (6, 13)):
            model = SegmentationModel(cfg, in_dim, n_cls)
            assert parameter_count(cfg, in_dim, n_cls)["total"] == model.n_params()


def test_parameter_count_hand_computed():
    # C=8, r=2, h=4, 3 inputs, 4 classes
    counts = parameter_count(BlockConfig(channels=8, reduction=2), 3, 4)
    assert counts["encoder"] == 3 * 8 + 8 + 2 * 72
    assert counts["head"] == 8 * 4 + 4 + 4 * 4 + 4
    assert counts["self"] == 2 * 8 * 4 + 4 + 8 + 1
    assert counts["local"] == counts["nonlocal"] == 2 * (8 * 4 + 4)
    assert counts["afa"] == 2 * 2 * (2 * 8 * 4 + 4 + 8)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_share_the_backbone_init(variant):
    cloud = gen_synthetic_scene(0, 128)
    base = SegmentationModel(small_config("baseline"), 3, NUM_CLASSES, seed=3)
    other = SegmentationModel(small_config(variant), 3, NUM_CLASSES, seed=3)
    assert np.array_equal(base.encode(cloud.features()), other.encode(cloud.features()))
    for name in ("head.0.weight", "head.1.weight"):
        assert np.array_equal(base.store[name], other.store[name])
    assert other.logits(cloud).shape == (128, NUM_CLASSES)


def test_zero_correlation_self_only_equals_baseline():
    cloud = gen_synthetic_scene(0, 128)
    base = SegmentationModel(small_config("baseline"), 3, NUM_CLASSES, seed=3)
    sc = SegmentationModel(small_config("self_only"), 3, NUM_CLASSES, seed=3, zero_correlation=True)
    assert np.array_equal(base.logits(cloud), sc.logits(cloud))


@pytest.mark.parametrize("variant", VARIANTS)
def test_model_gradients(variant):
    rng = np.random.default_rng(VARIANTS.index(variant))
    assert gradcheck_model(rng, variant) <= 1e-5


def test_model_backward_requires_cache():
    model = SegmentationModel(small_config(), 3, 4)
    with pytest.raises(StateError):
        model.backward(np.zeros((4, 4)), None)


def test_model_input_checks():
    model = SegmentationModel(small_config(k=8, dilation=2), 3, 4)
    tiny = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
    with pytest.raises(InsufficientPointsError):
        model.forward(tiny)
    with pytest.raises(ShapeError):
        model.forward(PointCloud(np.zeros((40, 3)), np.zeros((40, 2))))


def test_cross_entropy_values():
    loss, grad = cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert abs(loss - np.log(4)) < 1e-15
    assert np.allclose(grad.sum(axis=1), 0, atol=1e-16)
    loss, _ = cross_entropy(np.array([[100.0, 0.0]]), np.array([0]))
    assert loss < 1e-40


def test_adam_zero_lr_leaves_parameters_bit_identical():
    model = SegmentationModel(small_config(), 3, 4, seed=1)
    before = {k: v.copy() for k, v in model.store.items()}
    fit(model, [gen_synthetic_scene(0, 128)], steps=3, lr=0.0)
    for name, value in model.store.items():
        assert np.array_equal(value, before[name])


def test_adam_first_step_matches_closed_form():
    model = SegmentationModel(small_config(), 3, 4, seed=1)
    cloud = gen_synthetic_scene(0, 128)
    before = {k: v.copy() for k, v in model.store.items()}
    grads = loss_and_grads(model, cloud)[1]
    fit(model, [cloud], steps=1, lr=1e-3)
    # bias correction makes the first update lr * g / (|g| + eps)
    for name, g in grads.items():
        expected = before[name] - 1e-3 * g / (np.abs(g) + 1e-8)
        assert np.allclose(model.store[name], expected, rtol=0, atol=1e-15), name


def test_training_reduces_loss_and_is_deterministic():
    clouds = gen_dataset(0, 3, 128)
    logs = []
    params = []
    for _ in range(2):
        model = SegmentationModel(small_config(), 3, NUM_CLASSES, seed=2)
        logs.append(fit(model, clouds, steps=60, lr=1e-2, seed=2).losses)
        params.append(dumps(model))
    assert logs[0] == logs[1]
    assert params[0] == params[1]
    assert np.mean(logs[0][-10:]) < np.mean(logs[0][:10])


def test_training_errors():
    model = SegmentationModel(small_config(), 3, 4)
    with pytest.raises(TrainingError):
        fit(model, [], steps=1)
    with pytest.raises(TrainingError):
        fit(model, [PointCloud(np.random.default_rng(0).normal(size=(20, 3)))], steps=1)
    bad = PointCloud(np.random.default_rng(0).normal(size=(20, 3)), labels=np.full(20, 7))
    with pytest.raises(TrainingError):
        fit(model, [bad], steps=1)


def test_metrics_examples():
    truth = np.array([0, 0, 1, 1])
    perfect = segmentation_scores([truth], [truth], 2)
    assert perfect == {"OA": 1.0, "mAcc": 1.0, "mIoU": 1.0}
    cm = confusion_matrix(truth, np.array([0, 1, 1, 1]), 2)
    assert cm.tolist() == [[1, 1], [0, 2]]
    s = scores_from_confusion(cm)
    assert s["OA"] == 0.75
    assert s["mAcc"] == 0.75
    assert abs(s["mIoU"] - (0.5 + 2 / 3) / 2) < 1e-15
    with pytest.raises(ValueError):
        scores_from_confusion(np.zeros((2, 2), dtype=np.int64))


def test_metrics_absent_class_excluded():
    s = segmentation_scores([np.array([0, 0])], [np.array([0, 0])], 3)
    assert s["mIoU"] == 1.0 and s["mAcc"] == 1.0


def test_evaluate_pools_points():
    model = SegmentationModel(small_config(), 3, NUM_CLASSES)
    clouds = gen_dataset(1, 2, 96)
    res = evaluate(clouds, model, per_cloud=True)
    assert set(res) >= {"OA", "mAcc", "mIoU", "per_cloud"}
    assert len(res["per_cloud"]) == 2
    with pytest.raises(ValueError):
        evaluate([], model)


def test_synthetic_scene_is_deterministic_and_labelled():
    a, b = gen_synthetic_scene(5, 256, 0.5), gen_synthetic_scene(5, 256, 0.5)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.labels, b.labels)
    assert a.n_points == 256 and a.labels.max() < NUM_CLASSES
    layout = scene_layout(5, 0.5)
    assert 2 <= len(layout.primitives) <= 4
    assert np.isclose(layout.mixture().sum(), 1.0)
    assert not np.array_equal(gen_synthetic_scene(6, 256).positions, a.positions)


def test_difficulty_zero_is_separable_by_position():
    for seed in range(20):
        layout = scene_layout(seed, 0.0)
        cells = [tuple(np.sign(p.center[:2])) for p in layout.primitives]
        assert len(set(cells)) == len(cells)
        cloud = gen_synthetic_scene(seed, 512, 0.0)
        # the quadrant of a point determines its label within the scene
        quadrant = (cloud.positions[:, 0] > 0) * 2 + (cloud.positions[:, 1] > 0)
        for q in np.unique(quadrant):
            assert np.unique(cloud.labels[quadrant == q]).size == 1


def test_synthetic_argument_checks():
    with pytest.raises(ValueError):
        gen_synthetic_scene(0, 10)
    with pytest.raises(ValueError):
        gen_synthetic_scene(0, 512, 1.5)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = SegmentationModel(small_config(), 3, 4, seed=7)
    fit(model, [gen_synthetic_scene(0, 64)], steps=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert dumps(loaded) == path.read_bytes()
    for name, value in model.store.items():
        assert np.array_equal(value.view(np.uint8), loaded.store[name].view(np.uint8))
    cloud = gen_synthetic_scene(1, 64)
    assert np.array_equal(model.logits(cloud), loaded.logits(cloud))


def test_checkpoint_float32(tmp_path):
    model = SegmentationModel(small_config(), 3, 4, seed=7, dtype=np.float32)
    loaded = loads(dumps(model))
    assert loaded.dtype == np.float32
    assert dumps(loaded) == dumps(model)


def test_checkpoint_rejects_bad_data():
    data = dumps(SegmentationModel(small_config(), 3, 4))
    assert data.startswith(MAGIC)
    with pytest.raises(VersionError):
        loads(b"NOTACKPT" + data[8:])
    bumped = bytearray(data)
    bumped[8] = 99
    with pytest.raises(VersionError):
        loads(bytes(bumped))
    with pytest.raises(VersionError):
        loads(data[:-3])
    with pytest.raises(VersionError):
        loads(data + b"\0")
    with pytest.raises(VersionError):
        loads(data, expect={"num_classes": 5})
