import numpy as np
import pytest

from cwcrf import synth
from cwcrf.errors import ArgumentError
from cwcrf.metrics import confusion, iou_report
from cwcrf.selection import oracle_miou
from cwcrf.tensor_io import argmax_labels, validate_probability_map


def test_single_region_is_constant():
    scene = synth.gen_scene(5, 16, 12, 4, region_count=1)
    assert np.unique(scene.labels).size == 1
    assert scene.image.shape == (16, 12, 3) and scene.image.dtype == np.uint8


def test_scene_deterministic():
    a = synth.gen_scene(42, 20, 20, 3, 6)
    b = synth.gen_scene(42, 20, 20, 3, 6)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.image, b.image)
    c = synth.gen_scene(43, 20, 20, 3, 6)
    assert not np.array_equal(a.image, c.image)


def test_every_class_present_when_regions_allow():
    scene = synth.gen_scene(1, 64, 64, 4, 12)
    assert set(np.unique(scene.labels)) == {0, 1, 2, 3}


def test_bad_arguments():
    with pytest.raises(ArgumentError):
        synth.gen_scene(0, 4, 4, 1, 2)
    with pytest.raises(ArgumentError):
        synth.ReliabilityProfile((1.2, 0.5))
    with pytest.raises(ArgumentError):
        synth.ReliabilityProfile((0.5, 0.5), temperature=0)


def test_empirical_reliability():
    scene = synth.gen_scene(7, 64, 64, 4, 12)
    prof = synth.ReliabilityProfile((0.8,) * 4)
    pred = argmax_labels(synth.gen_prediction(scene, prof, 11))
    assert (pred == scene.labels).mean() == pytest.approx(0.8, abs=0.05)


def test_blob_errors_keep_rate():
    scene = synth.gen_scene(8, 64, 64, 4, 12)
    prof = synth.ReliabilityProfile((0.7,) * 4, blob_sigma=3.0)
    pred = argmax_labels(synth.gen_prediction(scene, prof, 2))
    assert (pred == scene.labels).mean() == pytest.approx(0.7, abs=0.05)


def test_perfect_network_is_near_one_hot():
    scene = synth.gen_scene(3, 16, 16, 3, 5)
    p = synth.gen_prediction(scene, synth.ReliabilityProfile((1.0,) * 3, temperature=0.01), 0)
    assert np.array_equal(argmax_labels(p), scene.labels)
    assert p.max(axis=0).min() > 0.99


def test_zero_reliability_two_classes_flips():
    scene = synth.gen_scene(4, 16, 16, 2, 5)
    pred = argmax_labels(synth.gen_prediction(scene, synth.ReliabilityProfile((0.0, 0.0)), 1))
    assert np.array_equal(pred, 1 - scene.labels)


def test_prediction_is_probability_map():
    scene = synth.gen_scene(9, 10, 10, 5, 4)
    validate_probability_map(synth.gen_prediction(scene, synth.ReliabilityProfile((0.5,) * 5), 3))


@pytest.mark.parametrize("spread", [1.0, 0.3])
def test_expected_iou_matches_empirical(spread):
    scene = synth.gen_scene(12, 128, 128, 4, 16)
    rel = (0.9, 0.7, 0.6, 0.8)
    prof = synth.ReliabilityProfile(rel, spread=spread)
    pred = argmax_labels(synth.gen_prediction(scene, prof, 5))
    emp = iou_report(confusion(pred, scene.labels, 4)).per_class
    prior = np.bincount(scene.labels.ravel(), minlength=4) / scene.labels.size
    assert np.allclose(emp, synth.expected_iou(rel, prior, spread), atol=0.05)


def test_default_benchmark_is_complementary():
    bench = synth.gen_benchmark(0, synth.BenchmarkConfig(n_val=3, n_test=1, height=48, width=48))
    m = bench.iou.values
    holders = set(np.argmax(m, axis=0).tolist())
    assert holders == {0, 1, 2}
    assert oracle_miou(m, [0, 1, 2]) > m.mean(axis=1).max()


def test_single_network_benchmark():
    cfg = synth.BenchmarkConfig(profiles=(synth.ReliabilityProfile((0.8,) * 4, name="solo"),), n_val=1, n_test=1,
                                height=16, width=16)
    bench = synth.gen_benchmark(1, cfg)
    assert bench.iou.values.shape == (1, 4)
    assert len(bench.test[0].predictions) == 1


def test_profile_class_count_checked():
    with pytest.raises(ArgumentError):
        synth.BenchmarkConfig(num_classes=3)


def test_benchmark_deterministic():
    cfg = synth.BenchmarkConfig(n_val=1, n_test=1, height=16, width=16)
    a, b = synth.gen_benchmark(5, cfg), synth.gen_benchmark(5, cfg)
    assert np.array_equal(a.iou.values, b.iou.values)
    assert all(np.array_equal(x, y) for x, y in zip(a.test[0].predictions, b.test[0].predictions))


def test_write_and_load(tmp_path):
    cfg = synth.BenchmarkConfig(n_val=2, n_test=1, height=12, width=10)
    bench = synth.gen_benchmark(2, cfg)
    synth.write_benchmark(bench, tmp_path)
    val = synth.load_split(tmp_path, "val")
    assert [it.name for it in val] == ["val_000", "val_001"]
    assert np.array_equal(val[1].scene.labels, bench.val[1].scene.labels)
    assert np.array_equal(val[1].scene.image, bench.val[1].scene.image)
    assert np.array_equal(val[0].predictions[2], bench.val[0].predictions[2].astype(np.float32))
    m = synth.load_benchmark_matrix(tmp_path)
    assert np.allclose(m.values, bench.iou.values, atol=1e-12)
    assert m.network_names == cfg.network_names


def test_config_roundtrip():
    cfg = synth.BenchmarkConfig(height=8)
    assert synth.BenchmarkConfig.from_dict(cfg.to_dict()) == cfg
