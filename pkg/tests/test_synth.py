import numpy as np
import pytest

from dhr.evaluation import confusion, miou
from dhr.synth import SynthConfig, degrade_base_mask, generate_scene, make_prototypes, make_rng
from dhr.tensors import LabelMask, argmax_labels
from dhr.utils import ConfigError, assert_eq, not_none


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(minor_area_frac=(0.0, 0.1))
    with pytest.raises(ConfigError):
        SynthConfig(minor_area_frac=(0.2, 0.1))
    with pytest.raises(ConfigError):
        SynthConfig(n_superclasses=(1, 3))
    with pytest.raises(ConfigError):
        SynthConfig(absorb_prob=1.5)
    with pytest.raises(ConfigError):
        SynthConfig(feature_stride=3)
    with pytest.raises(ConfigError):
        SynthConfig(feature_dim_us=2)
    assert_eq(SynthConfig(minor_area_frac=[0.02, 0.05]).minor_area_frac, (0.02, 0.05))
    assert_eq(SynthConfig().num_classes, 10)
    assert_eq(len(SynthConfig().class_names()), 10)
    assert_eq(repr(SynthConfig(seed=3)), "SynthConfig(seed=3)")


def test_rng_streams_are_independent():
    a = make_rng(42, 0, "uss").random(4)
    assert np.array_equal(a, make_rng(42, 0, "uss").random(4))
    assert not np.array_equal(a, make_rng(42, 0, "wss").random(4))
    assert not np.array_equal(a, make_rng(42, 1, "uss").random(4))
    assert not np.array_equal(a, make_rng(43, 0, "uss").random(4))


def test_prototypes():
    cfg = SynthConfig()
    protos = make_prototypes(cfg)
    assert np.allclose(np.linalg.norm(protos.wss, axis=1), 1.0)
    a, b = cfg.class_id(0, 0), cfg.class_id(0, 1)
    other = cfg.class_id(1, 0)
    assert np.array_equal(protos.uss[a], protos.uss[b])
    assert float(protos.uss[a] @ protos.uss[other]) == pytest.approx(0.0, abs=1e-12)
    assert float(protos.wss[a] @ protos.wss[b]) == pytest.approx(0.8)
    assert float(protos.wss[a] @ protos.wss[other]) == pytest.approx(0.0, abs=1e-12)


def test_generation_is_deterministic():
    cfg = SynthConfig(seed=5)
    a, b = generate_scene(cfg, 3), generate_scene(cfg, 3)
    assert_eq(a.meta.to_json(), b.meta.to_json())
    assert np.array_equal(a.bundle.cams.values, b.bundle.cams.values)
    assert np.array_equal(a.bundle.uss_features.values, b.bundle.uss_features.values)
    assert np.array_equal(a.bundle.wss_features.values, b.bundle.wss_features.values)
    assert np.array_equal(a.bundle.rgb, b.bundle.rgb)
    assert_eq(a.bundle.ground_truth, b.bundle.ground_truth)
    c = generate_scene(cfg, 4)
    assert c.bundle.ground_truth != a.bundle.ground_truth


def test_scene_layout_and_minors():
    cfg = SynthConfig()
    for i in range(10):
        bundle, meta = generate_scene(cfg, i)
        gt = not_none(bundle.ground_truth).labels
        assert_eq(bundle.image_labels, frozenset(meta.classes))
        assert_eq(sorted(int(c) for c in np.unique(gt) if c != 0), meta.classes)

        cross, intra = meta.cross_minor, not_none(meta.intra_minor)
        assert meta.super_of[meta.hosts[cross]] != meta.super_of[cross]
        assert_eq(meta.super_of[meta.hosts[intra]], meta.super_of[intra])
        assert meta.hosts[cross] in meta.majors and meta.hosts[intra] in meta.majors

        for m in meta.minors:
            frac = (gt == m).mean()
            target = meta.minor_target_frac[m]
            assert 0.5 * target <= frac <= 1.5 * target


def test_noise_free_features_are_piecewise_constant():
    cfg = SynthConfig(noise_sigma=0.0)
    bundle, meta = generate_scene(cfg, 0)
    protos = make_prototypes(cfg)
    gt = not_none(bundle.ground_truth).labels
    for c in [0, *meta.classes]:
        region = gt == c
        assert np.allclose(bundle.uss_features.values[:, region], protos.uss[c][:, None], atol=1e-6)
        assert np.allclose(bundle.wss_features.values[:, region], protos.wss[c][:, None], atol=1e-6)


def test_wss_features_identify_classes():
    cfg = SynthConfig()
    protos = make_prototypes(cfg)
    for i in range(10):
        bundle, _ = generate_scene(cfg, i)
        gt = not_none(bundle.ground_truth).labels
        X = bundle.wss_features.values.reshape(bundle.wss_features.dim, -1)
        nearest = (protos.wss @ X).argmax(axis=0).reshape(gt.shape)
        assert (nearest == gt).mean() >= 0.95, i


def test_feature_stride():
    bundle, _ = generate_scene(SynthConfig(feature_stride=4), 0)
    assert_eq(bundle.uss_features.shape, (16, 16))
    assert_eq(bundle.wss_features.shape, (16, 16))
    assert_eq(bundle.shape, (64, 64))


def test_minor_cams_are_attenuated():
    bundle, meta = generate_scene(SynthConfig(noise_sigma=0.0), 2)
    gt = not_none(bundle.ground_truth).labels
    cross = meta.cross_minor
    assert bundle.cams.values[cross - 1][gt == cross].max() <= 0.5 + 1e-6
    for c in meta.classes:
        assert bundle.cams.values[c - 1].sum() > 0
    absent = set(range(1, 10)) - set(meta.classes)
    for c in absent:
        assert np.all(bundle.cams.values[c - 1] == 0)


def test_degraded_base_mask():
    bundle, meta = generate_scene(SynthConfig(), 0)
    gt = not_none(bundle.ground_truth)
    base = argmax_labels(bundle.base_scores())
    assert miou(confusion(base, gt, bundle.num_classes)).mean < 1
    for m in meta.minors:
        assert not (base.labels == m).any()


def test_absorb_probability():
    cfg = SynthConfig()
    bundle, meta = generate_scene(cfg, 0)
    gt = not_none(bundle.ground_truth)

    keep = SynthConfig(absorb_prob=0.0, boundary_noise=0.0)
    base = argmax_labels(degrade_base_mask(gt, meta.minors, keep, make_rng(0, 0, "degrade")))
    assert_eq(base, gt)

    absorb = SynthConfig(absorb_prob=1.0, boundary_noise=0.0)
    base = argmax_labels(degrade_base_mask(gt, meta.minors, absorb, make_rng(0, 0, "degrade")))
    for m in meta.minors:
        region = gt.labels == m
        assert not (base.labels == m).any()
        # absorbed by a single neighbor
        assert_eq(len(np.unique(base.labels[region])), 1)
    outside = ~np.isin(gt.labels, meta.minors)
    assert np.array_equal(base.labels[outside], gt.labels[outside])


def test_boundary_noise_only_touches_boundaries():
    labels = np.zeros((16, 16), dtype=np.uint8)
    labels[:, 8:] = 1
    gt = LabelMask(labels)
    cfg = SynthConfig(boundary_noise=1.0)
    base = argmax_labels(degrade_base_mask(gt, [], cfg, make_rng(0, 0, "degrade"))).labels
    assert np.array_equal(base[:, :7], labels[:, :7])
    assert np.array_equal(base[:, 9:], labels[:, 9:])
    assert np.all(base[:, 7] == 1) and np.all(base[:, 8] == 0)
