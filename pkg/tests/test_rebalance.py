import dataclasses

import numpy as np
import pytest

from dhr.rebalance import (
    ClassCentroids,
    DhrConfig,
    RebalanceConfig,
    StageToggles,
    UnionFind,
    centroid_similarity,
    class_average_pool,
    correlation_groups,
    dhr_propagate,
    similarity_scores,
    uss_rebalance,
    wss_rebalance,
    wss_rebalance_with_info,
)
from dhr.refine import Refiner, RefinerConfig
from dhr.synth import SynthConfig, generate_scene
from dhr.tensors import IGNORE, FeatureMap, LabelMask, SceneBundle, ScoreStack, argmax_labels, one_hot
from dhr.utils import ConfigError, DegenerateInputError, SceneError, assert_eq, not_none

Identity = Refiner(RefinerConfig("identity"))


def _centroids(vectors: dict[int, list[float]]) -> ClassCentroids:
    classes = tuple(sorted(vectors))
    return ClassCentroids(classes, np.array([vectors[c] for c in classes], dtype=np.float64))


def test_config_validation():
    with pytest.raises(ConfigError):
        RebalanceConfig(tau=1.5)
    with pytest.raises(ConfigError):
        RebalanceConfig(wss_col_marginal_mode="bogus")
    assert_eq(repr(DhrConfig()), "DhrConfig()")
    assert_eq(
        repr(DhrConfig(stages=StageToggles(uss=False))), "DhrConfig(stages=(uss=False))"
    )


def test_class_average_pool_small_cases():
    F = FeatureMap(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))  # D=2, 1×2
    V = class_average_pool(F, LabelMask(np.array([[3, 3]])))
    assert_eq(V.classes, (3,))
    assert np.allclose(V.vector(3), [0.5, 0.5])

    V = class_average_pool(F, LabelMask(np.array([[1, IGNORE]])))
    assert_eq(V.classes, (1,))
    assert np.allclose(V.vector(1), [1.0, 0.0])

    V = class_average_pool(F, LabelMask(np.array([[IGNORE, IGNORE]])))
    assert_eq(len(V), 0)


def test_class_average_pool_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w, d = (int(x) for x in rng.integers(1, [17, 17, 9]))
        F = FeatureMap(rng.standard_normal((d, h, w)))
        labels = rng.integers(0, 4, (h, w))
        labels[rng.random((h, w)) < 0.1] = IGNORE
        V = class_average_pool(F, LabelMask(labels))
        present = sorted({int(c) for c in np.unique(labels)} - {IGNORE})
        assert_eq(list(V.classes), present)
        for c in present:
            total, n = np.zeros(d), 0
            for y in range(h):
                for x in range(w):
                    if labels[y, x] == c:
                        total += F.values[:, y, x]
                        n += 1
            assert np.allclose(V.vector(c), total / n, atol=1e-12, rtol=0)
            member = F.values[:, labels == c]
            assert np.all(member.min(axis=1) - 1e-12 <= V.vector(c))
            assert np.all(V.vector(c) <= member.max(axis=1) + 1e-12)


def test_similarity_scores():
    V = _centroids({1: [1.0, 0.0], 2: [0.0, 2.0]})
    pixels = np.array([[1.0, 0.0, -3.0, 0.0], [0.0, 5.0, 0.0, 0.0]])  # D=2, 4 pixels
    F = FeatureMap(pixels.reshape(2, 1, 4))
    S = similarity_scores(F, V, num_classes=4)
    assert_eq(S.num_classes, 4)
    flat = S.flat()
    assert np.allclose(flat[0], [0, 1, 0, 0])  # equal to centroid 1
    assert np.allclose(flat[1], [0, 0, 1, 0])  # positive multiple of centroid 2
    assert np.allclose(flat[2], [0, 0, 0, 0])  # anti-parallel and orthogonal
    assert np.allclose(flat[3], [0, 0, 0, 0])  # zero vector
    assert flat.min() >= 0 and flat.max() <= 1


def test_union_find():
    uf = UnionFind(5)
    uf.union(0, 1)
    uf.union(3, 4)
    uf.union(1, 4)
    assert_eq(uf.find(0), uf.find(3))
    assert uf.find(2) != uf.find(0)


def test_correlation_groups():
    far = _centroids({1: [1, 0, 0], 2: [0, 1, 0], 3: [0, 0, 1]})
    assert_eq(correlation_groups(far, 0.8).groups, ((1,), (2,), (3,)))

    close = _centroids({1: [1, 0.1, 0], 2: [1, 0, 0.1], 3: [1, 0.1, 0.1]})
    assert_eq(correlation_groups(close, 0.8).groups, ((1, 2, 3),))

    # a-b and b-c exceed τ, a-c does not
    t = np.deg2rad(30)
    chain = _centroids({1: [1, 0, 0], 2: [np.cos(t), np.sin(t), 0], 3: [np.cos(2 * t), np.sin(2 * t), 0]})
    sims = centroid_similarity(chain)
    assert sims[0, 1] > 0.8 and sims[1, 2] > 0.8 and sims[0, 2] <= 0.8
    groups = correlation_groups(chain, 0.8)
    assert_eq(groups.groups, ((1, 2, 3),))
    assert_eq(groups.multi(), [(1, 2, 3)])
    assert_eq(groups.group_of(2), (1, 2, 3))
    assert groups.group_of(7) is None


def test_background_never_merges():
    V = _centroids({0: [1, 0], 1: [1, 0.01], 2: [1, 0.02]})
    assert_eq(correlation_groups(V, 0.5).groups, ((0,), (1, 2)))
    assert_eq(correlation_groups(V, 0.5, no_merge=()).groups, ((0, 1, 2),))


def test_groups_partition_and_merge_monotonically():
    rng = np.random.default_rng(1)
    V = ClassCentroids(tuple(range(1, 9)), rng.standard_normal((8, 4)))
    previous = None
    for tau in (1.0, 0.9, 0.7, 0.5, 0.3, 0.0):
        groups = correlation_groups(V, tau).groups
        flat = sorted(c for g in groups for c in g)
        assert_eq(flat, list(range(1, 9)))
        if previous is not None:
            # every old group lies inside one new group
            for g in previous:
                assert any(set(g) <= set(h) for h in groups)
        previous = groups


def _two_region_scene_parts():
    labels = np.zeros((8, 8), dtype=np.uint8)
    labels[:, :4] = 1
    labels[:, 4:] = 2
    feats = np.zeros((3, 8, 8))
    feats[0][labels == 1] = 1.0
    feats[1][labels == 2] = 1.0
    return LabelMask(labels), FeatureMap(feats)


def test_uss_rebalance_on_separable_features():
    mask, F = _two_region_scene_parts()
    M_init = one_hot(mask, 3)
    out = uss_rebalance(F, M_init, RebalanceConfig())
    assert_eq(argmax_labels(out), mask)


def test_uss_rebalance_with_a_single_class():
    rng = np.random.default_rng(2)
    F = FeatureMap(rng.random((4, 6, 6)) + 0.1)
    M_init = one_hot(LabelMask(np.ones((6, 6), dtype=np.uint8)), 3)
    out = uss_rebalance(F, M_init, RebalanceConfig())
    S = similarity_scores(F, class_average_pool(F, argmax_labels(M_init)), 3)
    assert np.allclose(out.values, S.values, atol=1e-9)


def test_wss_rebalance_is_identity_without_multi_groups():
    rng = np.random.default_rng(3)
    mask, F = _two_region_scene_parts()
    S_us = ScoreStack(rng.random((3, 8, 8)) * 0.5)
    V = _centroids({1: [1, 0, 0], 2: [0, 1, 0]})
    out = wss_rebalance(S_us, F, one_hot(mask, 3), correlation_groups(V, 0.8), RebalanceConfig())
    assert np.array_equal(out.values, S_us.values)


@pytest.fixture(scope="module")
def synth_scene():
    return generate_scene(SynthConfig(seed=7), 0)


def _uss_stage(scene: SceneBundle, cfg: DhrConfig):
    res = dhr_propagate(scene, Identity, cfg)
    h, w = scene.shape
    return res, scene.uss_features.resized(h, w), scene.wss_features.resized(h, w)


def test_wss_group_mass_is_conserved(synth_scene):
    scene = synth_scene.bundle
    res, F_us, F_ws = _uss_stage(scene, DhrConfig())
    S_us, M_init = res.stages["uss"], res.stages["init"]
    groups = correlation_groups(class_average_pool(F_us, argmax_labels(M_init)), 0.8)
    assert groups.multi(), "the scene should contain a group of same-super-class classes"
    out = wss_rebalance_with_info(S_us, F_ws, M_init, groups, RebalanceConfig())
    us, dh = S_us.flat(), out.scores.flat()
    us_labels = us.argmax(axis=1)
    for g in groups.multi():
        pix = np.isin(us_labels, g)
        assert np.allclose(dh[pix][:, list(g)].sum(axis=1), us[pix][:, list(g)].sum(axis=1), atol=1e-6)
        outside = [c for c in range(scene.num_classes) if c not in g]
        assert np.array_equal(dh[pix][:, outside], us[pix][:, outside])
    assert np.array_equal(dh[~np.isin(us_labels, [c for g in groups.multi() for c in g])],
                          us[~np.isin(us_labels, [c for g in groups.multi() for c in g])])


def test_tau_above_every_similarity_bypasses_wss(synth_scene):
    scene = synth_scene.bundle
    res, F_us, F_ws = _uss_stage(scene, DhrConfig())
    S_us, M_init = res.stages["uss"], res.stages["init"]
    V = class_average_pool(F_us, argmax_labels(M_init))
    sims = centroid_similarity(V)
    tau = min(1.0, float(sims[~np.eye(len(V), dtype=bool)].max()))
    groups = correlation_groups(V, tau)
    assert not groups.multi()
    out = wss_rebalance(S_us, F_ws, M_init, groups, dataclasses.replace(RebalanceConfig(), tau=tau))
    assert_eq(argmax_labels(out), argmax_labels(S_us))


def test_wss_matches_nearest_prototype_inside_a_group(synth_scene):
    scene, meta = synth_scene.bundle, synth_scene.meta
    res = dhr_propagate(scene, Identity, DhrConfig())
    gt = not_none(scene.ground_truth).labels
    dh = argmax_labels(res.stages["dh"]).labels
    group = [c for c in meta.classes if meta.super_of[c] == meta.super_of[not_none(meta.intra_minor)]]
    inside = np.isin(gt, group) & np.isin(dh, group)
    assert inside.sum() > 0
    assert (dh[inside] == gt[inside]).mean() >= 0.85


def test_literal_product_mode_runs(synth_scene):
    cfg = DhrConfig(rebalance=RebalanceConfig(literal_product_mode=True))
    res = dhr_propagate(synth_scene.bundle, Identity, cfg)
    assert_eq(res.scores.values.shape, synth_scene.bundle.base_scores().values.shape)
    assert res.scores.values.max() <= 1.0


def _simple_bundle(image_labels, cams, base_labels, uss=None, wss=None, rgb=None):
    h, w = base_labels.shape
    feats = np.ones((2, h, w)) if uss is None else uss
    return SceneBundle(
        id="toy",
        cams=ScoreStack(cams, has_background=False),
        base_mask=LabelMask(base_labels),
        uss_features=FeatureMap(feats),
        wss_features=FeatureMap(feats if wss is None else wss),
        image_labels=frozenset(image_labels),
        num_classes=cams.shape[0] + 1,
        rgb=rgb,
    )


def test_propagate_with_empty_labels_is_background_only():
    scene = _simple_bundle([], np.zeros((2, 5, 5)), np.zeros((5, 5), dtype=np.uint8))
    res = dhr_propagate(scene, Identity, DhrConfig())
    assert np.all(res.scores.values[0] == 1.0)
    assert np.all(res.scores.values[1:] == 0.0)
    assert_eq(res.provenance.image_labels, [])


def test_propagate_keeps_a_faithful_base_mask():
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[4:12, 4:12] = 1
    cams = (gt == 1).astype(np.float64)[None]
    feats = np.stack([(gt == 0).astype(np.float64), (gt == 1).astype(np.float64)])
    scene = _simple_bundle([1], cams, gt, uss=feats, wss=feats)
    res = dhr_propagate(scene, Identity, DhrConfig())
    assert_eq(argmax_labels(res.scores), LabelMask(gt))
    assert_eq(res.provenance.vanished, [])
    assert_eq(res.provenance.groups, [[0], [1]])
    assert "seed" in res.provenance.ot and "uss" in res.provenance.ot


def test_propagate_tags_the_failing_stage():
    cams = np.zeros((2, 4, 4))
    cams[0] = 0.8
    scene = _simple_bundle([1, 2], cams, np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(SceneError) as info:
        dhr_propagate(scene, Identity, DhrConfig())
    assert_eq(info.value.stage, "seed")
    assert_eq(info.value.scene_id, "toy")
    assert isinstance(info.value.cause, DegenerateInputError)
    assert_eq(info.value.as_record()["error"], "DegenerateInputError")


def test_stage_toggles(synth_scene):
    scene = synth_scene.bundle
    res = dhr_propagate(scene, Identity, DhrConfig(stages=StageToggles(uss=False, wss=False)))
    assert np.array_equal(res.stages["uss"].values, res.stages["init"].values)
    assert np.array_equal(res.stages["dh"].values, res.stages["uss"].values)
    assert "uss" not in res.provenance.ot and "seed" in res.provenance.ot

    res = dhr_propagate(scene, Identity, DhrConfig(stages=StageToggles(ot_seed=False)))
    assert "seed" not in res.provenance.ot
