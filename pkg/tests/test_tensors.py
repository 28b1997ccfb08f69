import numpy as np
import pytest

from dhr.tensors import (
    IGNORE,
    FeatureMap,
    LabelMask,
    SceneBundle,
    ScoreStack,
    argmax_labels,
    load_mask_png,
    load_npy,
    load_rgb_png,
    one_hot,
    resample,
    save_mask_png,
    save_npy,
    save_rgb_png,
)
from dhr.utils import DomainError, FormatError, UnsupportedError, assert_eq


def test_npy_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    floats = rng.standard_normal((3, 5, 7)).astype(np.float32)
    bytes_ = rng.integers(0, 256, (4, 6), dtype=np.uint8)
    save_npy(floats, tmp_path / "f.npy")
    save_npy(bytes_, tmp_path / "b.npy")
    f = load_npy(tmp_path / "f.npy")
    b = load_npy(tmp_path / "b.npy")
    assert_eq(f.dtype, np.dtype("<f4"))
    assert f.tobytes() == floats.tobytes()
    assert np.array_equal(b, bytes_)
    # files written by numpy itself are readable too
    np.save(tmp_path / "np.npy", floats)
    assert np.array_equal(load_npy(tmp_path / "np.npy"), floats)


def test_load_npy_errors(tmp_path):
    fmt = np.lib.format
    a = np.zeros((2, 3), dtype=np.float32)

    with open(tmp_path / "v2.npy", "wb") as f:
        fmt.write_array_header_2_0(f, fmt.header_data_from_array_1_0(a))
        f.write(a.tobytes())
    with pytest.raises(FormatError):
        load_npy(tmp_path / "v2.npy")

    with open(tmp_path / "fortran.npy", "wb") as f:
        fmt.write_array_header_1_0(f, {"descr": "<f4", "fortran_order": True, "shape": (2, 3)})
        f.write(a.tobytes())
    with pytest.raises(FormatError):
        load_npy(tmp_path / "fortran.npy")

    save_npy(a, tmp_path / "short.npy")
    data = (tmp_path / "short.npy").read_bytes()
    (tmp_path / "short.npy").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        load_npy(tmp_path / "short.npy")

    (tmp_path / "junk.npy").write_bytes(b"not an npy file at all")
    with pytest.raises(FormatError):
        load_npy(tmp_path / "junk.npy")

    np.save(tmp_path / "int64.npy", np.zeros(3, dtype=np.int64))
    with pytest.raises(UnsupportedError):
        load_npy(tmp_path / "int64.npy")

    np.save(tmp_path / "rank4.npy", np.zeros((1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(UnsupportedError):
        load_npy(tmp_path / "rank4.npy")


def test_save_npy_rejects():
    with pytest.raises(UnsupportedError):
        save_npy(np.zeros(3, dtype=np.int64), "unused.npy")
    with pytest.raises(DomainError):
        save_npy(np.array([1.0, np.nan]), "unused.npy")


def test_score_stack_validation():
    with pytest.raises(DomainError):
        ScoreStack(np.full((2, 3, 3), 1.5))
    with pytest.raises(DomainError):
        ScoreStack(np.zeros((3, 3)))
    with pytest.raises(DomainError):
        ScoreStack(np.full((1, 2, 2), np.nan))
    s = ScoreStack(np.zeros((2, 3, 4)))
    assert_eq(s.num_classes, 2)
    assert_eq(s.shape, (3, 4))
    assert_eq(s.flat().shape, (12, 2))
    with pytest.raises(ValueError):
        s.values[0, 0, 0] = 1.0


def test_argmax_ties_and_monotone_invariance():
    tie = ScoreStack(np.full((3, 2, 2), 0.5))
    assert np.all(argmax_labels(tie).labels == 0)

    rng = np.random.default_rng(1)
    s = ScoreStack(rng.random((4, 8, 8)))
    transformed = ScoreStack(np.sqrt(s.values) * 0.5)
    assert_eq(argmax_labels(s), argmax_labels(transformed))


def test_one_hot_then_argmax_is_identity():
    rng = np.random.default_rng(2)
    mask = LabelMask(rng.integers(0, 5, (6, 9)))
    oh = one_hot(mask, 5)
    assert np.all(oh.values.sum(axis=0) == 1.0)
    assert_eq(argmax_labels(oh), mask)

    with_ignore = LabelMask(np.array([[0, IGNORE], [1, 1]]))
    oh = one_hot(with_ignore, 2)
    assert_eq(float(oh.values[:, 0, 1].sum()), 0.0)
    with pytest.raises(DomainError):
        one_hot(LabelMask(np.array([[3]])), 3)


def test_resample():
    const = np.full((2, 5, 7), 0.25)
    for mode in ("bilinear", "nearest"):
        for size in ((1, 1), (5, 7), (13, 3)):
            out = resample(const, *size, mode=mode)
            assert_eq(out.shape, (2, *size))
            assert np.all(out == 0.25)

    ramp = np.array([[0.0, 1.0], [0.0, 1.0]])
    up = resample(ramp, 4, 4, "bilinear")
    for row in up:
        assert np.allclose(row, [0.0, 0.25, 0.75, 1.0])

    labels = np.array([[1, 2], [3, 4]], dtype=np.uint8)
    near = resample(labels, 4, 4, "nearest")
    assert_eq(near.dtype, np.dtype(np.uint8))
    assert np.array_equal(near[:2, :2], np.ones((2, 2)))
    assert np.array_equal(resample(near, 2, 2, "nearest"), labels)

    with pytest.raises(DomainError):
        resample(ramp, 0, 3)
    with pytest.raises(DomainError):
        resample(ramp, 3, 3, "cubic")


def test_feature_map_resized():
    F = FeatureMap(np.ones((3, 4, 4)))
    assert F.resized(4, 4) is F
    assert_eq(F.resized(8, 2).shape, (8, 2))
    assert_eq(F.resized(8, 2).dim, 3)


def test_png_roundtrip(tmp_path):
    labels = np.array([[0, 1, 2], [IGNORE, 20, 0]], dtype=np.uint8)
    save_mask_png(LabelMask(labels), tmp_path / "m.png")
    assert_eq(load_mask_png(tmp_path / "m.png"), LabelMask(labels))

    rgb = np.random.default_rng(3).integers(0, 256, (5, 4, 3), dtype=np.uint8)
    save_rgb_png(rgb, tmp_path / "rgb.png")
    assert np.array_equal(load_rgb_png(tmp_path / "rgb.png"), rgb)
    # an rgb image is not a label mask
    with pytest.raises(FormatError):
        load_mask_png(tmp_path / "rgb.png")

    (tmp_path / "junk.png").write_bytes(b"garbage")
    with pytest.raises(FormatError):
        load_mask_png(tmp_path / "junk.png")


def _bundle(**kwargs):
    args = dict(
        id="s",
        cams=ScoreStack(np.zeros((2, 4, 4)), has_background=False),
        base_mask=LabelMask(np.zeros((4, 4), dtype=np.uint8)),
        uss_features=FeatureMap(np.ones((3, 2, 2))),
        wss_features=FeatureMap(np.ones((3, 4, 4))),
        image_labels=frozenset(),
        num_classes=3,
    )
    args.update(kwargs)
    return SceneBundle(**args)


def test_scene_bundle_validation():
    b = _bundle()
    assert_eq(b.shape, (4, 4))
    assert np.all(b.base_scores().values[0] == 1.0)

    cams = np.zeros((2, 4, 4))
    cams[1, 0, 0] = 0.5
    with pytest.raises(DomainError):
        _bundle(cams=ScoreStack(cams, has_background=False))
    assert_eq(_bundle(cams=ScoreStack(cams, has_background=False), image_labels={2}).image_labels, frozenset({2}))

    with pytest.raises(DomainError):
        _bundle(image_labels={3})
    with pytest.raises(DomainError):
        _bundle(cams=ScoreStack(np.zeros((3, 4, 4)), has_background=False))
    with pytest.raises(DomainError):
        _bundle(base_mask=LabelMask(np.zeros((3, 4), dtype=np.uint8)))
    with pytest.raises(DomainError):
        _bundle(rgb=np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(DomainError):
        _bundle(ground_truth=LabelMask(np.full((4, 4), 5, dtype=np.uint8)))
