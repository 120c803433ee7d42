import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hnseg.datapipe import (
    AugmentConfig,
    CaseRecord,
    SamplerConfig,
    apply_affine,
    augment,
    draw_class,
    extract_patch,
    patch_stream,
    read_folds,
    sample_patch,
    split_folds,
    step_rng,
    training_patch,
    write_folds,
)
from hnseg.errors import ArgumentError


def make_case(shape=(24, 24, 24), tumor=True, node=True, seed=0):
    rng = np.random.default_rng(seed)
    label = np.zeros(shape, dtype=np.uint8)
    if tumor:
        label[4:8, 5:9, 6:10] = 1
    if node:
        label[15:18, 14:20, 12:15] = 2
    image = rng.random((2, *shape)).astype(np.float32)
    return CaseRecord("c", image, label, pad_values=(0.01, 0.0))


# ---------------------------------------------------------------------------
# folds


def test_fold_sizes_524():
    folds = split_folds([f"case{i:03d}" for i in range(524)], 5, seed=0)
    assert sorted(len(f) for f in folds) == [104, 105, 105, 105, 105]


@given(st.integers(1, 40), st.data())
def test_split_is_partition(n, data):
    k = data.draw(st.integers(1, n))
    seed = data.draw(st.integers(0, 1000))
    ids = [f"c{i}" for i in range(n)]
    folds = split_folds(ids, k, seed)
    flat = [c for f in folds for c in f]
    assert sorted(flat) == sorted(ids) and len(flat) == len(set(flat))
    sizes = [len(f) for f in folds]
    assert len(folds) == k and max(sizes) - min(sizes) <= 1
    assert folds == split_folds(list(reversed(ids)), k, seed)


def test_k_equals_n_and_errors():
    folds = split_folds(["a", "b", "c"], 3)
    assert sorted(folds) == [["a"], ["b"], ["c"]]
    with pytest.raises(ArgumentError):
        split_folds(["a", "b"], 3)
    with pytest.raises(ArgumentError):
        split_folds(["a", "a"], 1)


def test_folds_json_roundtrip(tmp_path):
    folds = split_folds([f"c{i}" for i in range(11)], 3, seed=4)
    write_folds(folds, tmp_path / "folds.json")
    assert read_folds(tmp_path / "folds.json") == folds


# ---------------------------------------------------------------------------
# sampling


def test_foreground_lists_match_labels():
    case = make_case()
    for c in (1, 2):
        assert np.all(case.label.ravel()[case.foreground[c]] == c)


def test_center_voxel_carries_drawn_class():
    case = make_case(node=False)
    cfg = SamplerConfig(patch_size=(8, 8, 8), class_probs=(1.0, 0.0, 0.0))
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = sample_patch(case, cfg, rng)
        assert p.cls == 1 and p.label[0, 4, 4, 4] == 1
        assert case.label[p.center] == 1


def test_class_frequencies_two_class_case():
    case = make_case()
    rng = np.random.default_rng(11)
    draws = [draw_class(case.available(), (0.45, 0.45, 0.1), rng) for _ in range(10_000)]
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert abs(freq[1] - 0.45) < 0.02 and abs(freq[2] - 0.45) < 0.02 and abs(freq[0] - 0.10) < 0.02


def test_missing_class_redraw():
    rng = np.random.default_rng(0)
    draws = [draw_class((False, True, True), (0.45, 0.45, 0.1), rng) for _ in range(4000)]
    assert 1 not in draws
    assert np.mean(np.array(draws) == 2) == pytest.approx(0.45 / 0.55, abs=0.02)


def test_no_foreground_gives_background_patch():
    case = make_case(tumor=False, node=False)
    p = sample_patch(case, SamplerConfig(patch_size=(8, 8, 8)), np.random.default_rng(0))
    assert p.cls == 0 and p.label.shape == (1, 8, 8, 8) and not p.label.any()


def test_extract_patch_pads_outside():
    image = np.ones((2, 4, 4, 4), dtype=np.float32)
    label = np.ones((4, 4, 4), dtype=np.uint8)
    img, lab = extract_patch(image, label, (0, 0, 0), (4, 4, 4), (0.25, 0.0))
    assert np.all(img[0, :2] == 0.25) and np.all(img[1, :2] == 0.0) and not lab[:2].any()
    assert np.all(img[:, 2:, 2:, 2:] == 1.0) and lab[2:, 2:, 2:].all()


def test_sampler_determinism():
    case = make_case()
    cfg = SamplerConfig(patch_size=(8, 8, 8))
    a = [sample_patch(case, cfg, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_patch(case, cfg, np.random.default_rng(5)) for _ in range(3)]
    for pa, pb in zip(a, b):
        assert pa.center == pb.center and np.array_equal(pa.image, pb.image)


def test_sampler_config_validation():
    with pytest.raises(ArgumentError):
        SamplerConfig(class_probs=(0.5, 0.5, 0.1))
    with pytest.raises(ArgumentError):
        AugmentConfig(flip_prob=1.5)


# ---------------------------------------------------------------------------
# augmentation


def _patch(seed=0, p=12):
    case = make_case(seed=seed)
    return sample_patch(case, SamplerConfig(patch_size=(p, p, p)), np.random.default_rng(seed))


def test_disabled_augmentation_is_identity():
    p = _patch()
    img, lab = augment(p.image, p.label, AugmentConfig.disabled(), np.random.default_rng(0))
    assert np.array_equal(img, p.image) and np.array_equal(lab, p.label)


def test_forced_flip_twice_is_identity():
    p = _patch()
    cfg = AugmentConfig(flip_prob=1.0, affine_prob=0.0, intensity_prob=0.0)
    once = augment(p.image, p.label, cfg, np.random.default_rng(0))
    assert np.array_equal(once[0], p.image[:, :, ::-1, ::-1, ::-1])
    twice = augment(*once, cfg, np.random.default_rng(1))
    assert np.array_equal(twice[0], p.image) and np.array_equal(twice[1], p.label)


@given(st.integers(0, 2**31))
def test_pet_untouched_by_intensity(seed):
    p = _patch()
    cfg = AugmentConfig(flip_prob=0.0, affine_prob=0.0, intensity_prob=1.0)
    img, _ = augment(p.image, p.label, cfg, np.random.default_rng(seed))
    assert img[0, 1].tobytes() == p.image[0, 1].tobytes()
    assert np.all((img[0, 0] >= 0) & (img[0, 0] <= 1))
    assert not np.array_equal(img[0, 0], p.image[0, 0])


@given(st.integers(0, 2**31))
def test_label_set_never_grows(seed):
    p = _patch(seed % 7)
    cfg = AugmentConfig(flip_prob=0.5, affine_prob=1.0, intensity_prob=0.5)
    img, lab = augment(p.image, p.label, cfg, np.random.default_rng(seed))
    assert set(np.unique(lab)) <= set(np.unique(p.label)) <= {0, 1, 2}
    assert img.shape == p.image.shape and img.dtype == np.float32


def test_affine_identity_matrix():
    p = _patch()
    img, lab = apply_affine(p.image[0], p.label[0], np.eye(3))
    assert np.allclose(img, p.image[0], atol=1e-6) and np.array_equal(lab, p.label[0])


def test_patch_stream_order_independent_of_workers():
    case = make_case()
    sampler, aug = SamplerConfig(patch_size=(8, 8, 8)), AugmentConfig()

    def make(step):
        return training_patch(case, sampler, aug, step_rng(0, 0, 0, 0, step))

    seq = list(patch_stream(range(6), make, workers=0))
    par = list(patch_stream(range(6), make, workers=3))
    for (a, la), (b, lb) in zip(seq, par):
        assert np.array_equal(a, b) and np.array_equal(la, lb)
