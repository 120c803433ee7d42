import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hnseg.errors import ArgumentError, CaseError
from hnseg.inference import (
    FLIP_SETS,
    InferenceConfig,
    NetPredictor,
    PostprocessConfig,
    ProbabilityMap,
    ensemble_mean,
    finalize,
    flip_spatial,
    gaussian_importance,
    postprocess_nodes,
    predict_volume,
    sliding_window,
    tta_predict,
    window_starts,
)
from hnseg.metrics import per_case_dice
from hnseg.preprocess import preprocess_case
from hnseg.volume import ImageGeometry, LabelVolume, ScalarVolume, resample_nearest

from oracles import flood_fill_components

CFG8 = InferenceConfig(roi_size=(8, 8, 8), overlap=0.5)


def constant_model(probs):
    probs = np.asarray(probs, dtype=np.float32)

    def predict(x):
        return np.broadcast_to(probs[None, :, None, None, None], (1, probs.size, *x.shape[2:])).copy()

    return predict


def channel0_model(x):
    """Class-1 'probability' is the input's channel 0; class 0 the complement."""
    return np.concatenate([1 - x[:, :1], x[:, :1]], axis=1)


# ---------------------------------------------------------------------------
# flips and windows


def test_flip_set():
    assert len(FLIP_SETS) == 8 and len(set(FLIP_SETS)) == 8
    assert set(FLIP_SETS) == {(), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)}


@given(st.sampled_from(FLIP_SETS), st.integers(0, 2**31))
def test_flip_involution_bit_exact(axes, seed):
    v = np.random.default_rng(seed).standard_normal((1, 2, 3, 4, 5)).astype(np.float32)
    assert flip_spatial(flip_spatial(v, axes), axes).tobytes() == v.tobytes()


def test_window_starts_cover():
    assert window_starts(8, 16, 0.5) == [0]
    assert window_starts(20, 8, 0.5) == [0, 4, 8, 12]
    assert window_starts(21, 8, 0.5) == [0, 4, 8, 12, 13]


def test_gaussian_importance_positive_peak_center():
    w = gaussian_importance((8, 8, 8))
    assert w.min() > 0 and w.max() == 1.0
    assert w[3, 3, 3] == w[4, 4, 4] == w.max()


@given(st.tuples(st.integers(3, 20), st.integers(3, 20), st.integers(3, 20)), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_constant_model_exact(shape, overlap):
    cfg = InferenceConfig(roi_size=(8, 8, 8), overlap=overlap)
    probs = np.array([0.2, 0.3, 0.5], dtype=np.float32)
    pm = sliding_window(constant_model(probs), np.zeros((1, 2, *shape)), cfg, activation=None)
    assert pm.probs.shape == (3, *shape)
    assert np.all(pm.probs == probs[:, None, None, None])


def test_small_volume_single_padded_window():
    calls = []

    def predict(x):
        calls.append(x.shape)
        return channel0_model(x)

    img = np.random.default_rng(0).random((1, 2, 5, 6, 7)).astype(np.float32)
    pm = sliding_window(predict, img, CFG8, pad_values=(0.3, 0.0), activation=None)
    assert calls == [(1, 2, 8, 8, 8)]
    assert np.allclose(pm.probs[1], img[0, 0])


def test_softmax_activation_sums_to_one(rng):
    pm = sliding_window(lambda x: np.repeat(x[:, :1], 3, axis=1) * np.arange(3)[None, :, None, None, None],
                        rng.random((1, 2, 12, 10, 9)), CFG8)
    assert np.allclose(pm.probs.sum(0), 1, atol=1e-5)


def test_bad_image_shape():
    with pytest.raises(ArgumentError):
        sliding_window(channel0_model, np.zeros((2, 8, 8, 8)), CFG8)
    with pytest.raises(ArgumentError):
        InferenceConfig(overlap=1.0)


# ---------------------------------------------------------------------------
# TTA and ensembling


def test_tta_stub_closed_form(rng):
    img = rng.random((1, 2, 12, 10, 9)).astype(np.float32)
    pm = tta_predict(channel0_model, img, CFG8, activation=None)
    # unflipping a flipped identity map is the identity, so every term equals the input
    expected = np.mean([flip_spatial(flip_spatial(img[0, 0], a), a) for a in FLIP_SETS], axis=0)
    assert np.allclose(pm.probs[1], expected, atol=1e-6)
    assert np.allclose(pm.probs[1], img[0, 0], atol=1e-6)


def test_tta_asymmetric_stub(rng):
    # a model that reads the voxel to its +x neighbour becomes symmetric after TTA
    def shifted(x):
        c = np.roll(x[:, :1], -1, axis=2)
        return np.concatenate([1 - c, c], axis=1)

    img = rng.random((1, 2, 8, 8, 8)).astype(np.float32)
    pm = tta_predict(shifted, img, CFG8, activation=None)
    ch = img[0, 0]
    plus = np.roll(ch, -1, axis=0)
    minus = np.roll(ch, 1, axis=0)
    # inside the single window the wrap-around does not reach rows 1..6
    assert np.allclose(pm.probs[1][1:-1], ((plus + minus) / 2)[1:-1], atol=1e-6)


def test_tta_constant_input_equals_single(rng):
    img = np.full((1, 2, 8, 8, 8), 0.4, dtype=np.float32)
    single = sliding_window(channel0_model, img, CFG8, activation=None)
    tta = tta_predict(channel0_model, img, CFG8, activation=None)
    assert np.allclose(single.probs, tta.probs, atol=1e-7)


def test_ensemble_examples():
    g = ImageGeometry((2, 2, 2), (1, 1, 1))
    a = ProbabilityMap(g, np.stack([np.full((2, 2, 2), 0.8), np.full((2, 2, 2), 0.2)]).astype(np.float32))
    b = ProbabilityMap(g, np.stack([np.full((2, 2, 2), 0.2), np.full((2, 2, 2), 0.8)]).astype(np.float32))
    assert ensemble_mean([a]) is a
    assert np.allclose(ensemble_mean([a, b]).probs, 0.5)
    assert np.array_equal(ensemble_mean([a] * 15).probs, a.probs)
    with pytest.raises(ArgumentError):
        ensemble_mean([])
    with pytest.raises(ArgumentError):
        ensemble_mean([a, ProbabilityMap(ImageGeometry((2, 2, 2), (2, 1, 1)), a.probs)])


def test_predict_volume_channel_sums(rng):
    img = rng.random((1, 2, 10, 12, 8)).astype(np.float32)
    models = [lambda x, k=k: np.repeat(x[:, :1], 3, axis=1) * (k + np.arange(3))[None, :, None, None, None]
              for k in range(2)]
    pm = predict_volume(models, img, CFG8)
    assert np.allclose(pm.probs.sum(0), 1, atol=1e-4)


def test_windowing_robustness(trained_model):
    cfg, cases, result, _ = trained_model
    predict = NetPredictor.from_checkpoint(result.best_path)
    case = cases[sorted(cases)[0]]
    masks = []
    for overlap in (0.5, 0.25):
        inf = InferenceConfig(roi_size=cfg.inference.roi_size, overlap=overlap, tta=False)
        # the crop is 48 voxels along z, so the two overlaps tile it differently
        masks.append(sliding_window(predict, case.image[None], inf, pad_values=case.pad_values).argmax().labels)
    assert np.mean(masks[0] == masks[1]) > 0.95


# ---------------------------------------------------------------------------
# finalize and post-processing


def test_argmax_tie_break_and_example():
    g = ImageGeometry((1, 1, 2), (1, 1, 1))
    probs = np.array([[[[1 / 3, 0.1]]], [[[1 / 3, 0.7]]], [[[1 / 3, 0.2]]]], dtype=np.float32)
    assert ProbabilityMap(g, probs).argmax().labels.ravel().tolist() == [0, 1]


def test_finalize_roundtrip(phantom_case, desk_cfg):
    case = preprocess_case(phantom_case.ct, phantom_case.pet, phantom_case.label, desk_cfg.crop,
                           desk_cfg.normalization, desk_cfg.spacing, "p")
    onehot = np.stack([case.label.labels == c for c in range(3)]).astype(np.float32)
    out = finalize(ProbabilityMap(case.geometry, onehot), case.sidecar)
    assert out.geometry.isclose(phantom_case.ct.geometry)
    assert set(np.unique(out.labels)) <= {0, 1, 2}
    # reference: the frame-grid label (crop pasted back) resampled straight to CT
    frame = ImageGeometry.from_dict(case.sidecar["frame_geometry"])
    direct = resample_nearest(resample_nearest(phantom_case.label, frame), phantom_case.ct.geometry)
    for c in (1, 2):
        assert per_case_dice(out, direct, c) >= 0.99
    with pytest.raises(CaseError):
        finalize(ProbabilityMap(ImageGeometry((2, 2, 2), (1, 1, 1)), np.ones((3, 2, 2, 2))), case.sidecar)


def _vols(labels, pet):
    g = ImageGeometry(labels.shape, (1, 1, 1))
    return LabelVolume(g, labels), ScalarVolume(g, pet.astype(np.float32))


def test_postprocess_examples():
    lab = np.zeros((20, 20, 20), np.uint8)
    lab[1:3, 1:3, 1:3] = 2  # 8 mm^3
    lab[10:18, 10:18, 10:18] = 2  # 512 mm^3
    lab[1:4, 15:18, 15:18] = 1
    mask, pet = _vols(lab, np.full(lab.shape, 5.0))
    out = postprocess_nodes(mask, pet, PostprocessConfig(enabled=True, min_volume_mm3=50, min_mean_pet=1.0)).labels
    assert not out[1:3, 1:3, 1:3].any() and np.all(out[10:18, 10:18, 10:18] == 2)
    assert np.array_equal(out == 1, lab == 1)
    empty, _ = _vols(np.zeros((4, 4, 4), np.uint8), np.zeros((4, 4, 4)))
    assert not postprocess_nodes(empty, _, PostprocessConfig()).labels.any()


@given(st.integers(0, 2**31))
def test_postprocess_matches_flood_fill(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(4, 17, 3))
    lab = (rng.random(shape) < rng.uniform(0.05, 0.3)).astype(np.uint8) * 2
    lab[rng.random(shape) < 0.05] = 1
    pet = rng.random(shape) * 3
    mask, pv = _vols(lab, pet)
    cfg = PostprocessConfig(enabled=True, min_volume_mm3=4, min_mean_pet=1.4)
    out = postprocess_nodes(mask, pv, cfg).labels
    expected = lab.copy()
    for comp in flood_fill_components(lab == 2):
        idx = tuple(np.array(list(comp)).T)
        if len(comp) < cfg.min_volume_mm3 or pet[idx].astype(np.float32).astype(np.float64).mean() < cfg.min_mean_pet:
            expected[idx] = 0
    assert np.array_equal(out, expected)
