import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rml_lab.augment import AugmentPolicy, mix_label_maps, sample_rect_mask
from rml_lab.errors import StateError
from rml_lab.netcore import build_model, softmax
from rml_lab.protobank import new_bank
from rml_lab.rectify import (
    OneHotMap,
    StagePseudoStore,
    denoise,
    harden_with_threshold,
    mix_rectify,
    rectified_labels,
    teacher_predict,
)

POLICY = AugmentPolicy(weak_strength=0.0, strong_strength=1.0)


def rand_probs(rng, shape):
    p = rng.random(shape) + 1e-6
    return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# teacher_predict
# ---------------------------------------------------------------------------


def test_teacher_predict_probabilities_and_determinism():
    teacher = build_model("mlp", K=3, C=4, seed=0, in_channels=2).eval()
    x = np.random.default_rng(0).random((2, 1, 1, 2))
    f1, p1 = teacher_predict(teacher, x, POLICY, np.random.default_rng(1))
    f2, p2 = teacher_predict(teacher, x, POLICY, np.random.default_rng(2))
    np.testing.assert_allclose(p1.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(p1, p2)  # weak strength 0 -> pure function
    feats, logits = teacher.forward(x)
    np.testing.assert_array_equal(f1, feats)
    np.testing.assert_array_equal(p1, softmax(logits))


def test_teacher_predict_requires_eval_mode():
    teacher = build_model("mlp", K=3, C=4, seed=0, in_channels=2)
    with pytest.raises(StateError):
        teacher_predict(teacher, np.zeros((1, 1, 1, 2)), POLICY, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# harden_with_threshold
# ---------------------------------------------------------------------------


def test_tau_zero_admits_everything():
    rng = np.random.default_rng(0)
    p = rand_probs(rng, (2, 3, 3, 4))
    out = harden_with_threshold(p, 0.0)
    assert np.all(out.valid == 1.0)
    np.testing.assert_array_equal(out.labels, p.argmax(axis=-1))


def test_tie_breaks_to_lowest_class():
    p = np.array([[[[0.5, 0.5]]]])
    out = harden_with_threshold(p, 0.0)
    assert out.labels[0, 0, 0] == 0
    assert out.valid[0, 0, 0] == 1.0


def test_gate_excludes_low_confidence():
    p = np.array([[[[0.5, 0.3, 0.2]]]])
    out = harden_with_threshold(p, 0.6)
    assert out.valid[0, 0, 0] == 0.0


def test_gate_monotone_in_tau():
    rng = np.random.default_rng(1)
    p = rand_probs(rng, (4, 5, 5, 3))
    counts = [harden_with_threshold(p, t).valid.sum() for t in (0.0, 0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


# ---------------------------------------------------------------------------
# denoise
# ---------------------------------------------------------------------------


def test_uniform_omega_keeps_argmax():
    rng = np.random.default_rng(2)
    p0 = rand_probs(rng, (2, 4, 4, 3))
    omega = np.full_like(p0, 1 / 3)
    out, fallback = denoise(p0, omega, 0.0)
    assert fallback == 0
    np.testing.assert_array_equal(out.labels, p0.argmax(axis=-1))


def test_uniform_p0_takes_argmax_omega():
    rng = np.random.default_rng(3)
    omega = rand_probs(rng, (1, 2, 2, 4))
    p0 = np.full_like(omega, 0.25)
    out, _ = denoise(p0, omega, 0.0)
    np.testing.assert_array_equal(out.labels, omega.argmax(axis=-1))


def test_denoise_flips_label():
    p0 = np.array([[[[0.6, 0.4]]]])
    omega = np.array([[[[0.25, 0.75]]]])
    out, _ = denoise(p0, omega, 0.0)
    # products (0.15, 0.30) pick class 1
    assert out.labels[0, 0, 0] == 1
    assert out.valid[0, 0, 0] == 1.0


def test_denoise_gate_uses_renormalized_product():
    p0 = np.array([[[[0.6, 0.4]]]])
    omega = np.array([[[[0.5, 0.5]]]])
    out, _ = denoise(p0, omega, 0.55)
    assert out.valid[0, 0, 0] == 1.0  # renormalized product equals p0 again
    out2, _ = denoise(p0, omega, 0.65)
    assert out2.valid[0, 0, 0] == 0.0


def test_denoise_zero_product_fallback():
    p0 = np.array([[[[0.7, 0.3, 0.0]]]])
    omega = np.array([[[[0.0, 0.0, 1.0]]]])
    out, fallback = denoise(p0, omega, 0.0)
    assert fallback == 1
    assert out.labels[0, 0, 0] == 0  # argmax p0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_denoise_matches_direct_product_argmax(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    p0 = rand_probs(rng, (2, 3, 3, k))
    omega = rand_probs(rng, (2, 3, 3, k))
    out, fallback = denoise(p0, omega, 0.0)
    assert fallback == 0
    np.testing.assert_array_equal(out.labels, (omega * p0).argmax(axis=-1))
    assert np.all(out.onehot.sum(axis=-1) == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_denoise_monotone_in_omega(seed):
    rng = np.random.default_rng(seed)
    p0 = rand_probs(rng, (1, 2, 2, 3))
    omega = rand_probs(rng, (1, 2, 2, 3))
    out, _ = denoise(p0, omega, 0.0)
    j = int(rng.integers(0, 3))
    boosted = omega.copy()
    boosted[..., j] *= 4.0
    out2, _ = denoise(p0, boosted, 0.0)
    # raising omega_j never moves the label away from class j
    moved_away = (out.labels == j) & (out2.labels != j)
    assert not moved_away.any()


# ---------------------------------------------------------------------------
# store persistence
# ---------------------------------------------------------------------------


def test_store_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    entries = {7: rand_probs(rng, (2, 2, 3)), 9: rand_probs(rng, (2, 2, 3))}
    store = StagePseudoStore(entries, stage=1)
    store.save(tmp_path / "store")
    back = StagePseudoStore.load(tmp_path / "store")
    assert back.stage == 1
    assert set(back.entries) == {7, 9}
    np.testing.assert_allclose(back.get(7), entries[7].astype(np.float32))


def test_store_missing_id():
    store = StagePseudoStore({1: np.full((1, 1, 2), 0.5)}, stage=0)
    with pytest.raises(StateError):
        store.get(2)


# ---------------------------------------------------------------------------
# mix_rectify
# ---------------------------------------------------------------------------


def build_fixture(seed=0):
    rng = np.random.default_rng(seed)
    teacher = build_model("mlp", K=2, C=3, seed=3, in_channels=2).eval()
    bank = new_bank(2, 3, lam=0.9)
    bank.eta = rng.normal(size=(2, 3))
    bank.seen[:] = True
    x1 = rng.random((1, 2, 2, 2))
    x2 = rng.random((1, 2, 2, 2))
    store = StagePseudoStore({0: rand_probs(rng, (2, 2, 2)),
                              1: rand_probs(rng, (2, 2, 2))}, stage=0)
    return teacher, bank, store, x1, x2


def test_mix_rectify_full_mask_equals_single_denoise():
    teacher, bank, store, x1, x2 = build_fixture()
    m = np.ones((2, 2))
    mixed, detail = mix_rectify(teacher, x1, x2, [0], [1], m, bank, store,
                                POLICY, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(mixed.onehot, detail.y1.onehot)
    solo, _, _ = rectified_labels(teacher, x1, [0], bank, store, POLICY, 0.0,
                                  np.random.default_rng(0))
    np.testing.assert_array_equal(mixed.onehot, solo.onehot)


def test_mix_rectify_same_image_mask_independent():
    teacher, bank, store, x1, _ = build_fixture()
    m1 = sample_rect_mask(2, 2, np.random.default_rng(1))
    m2 = sample_rect_mask(2, 2, np.random.default_rng(5))
    a, _ = mix_rectify(teacher, x1, x1, [0], [0], m1, bank, store, POLICY, 0.0,
                       np.random.default_rng(0))
    b, _ = mix_rectify(teacher, x1, x1, [0], [0], m2, bank, store, POLICY, 0.0,
                       np.random.default_rng(0))
    np.testing.assert_array_equal(a.onehot, b.onehot)


def test_mix_rectify_composition_oracle():
    teacher, bank, store, x1, x2 = build_fixture(seed=2)
    cm = sample_rect_mask(2, 2, np.random.default_rng(2))
    mixed, detail = mix_rectify(teacher, x1, x2, [0], [1], cm, bank, store,
                                POLICY, 0.0, np.random.default_rng(0))
    by_hand = mix_label_maps(detail.y1.onehot, detail.y2.onehot, cm)
    np.testing.assert_array_equal(mixed.onehot, by_hand)
    # label equals the side the mask picked, pixel by pixel
    for r in range(2):
        for c in range(2):
            src = detail.y1 if cm.m[r, c] == 1 else detail.y2
            assert mixed.labels[0, r, c] == src.labels[0, r, c]


def test_mix_rectify_missing_store_entry():
    teacher, bank, store, x1, x2 = build_fixture()
    with pytest.raises(StateError):
        mix_rectify(teacher, x1, x2, [0], [42], np.ones((2, 2)), bank, store,
                    POLICY, 0.0, np.random.default_rng(0))


def test_teacher_softmax_confidence_path():
    teacher, bank, store, x1, _ = build_fixture()
    out, feats, _ = rectified_labels(teacher, x1, [0], bank, store, POLICY, 0.0,
                                     np.random.default_rng(0),
                                     confidence_source="teacher_softmax")
    _, probs = teacher_predict(teacher, x1, POLICY, np.random.default_rng(0))
    expected, _ = denoise(store.get_batch([0]), probs, 0.0)
    np.testing.assert_array_equal(out.onehot, expected.onehot)
