import numpy as np
import pytest

from rml_lab.augment import mix_images
from rml_lab.data import Dataset, generate_shapes_dataset, make_split
from rml_lab.errors import ConfigError
from rml_lab.netcore import cross_entropy, softmax
from rml_lab.rectify import harden_with_threshold
from rml_lab.trainer import (
    ModelQuad,
    RmlConfig,
    evaluate_model,
    init_stage,
    labeled_step,
    run_rml,
    train_baseline,
    unlabeled_step,
)

K = 4


def tiny_cfg(**kw) -> RmlConfig:
    defaults = dict(
        variant="rml", arch_pair=("cnn", "cnn"), feature_dim=8,
        lr=0.08, baseline_iterations=60, iterations=30, stages=1,
        batch_labeled=4, batch_unlabeled=3, eval_interval=15,
        eval_subset=16, pseudo_subset=16, seed=0,
        weak_strength=0.1, strong_strength=0.8,
    )
    defaults.update(kw)
    return RmlConfig(**defaults).validate()


@pytest.fixture(scope="module")
def shapes_data():
    train = generate_shapes_dataset(28, 8, 8, K, 0.2, seed=11)
    ev = generate_shapes_dataset(16, 8, 8, K, 0.2, seed=12)
    split = make_split(len(train), 0.25, seed=0)
    return train.subset(split.labeled), train.subset(split.unlabeled), ev


def clone_quad(quad: ModelQuad) -> ModelQuad:
    return ModelQuad(
        [s.clone() for s in quad.students],
        [t.clone() for t in quad.teachers],
        [None if b is None else b.copy() for b in quad.banks],
    )


def make_rngs(seed=5):
    ss = np.random.SeedSequence(seed).spawn(5)
    return {
        "mask": np.random.default_rng(ss[0]),
        "student": [np.random.default_rng(ss[1]), np.random.default_rng(ss[2])],
        "teacher": [np.random.default_rng(ss[3]), np.random.default_rng(ss[4])],
    }


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def separable_dataset(n=64, seed=0):
    # two classes decided by channel 0 with a wide margin: trivially separable
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, (n, 1, 1))
    x = rng.random((n, 1, 1, 3)).astype(np.float32) * 0.2
    x[..., 0] += 0.8 * labels[..., None][:, :, :, 0]
    return Dataset(x.astype(np.float32), labels, np.arange(n))


def test_baseline_separable_reaches_high_accuracy():
    ds = separable_dataset()
    cfg = tiny_cfg(arch_pair="mlp", feature_dim=8, baseline_iterations=400,
                   lr=0.5, noise_model=False)
    model = train_baseline(ds, cfg, k=2)
    preds = softmax(model.eval().forward(ds.images.astype(np.float64))[1]).argmax(-1)
    assert (preds == ds.labels).mean() >= 0.99


def test_baseline_deterministic(shapes_data):
    labeled, _, _ = shapes_data
    cfg = tiny_cfg()
    a = train_baseline(labeled, cfg, k=K)
    b = train_baseline(labeled, cfg, k=K)
    for key in a.params:
        np.testing.assert_array_equal(a.params[key], b.params[key])


def test_baseline_improves_over_init(shapes_data):
    labeled, _, ev = shapes_data
    cfg = tiny_cfg(baseline_iterations=120)
    records = []
    train_baseline(labeled, cfg, k=K, eval_set=ev, records=records)
    assert records[-1].loss_labeled[0] < records[0].loss_labeled[0] + 0.5
    assert np.isfinite(records[-1].miou_students[0])


# ---------------------------------------------------------------------------
# init_stage
# ---------------------------------------------------------------------------


def test_init_stage_contracts(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg()
    base = train_baseline(labeled, cfg, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
    for model in quad.students + quad.teachers:
        for key in base.params:
            np.testing.assert_array_equal(model.params[key], base.params[key])
    assert quad.teachers[0].mode == "eval" and quad.students[0].mode == "train"
    # store covers every unlabeled id exactly once
    assert len(stores[0]) == len(unlabeled)
    assert all(int(i) in stores[0] for i in unlabeled.ids)
    # banks identical bitwise at init
    np.testing.assert_array_equal(quad.banks[0].eta, quad.banks[1].eta)
    np.testing.assert_array_equal(quad.banks[0].seen, quad.banks[1].seen)


def test_init_stage_skips_banks_for_iml(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg(variant="iml")
    base = train_baseline(labeled, cfg, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
    assert quad.banks == [None, None]
    assert stores == (None, None)


# ---------------------------------------------------------------------------
# labeled_step
# ---------------------------------------------------------------------------


def test_labeled_step_loss_matches_direct_ce(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg(noise_model=False, weak_strength=0.0)
    base = train_baseline(labeled, cfg, k=K)
    quad, _ = init_stage(base, labeled, unlabeled, cfg, k=K)
    frozen = clone_quad(quad)
    x, y = labeled.images[:4], labeled.labels[:4]
    losses = labeled_step(quad, x, y, cfg, lr=0.05, k=K,
                          rngs=[np.random.default_rng(0), np.random.default_rng(1)])
    for i in range(2):
        p = softmax(frozen.students[i].eval().forward(x.astype(np.float64))[1])
        expected = cross_entropy(p, np.eye(K)[y])
        assert losses[i] == pytest.approx(expected, rel=1e-9)


def test_labeled_step_zero_lr_keeps_parameters(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg()
    base = train_baseline(labeled, cfg, k=K)
    quad, _ = init_stage(base, labeled, unlabeled, cfg, k=K)
    before = [{k2: v.copy() for k2, v in s.params.items()} for s in quad.students]
    losses = labeled_step(quad, labeled.images[:4], labeled.labels[:4], cfg,
                          lr=0.0, k=K,
                          rngs=[np.random.default_rng(0), np.random.default_rng(1)])
    assert all(np.isfinite(l) for l in losses)
    for i, s in enumerate(quad.students):
        for key in s.params:
            np.testing.assert_array_equal(s.params[key], before[i][key])


def test_labeled_step_overfits_one_batch(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg(noise_model=False, weak_strength=0.0)
    base = train_baseline(labeled, cfg, k=K)
    quad, _ = init_stage(base, labeled, unlabeled, cfg, k=K)
    rngs = [np.random.default_rng(0), np.random.default_rng(1)]
    x, y = labeled.images[:4], labeled.labels[:4]
    first = labeled_step(quad, x, y, cfg, lr=0.05, k=K, rngs=rngs)
    last = None
    for _ in range(49):
        last = labeled_step(quad, x, y, cfg, lr=0.05, k=K, rngs=rngs)
    assert last[0] < first[0] and last[1] < first[1]


def test_labeled_step_leaves_teachers_alone(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg()
    base = train_baseline(labeled, cfg, k=K)
    quad, _ = init_stage(base, labeled, unlabeled, cfg, k=K)
    before = [{k2: v.copy() for k2, v in t.params.items()} for t in quad.teachers]
    labeled_step(quad, labeled.images[:4], labeled.labels[:4], cfg, lr=0.1, k=K,
                 rngs=[np.random.default_rng(0), np.random.default_rng(1)])
    for i, t in enumerate(quad.teachers):
        for key in t.params:
            np.testing.assert_array_equal(t.params[key], before[i][key])


# ---------------------------------------------------------------------------
# unlabeled_step
# ---------------------------------------------------------------------------


def unlabeled_batches(unlabeled, b=3):
    return ((unlabeled.images[:b], unlabeled.ids[:b]),
            (unlabeled.images[b:2 * b], unlabeled.ids[b:2 * b]))


def test_rml_with_uniform_confidence_equals_iml_labels(shapes_data):
    # identical prototype rows -> equidistant -> uniform omega; the rectified
    # argmax then equals the plain hardened pseudo label at stage init
    labeled, unlabeled, _ = shapes_data
    cfg_rml = tiny_cfg(variant="rml", weak_strength=0.0, noise_model=False)
    base = train_baseline(labeled, cfg_rml, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg_rml, k=K)
    for bank in quad.banks:
        bank.eta[:] = bank.eta[0]
        bank.seen[:] = True
    b1, b2 = unlabeled_batches(unlabeled)
    from rml_lab.trainer import _pseudo_for_learner
    masks = np.ones((len(b1[0]),) + unlabeled.images.shape[1:3])
    mixed_rml, *_ = _pseudo_for_learner(quad, 0, b1[0], b2[0], b1[1], b2[1],
                                        masks, stores, cfg_rml, cfg_rml.policy(),
                                        np.random.default_rng(0))
    cfg_iml = tiny_cfg(variant="iml", weak_strength=0.0, noise_model=False)
    quad_iml, stores_iml = init_stage(base, labeled, unlabeled, cfg_iml, k=K)
    mixed_iml, *_ = _pseudo_for_learner(quad_iml, 0, b1[0], b2[0], b1[1], b2[1],
                                        masks, stores_iml, cfg_iml, cfg_iml.policy(),
                                        np.random.default_rng(0))
    np.testing.assert_array_equal(mixed_rml.labels, mixed_iml.labels)


def test_teacher_update_is_exactly_ema_of_post_step_student(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg()
    base = train_baseline(labeled, cfg, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
    teacher_before = [{k2: v.copy() for k2, v in t.params.items()}
                      for t in quad.teachers]
    b1, b2 = unlabeled_batches(unlabeled)
    unlabeled_step(quad, b1, b2, stores, cfg, lr=0.05, k=K, rngs=make_rngs())
    for i in range(2):
        for key in quad.teachers[i].params:
            expected = (cfg.alpha * teacher_before[i][key]
                        + (1 - cfg.alpha) * quad.students[i].params[key])
            np.testing.assert_allclose(quad.teachers[i].params[key], expected,
                                       atol=1e-12)


def test_ema_applied_after_sgd(shapes_data):
    # alpha=0 makes the teacher a copy of whatever the student is after the
    # step; equality proves the EMA happens last
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg(alpha=0.0)
    base = train_baseline(labeled, cfg, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
    b1, b2 = unlabeled_batches(unlabeled)
    unlabeled_step(quad, b1, b2, stores, cfg, lr=0.05, k=K, rngs=make_rngs())
    for i in range(2):
        for key in quad.teachers[i].params:
            np.testing.assert_array_equal(quad.teachers[i].params[key],
                                          quad.students[i].params[key])


def test_four_term_loss_oracle(shapes_data):
    # teachers equal students at init; iml losses must equal four CE values
    # computed independently, and reduce to direct_ml cross terms + self terms
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg(variant="iml", noise_model=False, noise_input=False,
                   weak_strength=0.0)
    base = train_baseline(labeled, cfg, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
    frozen = clone_quad(quad)
    b1, b2 = unlabeled_batches(unlabeled)
    rngs = make_rngs(seed=7)
    losses, info = unlabeled_step(quad, b1, b2, stores, cfg, lr=0.05, k=K, rngs=rngs)

    # oracle: recompute every term from the frozen pre-step state
    mask_rng = make_rngs(seed=7)["mask"]
    from rml_lab.augment import sample_rect_mask
    h, w = b1[0].shape[1:3]
    mask_stack = np.stack([sample_rect_mask(h, w, mask_rng).m for _ in range(len(b1[0]))])
    x_mix = mix_images(b1[0], b2[0], mask_stack)
    yhat = []
    for i in range(2):
        p1 = softmax(frozen.teachers[i].forward(b1[0].astype(np.float64))[1])
        p2 = softmax(frozen.teachers[i].forward(b2[0].astype(np.float64))[1])
        h1 = harden_with_threshold(p1, 0.0)
        h2 = harden_with_threshold(p2, 0.0)
        mixed = mask_stack[..., None] * h1.onehot + (1 - mask_stack[..., None]) * h2.onehot
        yhat.append(mixed)
    for i in range(2):
        p_student = softmax(frozen.students[i].eval().forward(x_mix)[1])
        ce_peer = cross_entropy(p_student, yhat[1 - i])
        ce_self = cross_entropy(p_student, yhat[i])
        assert info.loss_terms[i][0] == pytest.approx(ce_peer, rel=1e-9)
        assert info.loss_terms[i][1] == pytest.approx(ce_self, rel=1e-9)
        assert losses[i] == pytest.approx(ce_peer + ce_self, rel=1e-9)


def test_direct_ml_uses_cross_terms_only(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg(variant="direct_ml", noise_model=False, noise_input=False,
                   weak_strength=0.0)
    base = train_baseline(labeled, cfg, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
    frozen = clone_quad(quad)
    b1, b2 = unlabeled_batches(unlabeled)
    losses, info = unlabeled_step(quad, b1, b2, stores, cfg, lr=0.05, k=K,
                                  rngs=make_rngs(seed=7))
    assert all(len(t) == 1 for t in info.loss_terms)
    # teachers equal students at init, so the cross term must match the
    # iml peer term computed from the same frozen state
    mask_rng = make_rngs(seed=7)["mask"]
    from rml_lab.augment import sample_rect_mask
    h, w = b1[0].shape[1:3]
    mask_stack = np.stack([sample_rect_mask(h, w, mask_rng).m for _ in range(len(b1[0]))])
    x_mix = mix_images(b1[0], b2[0], mask_stack)
    for i in range(2):
        peer = 1 - i
        p1 = softmax(frozen.students[peer].eval().forward(b1[0].astype(np.float64))[1])
        p2 = softmax(frozen.students[peer].eval().forward(b2[0].astype(np.float64))[1])
        mixed = (mask_stack[..., None] * harden_with_threshold(p1, 0.0).onehot
                 + (1 - mask_stack[..., None]) * harden_with_threshold(p2, 0.0).onehot)
        p_student = softmax(frozen.students[i].eval().forward(x_mix)[1])
        assert losses[i] == pytest.approx(cross_entropy(p_student, mixed), rel=1e-9)


def test_threshold_monotone_valid_pixels(shapes_data):
    labeled, unlabeled, _ = shapes_data
    base_cfg = tiny_cfg()
    base = train_baseline(labeled, base_cfg, k=K)
    counts = []
    for tau in (0.0, 0.3, 0.6, 0.9):
        cfg = tiny_cfg(tau=tau)
        quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
        b1, b2 = unlabeled_batches(unlabeled)
        _, info = unlabeled_step(quad, b1, b2, stores, cfg, lr=0.05, k=K,
                                 rngs=make_rngs(seed=3))
        counts.append(sum(info.valid_pixels))
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_bank_update_happens_in_unlabeled_step(shapes_data):
    labeled, unlabeled, _ = shapes_data
    cfg = tiny_cfg()
    base = train_baseline(labeled, cfg, k=K)
    quad, stores = init_stage(base, labeled, unlabeled, cfg, k=K)
    eta_before = quad.banks[0].eta.copy()
    b1, b2 = unlabeled_batches(unlabeled)
    unlabeled_step(quad, b1, b2, stores, cfg, lr=0.05, k=K, rngs=make_rngs(),
                   labeled_batch=(labeled.images[:4], labeled.labels[:4]))
    assert not np.array_equal(quad.banks[0].eta, eta_before)


# ---------------------------------------------------------------------------
# run_rml
# ---------------------------------------------------------------------------


def test_run_rml_bookkeeping_and_determinism(shapes_data, tmp_path):
    labeled, unlabeled, ev = shapes_data
    cfg = tiny_cfg(stages=2, iterations=30, eval_interval=15)
    res1 = run_rml(labeled, unlabeled, ev, cfg, k=K, out_dir=tmp_path / "a")
    assert len(res1.records) == cfg.stages * cfg.iterations // cfg.eval_interval
    assert res1.summary["stages"][0]["stage"] == 1
    assert (tmp_path / "a" / "metrics.jsonl").exists()
    assert (tmp_path / "a" / "stage1_student1.ckpt").exists()
    cfg2 = tiny_cfg(stages=2, iterations=30, eval_interval=15)
    res2 = run_rml(labeled, unlabeled, ev, cfg2, k=K, out_dir=tmp_path / "b")
    assert [r.to_dict() for r in res1.records] == [r.to_dict() for r in res2.records]
    assert ((tmp_path / "a" / "metrics.jsonl").read_bytes()
            == (tmp_path / "b" / "metrics.jsonl").read_bytes())


def test_run_supervised_matches_train_baseline(shapes_data):
    labeled, unlabeled, ev = shapes_data
    cfg = tiny_cfg(variant="supervised")
    res = run_rml(labeled, unlabeled, ev, cfg, k=K)
    direct = train_baseline(labeled, tiny_cfg(variant="supervised"), k=K)
    for key in direct.params:
        np.testing.assert_array_equal(res.model.params[key], direct.params[key])
    miou, _ = evaluate_model(direct, ev, K, cfg.eval_subset)
    assert res.summary["final_miou"] == pytest.approx(miou)


def test_run_rml_single_stage_contract(shapes_data):
    labeled, unlabeled, ev = shapes_data
    cfg = tiny_cfg(stages=1)
    res = run_rml(labeled, unlabeled, ev, cfg, k=K)
    assert len(res.summary["stages"]) == 1
    assert res.summary["final_miou"] == res.summary["stages"][0]["final_miou"]
    assert res.summary["initial_pseudo_acc"] is not None


def test_cutmix_needs_pixel_labels():
    ds = separable_dataset()
    cfg = tiny_cfg(arch_pair="mlp", use_cutmix=True)
    with pytest.raises(ConfigError):
        run_rml(ds, ds, ds, cfg, k=2)


def test_classification_pipeline_without_cutmix():
    train = separable_dataset(n=60, seed=1)
    ev = separable_dataset(n=20, seed=2)
    split = make_split(60, 0.2, seed=0)
    cfg = tiny_cfg(arch_pair="mlp", use_cutmix=False, variant="iml_noise",
                   iterations=20, eval_interval=10, baseline_iterations=40)
    res = run_rml(train.subset(split.labeled), train.subset(split.unlabeled),
                  ev, cfg, k=2)
    assert len(res.records) == 2
    assert res.records[-1].tv_teachers is not None


def test_hetero_pair_runs(shapes_data):
    labeled, unlabeled, ev = shapes_data
    cfg = tiny_cfg(arch_pair=("mlp", "cnn"), feature_dim=(6, 8), variant="iml",
                   iterations=10, eval_interval=10, baseline_iterations=30)
    res = run_rml(labeled, unlabeled, ev, cfg, k=K)
    assert res.quad.students[0].arch.kind == "mlp"
    assert res.quad.students[1].arch.kind == "cnn"
    assert len(res.records) == 1
