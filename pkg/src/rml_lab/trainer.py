"""Supervised baseline training and the robust mutual learning loop.

One iteration follows the reference procedure: a labeled step for both
students, an unlabeled step (CutMix pair, per-learner rectified pseudo
labels, one SGD step per student on the peer+self terms), then batch
prototypes, bank momentum updates and the teacher EMA updates, in that
order. Stage boundaries recompute the frozen soft pseudo labels from the
mean teachers and restart the loop on them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .augment import (
    AugmentPolicy,
    mix_images,
    mix_label_maps,
    mix_valid_masks,
    photometric,
    sample_rect_mask,
)
from .data import Dataset
from .errors import ConfigError, TrainingError
from .metrics import pseudo_accuracy, segmentation_scores, tv_distance
from .netcore import (
    NetModel,
    NoiseConfig,
    build_model,
    ema_params,
    loss_and_gradients,
    multi_loss_and_gradients,
    save_checkpoint,
    sgd_step,
    softmax,
)
from .protobank import bank_tensors, batch_prototypes, init_bank, update_bank
from .rectify import (
    OneHotMap,
    StagePseudoStore,
    harden_with_threshold,
    mix_rectify,
    rectified_labels,
    teacher_predict,
)

VARIANTS = ("supervised", "direct_ml", "iml", "iml_noise", "rml")


@dataclass
class RmlConfig:
    """Hyperparameters for one training run."""

    variant: str = "rml"
    arch_pair: tuple = ("cnn", "cnn")
    feature_dim: tuple = (16, 16)
    hidden: int = 64
    patch: int = 2
    labeled_fraction: float = 1 / 8
    lr: float = 0.1
    lr_power: float = 0.9
    baseline_iterations: int = 800
    iterations: int = 1000
    stages: int = 2
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    tau: float = 0.0
    lam: float = 0.999
    alpha: float = 0.99
    noise_input: bool = True
    noise_model: bool = True
    dropout_rate: float = 0.5
    sd_survival: float = 0.8
    confidence_source: str = "prototype"
    init_from_baseline: bool = True
    use_cutmix: bool = True
    eval_interval: int = 200
    eval_subset: int = 256
    pseudo_subset: int = 128
    weak_strength: float = 0.2
    strong_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.arch_pair, (list, tuple)):
            self.arch_pair = tuple(self.arch_pair)
        else:
            self.arch_pair = (self.arch_pair, self.arch_pair)
        if isinstance(self.feature_dim, (list, tuple)):
            self.feature_dim = tuple(self.feature_dim)
        else:
            self.feature_dim = (self.feature_dim, self.feature_dim)

    def validate(self) -> "RmlConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.arch_pair) != 2:
            raise ConfigError(f"arch_pair needs exactly 2 entries, got {self.arch_pair}")
        if len(self.feature_dim) != 2 or min(self.feature_dim) < 1:
            raise ConfigError(f"feature_dim must be 1 or 2 positive ints, got {self.feature_dim}")
        for name, lo, hi in (("tau", 0.0, 0.999999), ("alpha", 0.0, 1.0),
                             ("lam", 0.0, 0.999999), ("labeled_fraction", 1e-9, 1.0),
                             ("dropout_rate", 0.0, 1.0), ("sd_survival", 0.0, 1.0)):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigError(f"{name} out of range [{lo},{hi}]: {v}")
        for name in ("iterations", "stages", "batch_labeled", "batch_unlabeled",
                     "baseline_iterations", "eval_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be nonnegative: {self.lr}")
        if self.iterations % self.eval_interval:
            raise ConfigError("iterations must be a multiple of eval_interval")
        if self.confidence_source not in ("prototype", "teacher_softmax"):
            raise ConfigError(f"unknown confidence_source {self.confidence_source!r}")
        return self

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(weak_strength=self.weak_strength,
                             strong_strength=self.strong_strength)

    def model_noise(self) -> NoiseConfig:
        if not self.noise_model:
            return NoiseConfig(enabled=False)
        return NoiseConfig(dropout_rate=self.dropout_rate,
                           stochastic_depth_survival=self.sd_survival, enabled=True)

    @property
    def needs_rectification(self) -> bool:
        return self.variant == "rml"


@dataclass
class ModelQuad:
    """Two students, their EMA mean teachers, and per-learner banks."""

    students: list
    teachers: list
    banks: list


@dataclass
class StepInfo:
    """Diagnostics from one unlabeled step."""

    loss_terms: list          # per learner: per-term CE values
    valid_pixels: list        # per learner: loss-contributing pixel count
    fallback_pixels: int = 0


@dataclass
class MetricsRecord:
    iteration: int
    stage: int
    lr: float
    loss_labeled: list
    loss_unlabeled: list | None
    miou_students: list
    acc_students: list
    miou_teachers: list | None
    acc_teachers: list | None
    tv_teachers: float | None
    tv_students: float | None
    pseudo_acc: list | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    quad: ModelQuad | None
    model: NetModel | None
    records: list
    summary: dict


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def poly_lr(base: float, it: int, total: int, power: float) -> float:
    return base * (1.0 - it / total) ** power


def onehot_labels(labels: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[np.asarray(labels, dtype=np.int64)]


def in_channels_for(arch: str, images: np.ndarray, labels: np.ndarray) -> int:
    """Channels the model sees; vector tasks feed mlp the flattened image."""
    n, h, w, ch = images.shape
    if labels.shape[1:] == (1, 1) and (h, w) != (1, 1):
        if arch != "mlp":
            raise ConfigError(
                f"{arch} produces per-pixel output but the dataset has 1x1 labels; "
                "only mlp supports flattened classification input"
            )
        return h * w * ch
    return ch


def _build_learner(cfg: RmlConfig, i: int, k: int, images, labels, seed) -> NetModel:
    return build_model(
        cfg.arch_pair[i], K=k, C=cfg.feature_dim[i], noise=cfg.model_noise(),
        seed=seed, in_channels=in_channels_for(cfg.arch_pair[i], images, labels),
        hidden=cfg.hidden, patch=cfg.patch,
    )


def soft_predictions(model: NetModel, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Eval-mode softmax predictions over clean images."""
    was = model.mode
    model.eval()
    try:
        out = []
        for start in range(0, len(images), batch):
            _, logits = model.forward(images[start:start + batch])
            out.append(softmax(logits))
        return np.concatenate(out)
    finally:
        model.mode = was


def evaluate_model(model: NetModel, ds: Dataset, k: int, limit: int | None = None):
    """Eval mIoU and pixel accuracy on clean images."""
    images = ds.images if limit is None else ds.images[:limit]
    labels = ds.labels if limit is None else ds.labels[:limit]
    preds = soft_predictions(model, images).argmax(axis=-1)
    _, _, miou, acc = segmentation_scores(preds, labels, k)
    return miou, acc


def _sample(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.choice(n, size=size, replace=n < size)


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def train_baseline(labeled: Dataset, cfg: RmlConfig, k: int, arch_index: int = 0,
                   seed: int | None = None, eval_set: Dataset | None = None,
                   records: list | None = None) -> NetModel:
    """Supervised training on weakly augmented labeled data only."""
    if len(labeled) == 0:
        raise ConfigError("baseline training needs a nonempty labeled set")
    seed = cfg.seed if seed is None else seed
    ss = np.random.SeedSequence([seed, 0xBA5E])
    rng_data, rng_aug, rng_noise = [np.random.default_rng(s) for s in ss.spawn(3)]
    model = _build_learner(cfg, arch_index, k, labeled.images, labeled.labels, seed)
    policy = cfg.policy()
    targets = onehot_labels(labeled.labels, k)
    for it in range(cfg.baseline_iterations):
        idx = _sample(rng_data, len(labeled), cfg.batch_labeled)
        x = photometric(labeled.images[idx], policy, "weak", rng_aug)
        loss, grads = loss_and_gradients(model, x, targets[idx], rng=rng_noise)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite baseline loss at iteration {it}")
        lr = poly_lr(cfg.lr, it, cfg.baseline_iterations, cfg.lr_power)
        sgd_step(model, grads, lr)
        if records is not None and (it + 1) % cfg.eval_interval == 0:
            miou, acc = (evaluate_model(model, eval_set, k, cfg.eval_subset)
                         if eval_set is not None else (float("nan"), float("nan")))
            records.append(MetricsRecord(
                iteration=it + 1, stage=0, lr=lr,
                loss_labeled=[loss], loss_unlabeled=None,
                miou_students=[miou], acc_students=[acc],
                miou_teachers=None, acc_teachers=None,
                tv_teachers=None, tv_students=None, pseudo_acc=None,
            ))
    return model


# ---------------------------------------------------------------------------
# stage setup
# ---------------------------------------------------------------------------


def init_stage(baselines, labeled: Dataset, unlabeled: Dataset, cfg: RmlConfig,
               k: int, stage: int = 1):
    """Clone students/teachers from the stage baselines; build banks and stores.

    ``baselines`` is one model (used for both learners) or a pair. The first
    stage stores each baseline's own soft predictions; later stages pass the
    previous mean teachers and the store becomes their elementwise average,
    shared by both learners. Banks and stores are only materialized for the
    rectifying variant.
    """
    if isinstance(baselines, NetModel):
        baselines = (baselines, baselines)
    students, teachers, banks = [], [], []
    for base in baselines:
        s = base.clone()
        s.noise = cfg.model_noise()
        students.append(s.train())
        t = base.clone()
        t.noise = cfg.model_noise()
        teachers.append(t.eval())
        if cfg.needs_rectification and cfg.confidence_source == "prototype":
            banks.append(init_bank(base, labeled, unlabeled, k=k, lam=cfg.lam))
        else:
            banks.append(None)
    quad = ModelQuad(students, teachers, banks)
    stores = (None, None)
    if cfg.needs_rectification and len(unlabeled) > 0:
        if baselines[0] is baselines[1]:
            p0 = soft_predictions(baselines[0], unlabeled.images)
            shared = StagePseudoStore(dict(zip(unlabeled.ids.tolist(), p0)), stage)
            stores = (shared, shared)
        elif stage <= 1:
            per = []
            for base in baselines:
                p0 = soft_predictions(base, unlabeled.images)
                per.append(StagePseudoStore(dict(zip(unlabeled.ids.tolist(), p0)), stage))
            stores = tuple(per)
        else:
            p0 = 0.5 * (soft_predictions(baselines[0], unlabeled.images)
                        + soft_predictions(baselines[1], unlabeled.images))
            shared = StagePseudoStore(dict(zip(unlabeled.ids.tolist(), p0)), stage)
            stores = (shared, shared)
    return quad, stores


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def labeled_step(quad: ModelQuad, images: np.ndarray, labels: np.ndarray,
                 cfg: RmlConfig, lr: float, k: int, rngs) -> list:
    """One supervised SGD step per student; teachers untouched."""
    targets = onehot_labels(labels, k)
    losses = []
    policy = cfg.policy()
    for i, student in enumerate(quad.students):
        x = photometric(images, policy, "weak", rngs[i])
        loss, grads = loss_and_gradients(student, x, targets, rng=rngs[i])
        if not np.isfinite(loss):
            raise TrainingError("non-finite labeled loss")
        sgd_step(student, grads, lr)
        losses.append(loss)
    return losses


def _student_predict(student: NetModel, x, policy, rng):
    """Pseudo labels from a student itself (direct mutual learning)."""
    was = student.mode
    student.eval()
    try:
        return teacher_predict(student, x, policy, rng)
    finally:
        student.mode = was


def _pseudo_for_learner(quad, i, x1, x2, ids1, ids2, masks, stores, cfg, policy, rng):
    """Per-learner mixed pseudo labels plus features for the bank update.

    Returns ``(mixed, feats1, feats2, y1, y2, fallback_pixels)``.
    """
    if cfg.needs_rectification:
        if x2 is None:
            y1, f1, fb = rectified_labels(quad.teachers[i], x1, ids1, quad.banks[i],
                                          stores[i], policy, cfg.tau, rng,
                                          cfg.confidence_source)
            return y1, f1, None, y1, None, fb
        mixed, detail = mix_rectify(quad.teachers[i], x1, x2, ids1, ids2, masks,
                                    quad.banks[i], stores[i], policy, cfg.tau, rng,
                                    cfg.confidence_source)
        return (mixed, detail.feats1, detail.feats2, detail.y1, detail.y2,
                detail.fallback_pixels)
    if cfg.variant in ("iml", "iml_noise"):
        predict = lambda x: teacher_predict(quad.teachers[i], x, policy, rng)
    else:  # direct_ml: supervision from the student itself
        predict = lambda x: _student_predict(quad.students[i], x, policy, rng)
    f1, p1 = predict(x1)
    y1 = harden_with_threshold(p1, cfg.tau)
    if x2 is None:
        return y1, f1, None, y1, None, 0
    f2, p2 = predict(x2)
    y2 = harden_with_threshold(p2, cfg.tau)
    mixed = OneHotMap(mix_label_maps(y1.onehot, y2.onehot, masks),
                      mix_valid_masks(y1.valid, y2.valid, masks))
    return mixed, f1, f2, y1, y2, 0


def unlabeled_step(quad: ModelQuad, batch1, batch2, stores, cfg: RmlConfig,
                   lr: float, k: int, rngs: dict, labeled_batch=None):
    """One mutual-learning step on an unlabeled pair.

    ``batch1``/``batch2`` are ``(images, ids)``; ``batch2`` may be ``None``
    when CutMix is disabled (vector classification tasks). Both learners'
    pseudo labels and gradients come from pre-step parameters; afterwards
    batch prototypes update the banks and the teachers take their EMA step.
    Returns ``(per_student_losses, StepInfo)``.
    """
    x1, ids1 = batch1
    x2, ids2 = batch2 if batch2 is not None else (None, None)
    policy = cfg.policy()
    h, w = x1.shape[1:3]
    if x2 is not None:
        mask_stack = np.stack([sample_rect_mask(h, w, rngs["mask"]).m
                               for _ in range(len(x1))])
        x_mix = mix_images(x1, x2, mask_stack)
    else:
        mask_stack = None
        x_mix = np.asarray(x1, dtype=np.float64)

    labels, feats1, feats2, y1, y2 = [], [], [], [], []
    fallback = 0
    for i in range(2):
        mixed, f1, f2, a, b, fb = _pseudo_for_learner(
            quad, i, x1, x2, ids1, ids2, mask_stack, stores, cfg, policy,
            rngs["teacher"][i])
        labels.append(mixed)
        feats1.append(f1)
        feats2.append(f2)
        y1.append(a)
        y2.append(b)
        fallback += fb

    losses, grads_list, info_terms, info_valid = [], [], [], []
    for i, student in enumerate(quad.students):
        xs = (photometric(x_mix, policy, "strong", rngs["student"][i])
              if cfg.noise_input else x_mix.copy())
        peer = labels[1 - i]
        if cfg.variant == "direct_ml":
            terms = [(peer.onehot, peer.valid)]
        else:
            own = labels[i]
            terms = [(peer.onehot, peer.valid), (own.onehot, own.valid)]
        term_losses, grads = multi_loss_and_gradients(student, xs, terms,
                                                      rng=rngs["student"][i])
        total = float(sum(term_losses))
        if not np.isfinite(total):
            raise TrainingError("non-finite unlabeled loss")
        losses.append(total)
        grads_list.append(grads)
        info_terms.append(term_losses)
        info_valid.append(int(sum(t[1].sum() for t in terms)))
    for student, grads in zip(quad.students, grads_list):
        sgd_step(student, grads, lr)

    if cfg.needs_rectification and cfg.confidence_source == "prototype":
        for i in range(2):
            fparts = [feats1[i].reshape(-1, feats1[i].shape[-1])]
            aparts = [y1[i].labels.ravel()]
            if feats2[i] is not None:
                fparts.append(feats2[i].reshape(-1, feats2[i].shape[-1]))
                aparts.append(y2[i].labels.ravel())
            if labeled_batch is not None:
                lx, ll = labeled_batch
                lf, _ = teacher_predict(quad.teachers[i], lx, policy,
                                        rngs["teacher"][i])
                fparts.append(lf.reshape(-1, lf.shape[-1]))
                aparts.append(np.asarray(ll).ravel())
            eta_prime, present = batch_prototypes(np.concatenate(fparts),
                                                  np.concatenate(aparts), k)
            update_bank(quad.banks[i], eta_prime, present)

    for student, teacher in zip(quad.students, quad.teachers):
        ema_params(teacher, student, cfg.alpha)
    return losses, StepInfo(info_terms, info_valid, fallback)


# ---------------------------------------------------------------------------
# metrics during a run
# ---------------------------------------------------------------------------


def _measure_pseudo_acc(quad, stores, ds_sub, cfg, k, rng):
    """Pseudo-label accuracy of each learner on a held-out unlabeled subset."""
    policy = cfg.policy()
    accs = []
    for i in range(2):
        if cfg.needs_rectification:
            out, _, _ = rectified_labels(quad.teachers[i], ds_sub.images, ds_sub.ids,
                                         quad.banks[i], stores[i], policy, cfg.tau,
                                         rng, cfg.confidence_source)
        elif cfg.variant == "direct_ml":
            _, probs = _student_predict(quad.students[i], ds_sub.images, policy, rng)
            out = harden_with_threshold(probs, cfg.tau)
        else:
            _, probs = teacher_predict(quad.teachers[i], ds_sub.images, policy, rng)
            out = harden_with_threshold(probs, cfg.tau)
        acc = pseudo_accuracy(out.onehot, ds_sub.labels, out.valid)
        accs.append(acc if acc is None else float(acc))
    return accs


def _pair_tv(models, images, limit):
    p1 = soft_predictions(models[0], images[:limit])
    p2 = soft_predictions(models[1], images[:limit])
    return tv_distance(p1, p2)


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


def run_rml(labeled: Dataset, unlabeled: Dataset, eval_set: Dataset, cfg: RmlConfig,
            k: int, baselines=None, out_dir=None) -> RunResult:
    """Full stage-wise run; emits one metrics record per eval interval.

    ``baselines``: optional pretrained model (or pair) to reuse. Metrics are
    appended to ``out_dir/metrics.jsonl`` as they are produced, so partial
    output survives a failure; checkpoints are written at stage boundaries.
    """
    cfg.validate()
    if (len(unlabeled) > 0 and unlabeled.labels.shape[1:] == (1, 1)
            and cfg.use_cutmix and cfg.variant != "supervised"):
        raise ConfigError("use_cutmix requires per-pixel labels; disable it "
                          "for vector classification datasets")
    records: list[MetricsRecord] = []
    out_path = Path(out_dir) if out_dir is not None else None
    sink = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        sink = open(out_path / "metrics.jsonl", "w")

    def emit(rec: MetricsRecord):
        records.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            sink.flush()

    try:
        if cfg.variant == "supervised":
            baseline_records: list[MetricsRecord] = []
            model = train_baseline(labeled, cfg, k, eval_set=eval_set,
                                   records=baseline_records)
            for rec in baseline_records:
                emit(rec)
            miou, acc = evaluate_model(model, eval_set, k, cfg.eval_subset)
            summary = {
                "variant": cfg.variant, "seed": cfg.seed,
                "final_miou": miou, "final_acc": acc,
                "final_miou_students": [miou], "stages": [],
                "initial_pseudo_acc": None, "final_pseudo_acc": None,
            }
            if out_path is not None:
                save_checkpoint(out_path / "baseline.ckpt", model)
                (out_path / "summary.json").write_text(
                    json.dumps(summary, indent=2, sort_keys=True) + "\n")
            return RunResult(None, model, records, summary)

        hetero = (cfg.arch_pair[0] != cfg.arch_pair[1]
                  or cfg.feature_dim[0] != cfg.feature_dim[1])
        if baselines is None:
            if cfg.init_from_baseline:
                if hetero:
                    baselines = tuple(
                        train_baseline(labeled, cfg, k, arch_index=i, seed=cfg.seed + i)
                        for i in range(2))
                else:
                    base = train_baseline(labeled, cfg, k)
                    baselines = (base, base)
            else:
                # mutual learning from scratch with distinct initializations
                baselines = tuple(
                    _build_learner(cfg, i, k, labeled.images, labeled.labels,
                                   seed=cfg.seed + 101 * (i + 1))
                    for i in range(2))
        elif isinstance(baselines, NetModel):
            baselines = (baselines, baselines)

        streams = np.random.SeedSequence([cfg.seed, 0x51A6E]).spawn(8)
        rng_data = np.random.default_rng(streams[0])
        rng_mask = np.random.default_rng(streams[1])
        rngs_student = [np.random.default_rng(s) for s in streams[2:4]]
        rngs_teacher = [np.random.default_rng(s) for s in streams[4:6]]
        rngs_labeled = [np.random.default_rng(s) for s in streams[6:8]]
        rng_metrics = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x3E7A1]))

        pseudo_sub = None
        if len(unlabeled) > 0:
            n_sub = min(cfg.pseudo_subset, len(unlabeled))
            pseudo_sub = Dataset(unlabeled.images[:n_sub], unlabeled.labels[:n_sub],
                                 unlabeled.ids[:n_sub])

        summary: dict = {"variant": cfg.variant, "seed": cfg.seed, "stages": [],
                         "initial_pseudo_acc": None}
        quad = None
        stage_baselines = baselines
        for stage in range(1, cfg.stages + 1):
            quad, stores = init_stage(stage_baselines, labeled, unlabeled, cfg, k,
                                      stage=stage)
            if stage == 1 and stores[0] is not None and pseudo_sub is not None:
                init_hard = harden_with_threshold(
                    stores[0].get_batch(pseudo_sub.ids), cfg.tau)
                acc0 = pseudo_accuracy(init_hard.onehot, pseudo_sub.labels,
                                       init_hard.valid)
                summary["initial_pseudo_acc"] = None if acc0 is None else float(acc0)
            for it in range(cfg.iterations):
                lr = poly_lr(cfg.lr, it, cfg.iterations, cfg.lr_power)
                li = _sample(rng_data, len(labeled), cfg.batch_labeled)
                lab_imgs, lab_labels = labeled.images[li], labeled.labels[li]
                losses_l = labeled_step(quad, lab_imgs, lab_labels, cfg, lr, k,
                                        rngs_labeled)
                losses_u = None
                if len(unlabeled) > 0:
                    if cfg.use_cutmix:
                        ui = _sample(rng_data, len(unlabeled), 2 * cfg.batch_unlabeled)
                        b1 = (unlabeled.images[ui[:cfg.batch_unlabeled]],
                              unlabeled.ids[ui[:cfg.batch_unlabeled]])
                        b2 = (unlabeled.images[ui[cfg.batch_unlabeled:]],
                              unlabeled.ids[ui[cfg.batch_unlabeled:]])
                    else:
                        ui = _sample(rng_data, len(unlabeled), cfg.batch_unlabeled)
                        b1 = (unlabeled.images[ui], unlabeled.ids[ui])
                        b2 = None
                    losses_u, _ = unlabeled_step(
                        quad, b1, b2, stores, cfg, lr, k,
                        {"mask": rng_mask, "student": rngs_student,
                         "teacher": rngs_teacher},
                        labeled_batch=(lab_imgs, lab_labels))
                if (it + 1) % cfg.eval_interval == 0:
                    miou_s, acc_s = zip(*(evaluate_model(s, eval_set, k, cfg.eval_subset)
                                          for s in quad.students))
                    miou_t, acc_t = zip(*(evaluate_model(t, eval_set, k, cfg.eval_subset)
                                          for t in quad.teachers))
                    emit(MetricsRecord(
                        iteration=(stage - 1) * cfg.iterations + it + 1, stage=stage,
                        lr=lr, loss_labeled=losses_l, loss_unlabeled=losses_u,
                        miou_students=list(miou_s), acc_students=list(acc_s),
                        miou_teachers=list(miou_t), acc_teachers=list(acc_t),
                        tv_teachers=_pair_tv(quad.teachers, eval_set.images,
                                             cfg.eval_subset),
                        tv_students=_pair_tv(quad.students, eval_set.images,
                                             cfg.eval_subset),
                        pseudo_acc=(None if pseudo_sub is None else
                                    _measure_pseudo_acc(quad, stores, pseudo_sub,
                                                        cfg, k, rng_metrics)),
                    ))
            last = records[-1]
            summary["stages"].append({
                "stage": stage,
                "miou_students": last.miou_students,
                "miou_teachers": last.miou_teachers,
                "final_miou": float(np.mean(last.miou_teachers)),
                "pseudo_acc": last.pseudo_acc,
                "tv_teachers": last.tv_teachers,
            })
            if out_path is not None:
                for i in range(2):
                    extra = (bank_tensors(quad.banks[i])
                             if quad.banks[i] is not None else None)
                    save_checkpoint(out_path / f"stage{stage}_student{i + 1}.ckpt",
                                    quad.students[i], extra)
                    save_checkpoint(out_path / f"stage{stage}_teacher{i + 1}.ckpt",
                                    quad.teachers[i], extra)
            stage_baselines = tuple(quad.teachers)
        last = records[-1]
        summary["final_miou"] = float(np.mean(last.miou_teachers))
        summary["final_miou_students"] = last.miou_students
        summary["final_miou_teachers"] = last.miou_teachers
        summary["final_pseudo_acc"] = last.pseudo_acc
        summary["final_tv_teachers"] = last.tv_teachers
        if out_path is not None:
            (out_path / "summary.json").write_text(
                json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return RunResult(quad, None, records, summary)
    finally:
        if sink is not None:
            sink.close()
