"""Pseudo-label generation, thresholding and prototype-based rectification.

A stage keeps the initial soft predictions ``p0`` for every unlabeled image
frozen in a :class:`StagePseudoStore`; each step reweights them with the
current confidence map and re-hardens. CutMixed pairs are rectified per
image and then mixed with the same mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import mix_label_maps, mix_valid_masks, photometric
from .errors import InputError, StateError
from .netcore import softmax
from .protobank import confidence_weights

# SoftPrediction is a plain (N,H,W,K) probability array; OneHotMap wraps the
# hardened labels together with their threshold gate.


@dataclass
class OneHotMap:
    """One-hot labels plus the threshold gate.

    ``onehot`` is ``(N,H,W,K)`` with exactly one 1 per pixel; ``valid`` is
    ``(N,H,W)``, 0 where the prediction fell below the threshold and must
    not contribute to losses.
    """

    onehot: np.ndarray
    valid: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.onehot.argmax(axis=-1)


class StagePseudoStore:
    """Frozen stage-initial soft pseudo labels, keyed by stable image id."""

    def __init__(self, entries: dict[int, np.ndarray], stage: int):
        self.entries = {int(k): np.asarray(v, dtype=np.float64) for k, v in entries.items()}
        self.stage = stage

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id) -> bool:
        return int(image_id) in self.entries

    def get(self, image_id) -> np.ndarray:
        key = int(image_id)
        if key not in self.entries:
            raise StateError(f"image id {key} missing from stage-{self.stage} pseudo store")
        return self.entries[key]

    def get_batch(self, ids) -> np.ndarray:
        return np.stack([self.get(i) for i in np.asarray(ids).ravel()])

    def save(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        index = {"stage": self.stage, "entries": {}}
        for image_id, p0 in sorted(self.entries.items()):
            fname = f"p0_{image_id:08d}.npy"
            np.save(outdir / fname, p0.astype(np.float32))
            index["entries"][str(image_id)] = fname
        (outdir / "index.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, indir) -> "StagePseudoStore":
        indir = Path(indir)
        index_path = indir / "index.json"
        if not index_path.exists():
            raise StateError(f"no pseudo store index at {index_path}")
        index = json.loads(index_path.read_text())
        entries = {int(k): np.load(indir / v) for k, v in index["entries"].items()}
        return cls(entries, index["stage"])


def teacher_predict(teacher, x: np.ndarray, policy, rng) -> tuple[np.ndarray, np.ndarray]:
    """Teacher features and softmax probabilities on weakly augmented input."""
    if teacher.mode != "eval":
        raise StateError("teacher must be in eval mode")
    xw = photometric(x, policy, "weak", rng)
    feats, logits = teacher.forward(xw)
    return feats, softmax(logits)


def harden_with_threshold(p: np.ndarray, tau: float) -> OneHotMap:
    """One-hot of the per-pixel argmax; ``valid`` iff ``max_k p_k > tau``.

    Ties break toward the lowest class index.
    """
    p = np.asarray(p, dtype=np.float64)
    if not 0.0 <= tau < 1.0:
        raise InputError(f"tau out of [0,1): {tau}")
    k = p.shape[-1]
    labels = p.argmax(axis=-1)
    onehot = np.eye(k)[labels]
    valid = (p.max(axis=-1) > tau).astype(np.float64)
    return OneHotMap(onehot, valid)


def denoise(p0: np.ndarray, omega: np.ndarray, tau: float) -> tuple[OneHotMap, int]:
    """Rectify frozen soft labels with confidence weights and re-harden.

    Per pixel the rectified class is ``argmax_k omega_k * p0_k``; the
    threshold gate applies to the renormalized product. Pixels whose
    product vanishes for every class fall back to ``argmax p0`` (gated on
    ``p0``); their count is returned alongside the labels.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if p0.shape != omega.shape:
        raise InputError(f"p0 {p0.shape} and omega {omega.shape} not aligned")
    if not 0.0 <= tau < 1.0:
        raise InputError(f"tau out of [0,1): {tau}")
    k = p0.shape[-1]
    prod = omega * p0
    norm = prod.sum(axis=-1)
    dead = norm == 0.0
    fallback = int(dead.sum())
    safe_norm = np.where(dead, 1.0, norm)
    rect = prod / safe_norm[..., None]
    labels = np.where(dead, p0.argmax(axis=-1), prod.argmax(axis=-1))
    conf = np.where(dead, p0.max(axis=-1), rect.max(axis=-1))
    onehot = np.eye(k)[labels]
    valid = (conf > tau).astype(np.float64)
    return OneHotMap(onehot, valid), fallback


@dataclass
class RectifyDetail:
    """Per-image intermediates from mix_rectify, reused by the trainer."""

    feats1: np.ndarray
    feats2: np.ndarray
    y1: OneHotMap
    y2: OneHotMap
    fallback_pixels: int


def rectified_labels(teacher, x: np.ndarray, ids, bank, store: StagePseudoStore,
                     policy, tau: float, rng,
                     confidence_source: str = "prototype") -> tuple[OneHotMap, np.ndarray, int]:
    """Denoise one unlabeled batch; returns ``(labels, teacher_feats, fallbacks)``.

    ``confidence_source="teacher_softmax"`` replaces the prototype weights
    with the teacher's own softmax output (ablation path).
    """
    p0 = store.get_batch(ids)
    feats, probs = teacher_predict(teacher, x, policy, rng)
    if confidence_source == "prototype":
        omega = confidence_weights(feats, bank)
    elif confidence_source == "teacher_softmax":
        omega = probs
    else:
        raise InputError(f"unknown confidence source {confidence_source!r}")
    labels, fallback = denoise(p0, omega, tau)
    return labels, feats, fallback


def mix_rectify(teacher, x1: np.ndarray, x2: np.ndarray, ids1, ids2, m, bank,
                store: StagePseudoStore, policy, tau: float, rng,
                confidence_source: str = "prototype") -> tuple[OneHotMap, RectifyDetail]:
    """Rectify two unlabeled batches separately, then CutMix the label maps."""
    y1, feats1, fb1 = rectified_labels(teacher, x1, ids1, bank, store, policy,
                                       tau, rng, confidence_source)
    y2, feats2, fb2 = rectified_labels(teacher, x2, ids2, bank, store, policy,
                                       tau, rng, confidence_source)
    mixed = OneHotMap(
        mix_label_maps(y1.onehot, y2.onehot, m),
        mix_valid_masks(y1.valid, y2.valid, m),
    )
    return mixed, RectifyDetail(feats1, feats2, y1, y2, fb1 + fb2)
