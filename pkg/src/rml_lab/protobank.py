"""Per-class feature prototypes and distance-softmax confidence weights.

The bank keeps one centroid per class in a model's feature space, updated
with momentum from batch means. Confidence of a pixel belonging to class k
is the softmax of negative Euclidean feature distances to the prototypes
under a fixed uniform class prior, renormalized over classes actually
observed so far.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StateError


@dataclass
class PrototypeBank:
    eta: np.ndarray              # (K, C) centroids
    pi: np.ndarray               # (K,) uniform mixture weights
    seen: np.ndarray             # (K,) bool, class ever observed
    lam: float                   # momentum

    @property
    def num_classes(self) -> int:
        return len(self.pi)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.eta.copy(), self.pi.copy(), self.seen.copy(), self.lam)


def new_bank(k: int, c: int, lam: float) -> PrototypeBank:
    if not 0.0 <= lam < 1.0:
        raise InputError(f"prototype momentum out of [0,1): {lam}")
    return PrototypeBank(
        eta=np.zeros((k, c)),
        pi=np.full(k, 1.0 / k),
        seen=np.zeros(k, dtype=bool),
        lam=lam,
    )


def batch_prototypes(features: np.ndarray, assign: np.ndarray, k: int):
    """Per-class feature means over one batch.

    ``features`` is ``(..., C)``, ``assign`` the matching integer label map.
    Returns ``(eta_prime, present)``; rows with ``present=False`` are zero
    and must be ignored.
    """
    features = np.asarray(features, dtype=np.float64)
    assign = np.asarray(assign)
    if features.shape[:-1] != assign.shape:
        raise InputError(
            f"features {features.shape} do not align with assignments {assign.shape}"
        )
    c = features.shape[-1]
    flat_f = features.reshape(-1, c)
    flat_a = assign.ravel()
    eta_prime = np.zeros((k, c))
    counts = np.bincount(flat_a, minlength=k).astype(np.float64)
    for dim in range(c):
        eta_prime[:, dim] = np.bincount(flat_a, weights=flat_f[:, dim], minlength=k)
    present = counts > 0
    eta_prime[present] /= counts[present, None]
    return eta_prime, present


def update_bank(bank: PrototypeBank, eta_prime: np.ndarray, present: np.ndarray) -> PrototypeBank:
    """Momentum update in place: ``eta_k <- lam*eta_k + (1-lam)*eta_prime_k``.

    Rows first observed now are adopted outright instead of being dragged
    from the zero initialization.
    """
    fresh = present & ~bank.seen
    bank.eta[fresh] = eta_prime[fresh]
    old = present & bank.seen
    bank.eta[old] = bank.lam * bank.eta[old] + (1.0 - bank.lam) * eta_prime[old]
    bank.seen |= present
    return bank


def init_bank(model, labeled, unlabeled, k: int, lam: float,
              batch: int = 64) -> PrototypeBank:
    """Ideal (non-momentum) prototypes from a trained model over L and U.

    Labeled pixels contribute under their ground-truth class; unlabeled
    pixels under the model's argmax prediction. Features and predictions
    come from clean images in eval mode.
    """
    was = model.mode
    model.eval()
    sums = None
    counts = np.zeros(k)
    try:
        for ds, use_gt in ((labeled, True), (unlabeled, False)):
            if ds is None or len(ds) == 0:
                continue
            for start in range(0, len(ds), batch):
                x = ds.images[start:start + batch].astype(np.float64)
                feats, logits = model.forward(x)
                if use_gt:
                    assign = ds.labels[start:start + batch]
                else:
                    assign = logits.argmax(axis=-1)
                if sums is None:
                    sums = np.zeros((k, feats.shape[-1]))
                flat_f = feats.reshape(-1, feats.shape[-1])
                flat_a = np.asarray(assign).ravel()
                counts += np.bincount(flat_a, minlength=k)
                for dim in range(feats.shape[-1]):
                    sums[:, dim] += np.bincount(flat_a, weights=flat_f[:, dim], minlength=k)
    finally:
        model.mode = was
    if sums is None:
        raise InputError("init_bank needs at least one nonempty dataset")
    bank = new_bank(k, sums.shape[1], lam)
    present = counts > 0
    bank.eta[present] = sums[present] / counts[present, None]
    bank.seen = present
    return bank


def confidence_weights(features: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Distance-softmax class confidence per pixel.

    ``omega_k = pi_k * exp(-||z - eta_k||) / sum_k' pi_k' * exp(-||z - eta_k'||)``
    over seen classes; unseen classes get exactly 0. Needs at least two
    seen classes.
    """
    if int(bank.seen.sum()) < 2:
        raise StateError("confidence needs at least 2 seen classes in the bank")
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != bank.eta.shape[1]:
        raise InputError(
            f"feature dim {features.shape[-1]} does not match bank C={bank.eta.shape[1]}"
        )
    lead = features.shape[:-1]
    flat = features.reshape(-1, features.shape[-1])
    # squared-expansion keeps memory at N*K instead of N*K*C
    d2 = ((flat ** 2).sum(axis=1, keepdims=True)
          - 2.0 * flat @ bank.eta.T
          + (bank.eta ** 2).sum(axis=1))
    dist = np.sqrt(np.clip(d2, 0.0, None))
    logits = -dist + np.log(bank.pi)
    logits[:, ~bank.seen] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w.reshape(*lead, bank.num_classes)


def bank_tensors(bank: PrototypeBank, prefix: str = "bank") -> dict[str, np.ndarray]:
    """Named tensors for embedding a bank in a checkpoint."""
    return {
        f"{prefix}/eta": bank.eta,
        f"{prefix}/pi": bank.pi,
        f"{prefix}/seen": bank.seen.astype(np.float64),
        f"{prefix}/lambda": np.array([bank.lam]),
    }


def bank_from_tensors(tensors: dict[str, np.ndarray], prefix: str = "bank") -> PrototypeBank:
    return PrototypeBank(
        eta=np.asarray(tensors[f"{prefix}/eta"], dtype=np.float64),
        pi=np.asarray(tensors[f"{prefix}/pi"], dtype=np.float64),
        seen=np.asarray(tensors[f"{prefix}/seen"]) > 0.5,
        lam=float(tensors[f"{prefix}/lambda"][0]),
    )
