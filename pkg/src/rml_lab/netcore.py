"""Minimal differentiable network engine.

Three fixed toy architectures (pixelwise MLP, residual CNN, single-head
patch attention) with hand-written backprop, configurable dropout and
stochastic depth, plain SGD and EMA parameter updates, and a little-endian
binary checkpoint format. Everything runs in float64 on numpy; there is no
general autodiff.

All inputs are ``(N, H, W, Cin)`` arrays; every architecture returns a
feature map ``(N, H, W, C)`` and logits ``(N, H, W, K)`` at the same
resolution (classification tasks use ``H = W = 1`` with the image flattened
into channels).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, InputError, InternalError, TrainingError

ARCH_KINDS = ("mlp", "cnn", "attn")

CHECKPOINT_MAGIC = b"RMLCKPT1"


@dataclass(frozen=True)
class NoiseConfig:
    """Noise injection switches for a model.

    Dropout acts on the last hidden layer only; stochastic depth acts on
    residual blocks only. With ``enabled=False`` (or in eval mode) forward
    passes are deterministic.
    """

    dropout_rate: float = 0.0
    stochastic_depth_survival: float = 1.0
    enabled: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError(f"dropout_rate out of [0,1]: {self.dropout_rate}")
        if not 0.0 <= self.stochastic_depth_survival <= 1.0:
            raise ConfigError(
                "stochastic_depth_survival out of [0,1]: "
                f"{self.stochastic_depth_survival}"
            )


NOISE_OFF = NoiseConfig(enabled=False)


@dataclass(frozen=True)
class ArchSpec:
    """Resolved architecture descriptor."""

    kind: str
    in_channels: int = 3
    hidden: int = 64
    patch: int = 2

    def descriptor(self) -> str:
        return (
            f"{self.kind}:in={self.in_channels}"
            f":hidden={self.hidden}:patch={self.patch}"
        )


def parse_arch(arch, in_channels: int = 3, hidden: int = 64, patch: int = 2) -> ArchSpec:
    """Parse an architecture descriptor.

    Accepts an ``ArchSpec``, a bare kind (``"mlp"``) or the canonical form
    ``"cnn:in=3:hidden=64:patch=2"`` emitted by :meth:`ArchSpec.descriptor`.
    """
    if isinstance(arch, ArchSpec):
        spec = arch
    elif isinstance(arch, str):
        parts = arch.split(":")
        kind = parts[0]
        fields = {"in_channels": in_channels, "hidden": hidden, "patch": patch}
        keymap = {"in": "in_channels", "hidden": "hidden", "patch": "patch"}
        for part in parts[1:]:
            if "=" not in part:
                raise ConfigError(f"bad architecture descriptor field: {part!r}")
            key, _, value = part.partition("=")
            if key not in keymap:
                raise ConfigError(f"unknown architecture descriptor field: {key!r}")
            try:
                fields[keymap[key]] = int(value)
            except ValueError as exc:
                raise ConfigError(f"bad integer in descriptor: {part!r}") from exc
        spec = ArchSpec(kind=kind, **fields)
    else:
        raise ConfigError(f"invalid architecture descriptor: {arch!r}")
    if spec.kind not in ARCH_KINDS:
        raise ConfigError(f"unknown architecture {spec.kind!r}, expected one of {ARCH_KINDS}")
    if spec.in_channels < 1 or spec.hidden < 1 or spec.patch < 1:
        raise ConfigError(f"architecture sizes must be positive: {spec}")
    return spec


class NetModel:
    """A small network: feature extractor plus linear per-pixel classifier."""

    def __init__(self, arch: ArchSpec, num_classes: int, feature_dim: int,
                 noise: NoiseConfig, params: dict[str, np.ndarray], mode: str = "train"):
        self.arch = arch
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.noise = noise
        self.params = params
        self.mode = mode

    def train(self) -> "NetModel":
        self.mode = "train"
        return self

    def eval(self) -> "NetModel":
        self.mode = "eval"
        return self

    def clone(self) -> "NetModel":
        return NetModel(
            self.arch, self.num_classes, self.feature_dim, self.noise,
            {k: v.copy() for k, v in self.params.items()}, self.mode,
        )

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None):
        """Run the network; returns ``(features, logits)``."""
        feats, logits, _ = _forward(self, x, rng, want_cache=False)
        return feats, logits

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(arch, K: int, C: int, noise: NoiseConfig = NOISE_OFF, seed: int = 0,
                in_channels: int = 3, hidden: int = 64, patch: int = 2) -> NetModel:
    """Build an initialized model in train mode.

    Initialization is Glorot uniform (``±sqrt(6/(fan_in+fan_out))``) drawn
    from ``np.random.default_rng(seed)`` in a fixed parameter order, so two
    builds from the same descriptor and seed are parameter-identical.
    """
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got K={K}")
    if C < 1:
        raise ConfigError(f"feature dim must be positive, got C={C}")
    noise.validate()
    spec = parse_arch(arch, in_channels=in_channels, hidden=hidden, patch=patch)
    rng = np.random.default_rng(seed)
    ci, h, p = spec.in_channels, spec.hidden, spec.patch
    params: dict[str, np.ndarray] = {}
    if spec.kind == "mlp":
        params["fc1_w"] = _glorot(rng, (ci, h), ci, h)
        params["fc1_b"] = np.zeros(h)
        params["fc2_w"] = _glorot(rng, (h, C), h, C)
        params["fc2_b"] = np.zeros(C)
    elif spec.kind == "cnn":
        params["conv1_w"] = _glorot(rng, (9 * ci, C), 9 * ci, C)
        params["conv1_b"] = np.zeros(C)
        params["block1_w"] = _glorot(rng, (9 * C, C), 9 * C, C)
        params["block1_b"] = np.zeros(C)
        params["block2_w"] = _glorot(rng, (9 * C, C), 9 * C, C)
        params["block2_b"] = np.zeros(C)
    else:  # attn
        tok = p * p * ci
        params["embed_w"] = _glorot(rng, (tok, C), tok, C)
        params["embed_b"] = np.zeros(C)
        for name in ("q_w", "k_w", "v_w", "out_w"):
            params[name] = _glorot(rng, (C, C), C, C)
        params["out_b"] = np.zeros(C)
    params["head_w"] = _glorot(rng, (C, K), C, K)
    params["head_b"] = np.zeros(K)
    return NetModel(spec, K, C, noise, params, mode="train")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _check_input(m: NetModel, x: np.ndarray) -> np.ndarray:
    """Validate input shape; vector-input models accept the whole image
    flattened into channels (in_channels == H*W*C)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise InputError(f"expected (N,H,W,C) input, got shape {x.shape}")
    n, h, w, ch = x.shape
    if (m.arch.kind == "mlp" and (h, w) != (1, 1)
            and ch != m.arch.in_channels and m.arch.in_channels == h * w * ch):
        x = np.ascontiguousarray(x).reshape(n, 1, 1, h * w * ch)
    elif ch != m.arch.in_channels:
        raise InputError(
            f"model expects {m.arch.in_channels} input channels, got {ch}"
        )
    if m.arch.kind == "attn":
        p = m.arch.patch
        if x.shape[1] % p or x.shape[2] % p:
            raise InputError(
                f"attn input {x.shape[1]}x{x.shape[2]} not divisible by patch {p}"
            )
    return x


def _noise_active(m: NetModel) -> bool:
    return m.mode == "train" and m.noise.enabled


def _dropout(m: NetModel, x: np.ndarray, rng):
    """Inverted dropout on the last hidden layer. Returns (y, mask_or_None)."""
    rate = m.noise.dropout_rate
    if not _noise_active(m) or rate == 0.0:
        return x, None
    if rate >= 1.0:
        return np.zeros_like(x), np.zeros_like(x)
    if rng is None:
        raise InputError("rng required in train mode with dropout enabled")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def _sd_gate(m: NetModel, n: int, rng):
    """Per-sample stochastic-depth gate for one residual block, shape (n,1,1,1)."""
    p = m.noise.stochastic_depth_survival
    if not m.noise.enabled or p >= 1.0:
        return np.ones((n, 1, 1, 1))
    if m.mode == "eval":
        return np.full((n, 1, 1, 1), p)
    if rng is None:
        raise InputError("rng required in train mode with stochastic depth enabled")
    return (rng.random((n, 1, 1, 1)) < p).astype(np.float64)


def _im2col3(x: np.ndarray) -> np.ndarray:
    """3x3 same-padding patch extraction: (N,H,W,Ci) -> (N,H,W,3,3,Ci)."""
    n, h, w, ci = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, ci))
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, di:di + h, dj:dj + w, :]
    return cols


def _col2im3(dcols: np.ndarray) -> np.ndarray:
    n, h, w, _, _, ci = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, ci))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, di, dj, :]
    return dxp[:, 1:-1, 1:-1, :]


def _conv3(x, w, b):
    n, h, wd, ci = x.shape
    cols = _im2col3(x)
    y = cols.reshape(n * h * wd, 9 * ci) @ w + b
    return y.reshape(n, h, wd, -1), cols


def _conv3_back(dy, cols, w):
    n, h, wd, _, _, ci = cols.shape
    dy2 = dy.reshape(n * h * wd, -1)
    dw = cols.reshape(n * h * wd, 9 * ci).T @ dy2
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.T).reshape(n, h, wd, 3, 3, ci)
    return _col2im3(dcols), dw, db


def _pixelwise(x, w, b):
    shp = x.shape
    y = x.reshape(-1, shp[-1]) @ w + b
    return y.reshape(*shp[:-1], -1)


def _pixelwise_back(dy, x, w):
    ci = x.shape[-1]
    x2 = x.reshape(-1, ci)
    dy2 = dy.reshape(-1, dy.shape[-1])
    return (dy2 @ w.T).reshape(x.shape), x2.T @ dy2, dy2.sum(axis=0)


def _softmax_last(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the class (last) axis."""
    return _softmax_last(np.asarray(logits, dtype=np.float64))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    zs = z - z.max(axis=-1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def _forward(m: NetModel, x: np.ndarray, rng, want_cache: bool):
    x = _check_input(m, x)
    p = m.params
    cache: dict = {"x": x}
    if m.arch.kind == "mlp":
        z1 = _pixelwise(x, p["fc1_w"], p["fc1_b"])
        h1 = np.maximum(z1, 0.0)
        z2 = _pixelwise(h1, p["fc2_w"], p["fc2_b"])
        feats = np.maximum(z2, 0.0)
        fdrop, dmask = _dropout(m, feats, rng)
        logits = _pixelwise(fdrop, p["head_w"], p["head_b"])
        if want_cache:
            cache.update(z1=z1, h1=h1, z2=z2, feats=feats, fdrop=fdrop, dmask=dmask)
    elif m.arch.kind == "cnn":
        # stem conv, then two residual blocks x + gate*conv3(relu(x))
        c1, cols1 = _conv3(x, p["conv1_w"], p["conv1_b"])
        h0 = np.maximum(c1, 0.0)
        g1 = _sd_gate(m, x.shape[0], rng)
        c2, cols2 = _conv3(h0, p["block1_w"], p["block1_b"])
        b1 = h0 + g1 * c2
        g2 = _sd_gate(m, x.shape[0], rng)
        r2 = np.maximum(b1, 0.0)
        c3, cols3 = _conv3(r2, p["block2_w"], p["block2_b"])
        feats = b1 + g2 * c3
        fdrop, dmask = _dropout(m, feats, rng)
        logits = _pixelwise(fdrop, p["head_w"], p["head_b"])
        if want_cache:
            cache.update(c1=c1, cols1=cols1, h0=h0, g1=g1, cols2=cols2,
                         b1=b1, g2=g2, r2=r2, cols3=cols3, feats=feats,
                         fdrop=fdrop, dmask=dmask)
    else:  # attn
        n, h, w, ci = x.shape
        pp = m.arch.patch
        th, tw = h // pp, w // pp
        t = th * tw
        tokens = (x.reshape(n, th, pp, tw, pp, ci)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(n, t, pp * pp * ci))
        emb = tokens @ p["embed_w"] + p["embed_b"]
        q = emb @ p["q_w"]
        k = emb @ p["k_w"]
        v = emb @ p["v_w"]
        scale = 1.0 / np.sqrt(m.feature_dim)
        scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
        attn = _softmax_last(scores)
        ctx = np.matmul(attn, v)
        out = ctx @ p["out_w"] + p["out_b"]
        gate = _sd_gate(m, n, rng)[:, :, :, 0]  # (n,1,1), broadcasts over tokens
        z = emb + gate * out
        fdrop_tok, dmask = _dropout(m, z, rng)
        logits_tok = fdrop_tok @ p["head_w"] + p["head_b"]
        # every pixel inherits its patch token
        feats = (z.reshape(n, th, tw, 1, 1, m.feature_dim)
                  .repeat(pp, axis=3).repeat(pp, axis=4)
                  .transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, m.feature_dim))
        logits = (logits_tok.reshape(n, th, tw, 1, 1, m.num_classes)
                   .repeat(pp, axis=3).repeat(pp, axis=4)
                   .transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, m.num_classes))
        if want_cache:
            cache.update(tokens=tokens, emb=emb, q=q, k=k, v=v, scale=scale,
                         attn=attn, ctx=ctx, gate=gate, z=z, fdrop=fdrop_tok,
                         dmask=dmask, tshape=(th, tw))
    return feats, logits, cache if want_cache else None


def _backward(m: NetModel, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = m.params
    g: dict[str, np.ndarray] = {}
    if m.arch.kind == "mlp":
        dfdrop, g["head_w"], g["head_b"] = _pixelwise_back(dlogits, cache["fdrop"], p["head_w"])
        dfeats = dfdrop if cache["dmask"] is None else dfdrop * cache["dmask"]
        dz2 = dfeats * (cache["z2"] > 0)
        dh1, g["fc2_w"], g["fc2_b"] = _pixelwise_back(dz2, cache["h1"], p["fc2_w"])
        dz1 = dh1 * (cache["z1"] > 0)
        _, g["fc1_w"], g["fc1_b"] = _pixelwise_back(dz1, cache["x"], p["fc1_w"])
    elif m.arch.kind == "cnn":
        dfdrop, g["head_w"], g["head_b"] = _pixelwise_back(dlogits, cache["fdrop"], p["head_w"])
        dfeats = dfdrop if cache["dmask"] is None else dfdrop * cache["dmask"]
        db1 = dfeats.copy()
        dc3 = dfeats * cache["g2"]
        dr2, g["block2_w"], g["block2_b"] = _conv3_back(dc3, cache["cols3"], p["block2_w"])
        db1 += dr2 * (cache["b1"] > 0)
        dh0 = db1.copy()
        dc2 = db1 * cache["g1"]
        dh0_branch, g["block1_w"], g["block1_b"] = _conv3_back(dc2, cache["cols2"], p["block1_w"])
        dh0 += dh0_branch
        dc1 = dh0 * (cache["c1"] > 0)
        _, g["conv1_w"], g["conv1_b"] = _conv3_back(dc1, cache["cols1"], p["conv1_w"])
    else:  # attn
        n, h, w, _ = cache["x"].shape
        pp = m.arch.patch
        th, tw = cache["tshape"]
        # pixel grads sum back onto their patch token
        dlog_tok = (dlogits.reshape(n, th, pp, tw, pp, -1).sum(axis=(2, 4)))
        dlog_tok = dlog_tok.reshape(n, th * tw, -1)
        fdrop = cache["fdrop"]
        dy2 = dlog_tok.reshape(-1, m.num_classes)
        g["head_w"] = fdrop.reshape(-1, m.feature_dim).T @ dy2
        g["head_b"] = dy2.sum(axis=0)
        dfdrop = dlog_tok @ p["head_w"].T
        dz = dfdrop if cache["dmask"] is None else dfdrop * cache["dmask"]
        demb = dz.copy()
        dout = dz * cache["gate"]
        ctx2 = cache["ctx"].reshape(-1, m.feature_dim)
        dout2 = dout.reshape(-1, m.feature_dim)
        g["out_w"] = ctx2.T @ dout2
        g["out_b"] = dout2.sum(axis=0)
        dctx = dout @ p["out_w"].T
        dattn = np.matmul(dctx, cache["v"].transpose(0, 2, 1))
        dv = np.matmul(cache["attn"].transpose(0, 2, 1), dctx)
        a = cache["attn"]
        dscores = a * (dattn - (dattn * a).sum(axis=-1, keepdims=True))
        dq = np.matmul(dscores, cache["k"]) * cache["scale"]
        dk = np.matmul(dscores.transpose(0, 2, 1), cache["q"]) * cache["scale"]
        emb2 = cache["emb"].reshape(-1, m.feature_dim)
        g["q_w"] = emb2.T @ dq.reshape(-1, m.feature_dim)
        g["k_w"] = emb2.T @ dk.reshape(-1, m.feature_dim)
        g["v_w"] = emb2.T @ dv.reshape(-1, m.feature_dim)
        demb += dq @ p["q_w"].T + dk @ p["k_w"].T + dv @ p["v_w"].T
        tok2 = cache["tokens"].reshape(-1, cache["tokens"].shape[-1])
        demb2 = demb.reshape(-1, m.feature_dim)
        g["embed_w"] = tok2.T @ demb2
        g["embed_b"] = demb2.sum(axis=0)
    return g


def model_forward(m: NetModel, x: np.ndarray, rng: np.random.Generator | None = None):
    """Forward pass returning ``(FeatureMap, Logits)``; pure in eval mode."""
    return m.forward(x, rng)


# ---------------------------------------------------------------------------
# losses and updates
# ---------------------------------------------------------------------------


def cross_entropy(p: np.ndarray, target: np.ndarray, pixel_mask: np.ndarray | None = None) -> float:
    """Mean cross entropy over unmasked pixels, computed from probabilities.

    ``p`` and ``target`` are ``(..., K)``; probabilities are clamped at
    1e-12 before the log. All pixels masked out yields 0.0.
    """
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if p.shape != target.shape:
        raise InputError(f"p/target shape mismatch: {p.shape} vs {target.shape}")
    sums = p.sum(axis=-1)
    if np.any(p < -1e-9) or np.any(np.abs(sums - 1.0) > 1e-4):
        raise InputError("p rows are not valid probability vectors")
    ce = -(target * np.log(np.clip(p, 1e-12, None))).sum(axis=-1)
    if pixel_mask is None:
        return float(ce.mean())
    pixel_mask = np.asarray(pixel_mask, dtype=np.float64)
    if pixel_mask.shape != ce.shape:
        raise InputError(f"mask shape {pixel_mask.shape} does not match {ce.shape}")
    n = pixel_mask.sum()
    if n == 0:
        return 0.0
    return float((ce * pixel_mask).sum() / n)


def loss_and_gradients(m: NetModel, x: np.ndarray, target: np.ndarray,
                       pixel_mask: np.ndarray | None = None,
                       rng: np.random.Generator | None = None):
    """Forward + cross-entropy + backward.

    ``target`` is ``(N,H,W,K)`` with normalized per-pixel rows (one-hot or
    soft); ``pixel_mask`` is ``(N,H,W)``, 1 for pixels included in the loss.
    Masked-out pixels contribute zero loss and zero gradient; a fully
    masked batch returns loss 0 and zero gradients.
    """
    feats, logits, cache = _forward(m, x, rng, want_cache=True)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise InputError(f"target shape {target.shape} does not match logits {logits.shape}")
    tsum = target.sum(axis=-1)
    if np.any(np.abs(tsum - 1.0) > 1e-4) or np.any(target < -1e-9):
        raise InputError("target rows must be normalized distributions")
    if pixel_mask is None:
        mask = np.ones(logits.shape[:-1])
    else:
        mask = np.asarray(pixel_mask, dtype=np.float64)
        if mask.shape != logits.shape[:-1]:
            raise InputError(f"mask shape {mask.shape} does not match {logits.shape[:-1]}")
    n = mask.sum()
    if n == 0:
        return 0.0, m.zero_grads()
    logp = log_softmax(logits)
    loss = float((-(target * logp).sum(axis=-1) * mask).sum() / n)
    dlogits = (np.exp(logp) - target) * mask[..., None] / n
    grads = _backward(m, cache, dlogits)
    return loss, grads


def multi_loss_and_gradients(m: NetModel, x: np.ndarray, terms, rng: np.random.Generator | None = None):
    """Cross entropy for several ``(target, pixel_mask)`` terms in one pass.

    Returns ``(per_term_losses, grads)`` where the gradients are for the sum
    of the per-term mean losses. Terms whose mask is empty contribute 0.
    """
    feats, logits, cache = _forward(m, x, rng, want_cache=True)
    logp = log_softmax(logits)
    p = np.exp(logp)
    dlogits = np.zeros_like(logits)
    losses = []
    any_pixels = False
    for target, pixel_mask in terms:
        target = np.asarray(target, dtype=np.float64)
        if target.shape != logits.shape:
            raise InputError(f"target shape {target.shape} does not match logits {logits.shape}")
        if pixel_mask is None:
            mask = np.ones(logits.shape[:-1])
        else:
            mask = np.asarray(pixel_mask, dtype=np.float64)
            if mask.shape != logits.shape[:-1]:
                raise InputError(f"mask shape {mask.shape} does not match {logits.shape[:-1]}")
        n = mask.sum()
        if n == 0:
            losses.append(0.0)
            continue
        any_pixels = True
        losses.append(float((-(target * logp).sum(axis=-1) * mask).sum() / n))
        dlogits += (p - target) * mask[..., None] / n
    grads = _backward(m, cache, dlogits) if any_pixels else m.zero_grads()
    return losses, grads


def sgd_step(m: NetModel, grads: dict[str, np.ndarray], lr: float) -> NetModel:
    """In-place plain SGD: every parameter moves by ``-lr * grad``."""
    if lr < 0:
        raise ConfigError(f"negative learning rate: {lr}")
    if set(grads) != set(m.params):
        raise InternalError(
            f"gradient keys {sorted(grads)} do not match parameters {sorted(m.params)}"
        )
    for name, w in m.params.items():
        w -= lr * grads[name]
        if not np.all(np.isfinite(w)):
            raise TrainingError(f"non-finite parameter after update: {name}")
    return m


def ema_params(teacher: NetModel, student: NetModel, alpha: float) -> NetModel:
    """In-place EMA: teacher <- alpha * teacher + (1 - alpha) * student."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha out of [0,1]: {alpha}")
    if teacher.arch != student.arch or set(teacher.params) != set(student.params):
        raise InternalError("teacher/student architecture mismatch")
    for name, w in teacher.params.items():
        if w.shape != student.params[name].shape:
            raise InternalError(f"parameter shape mismatch on {name}")
        w *= alpha
        w += (1.0 - alpha) * student.params[name]
    return teacher


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# Little-endian binary:
#   magic "RMLCKPT1"
#   u32 len + utf-8 arch descriptor, u32 K, u32 C
#   u32 tensor count, then per tensor:
#     u32 name len + utf-8 name, u32 ndim, u32 dims..., f32 data
# Model parameters are stored under "param/<name>"; callers may attach
# extra named tensors (e.g. a prototype bank).


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<I", d))
    fh.write(data.tobytes())


class _Truncated(Exception):
    """Internal sentinel; converted to FormatError with the file offset."""

    def __init__(self, fh, what):
        self.offset = fh.tell()
        self.what = what


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise _Truncated(fh, what)
    return buf


def save_checkpoint(path, model: NetModel, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write a model (and optional extra tensors) in the checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        desc = model.arch.descriptor().encode("utf-8")
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<II", model.num_classes, model.feature_dim))
        extra = extra or {}
        names = [f"param/{k}" for k in sorted(model.params)] + sorted(extra)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            if name.startswith("param/"):
                _write_tensor(fh, name, model.params[name[6:]])
            else:
                _write_tensor(fh, name, extra[name])


def load_checkpoint(path, noise: NoiseConfig = NOISE_OFF):
    """Read a checkpoint; returns ``(NetModel, extra_tensors)``.

    Noise configuration is not persisted; supply it at load time (defaults
    to disabled, suitable for evaluation).
    """
    try:
        with open(path, "rb") as fh:
            magic = _read_exact(fh, 8, "magic")
            if magic != CHECKPOINT_MAGIC:
                raise FormatError(f"bad checkpoint magic {magic!r} at offset 0 in {path}")
            (dlen,) = struct.unpack("<I", _read_exact(fh, 4, "descriptor length"))
            desc = _read_exact(fh, dlen, "descriptor").decode("utf-8")
            k, c = struct.unpack("<II", _read_exact(fh, 8, "K/C header"))
            (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
            tensors: dict[str, np.ndarray] = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
                name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
                (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor ndim"))
                dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor dims"))
                numel = int(np.prod(dims)) if ndim else 1
                raw = _read_exact(fh, 4 * numel, f"tensor data for {name}")
                tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    except _Truncated as exc:
        raise FormatError(
            f"truncated checkpoint {path}: missing {exc.what} at offset {exc.offset}"
        ) from None
    params = {n[6:]: t for n, t in tensors.items() if n.startswith("param/")}
    extra = {n: t for n, t in tensors.items() if not n.startswith("param/")}
    spec = parse_arch(desc)
    model = NetModel(spec, k, c, noise, params, mode="eval")
    return model, extra
