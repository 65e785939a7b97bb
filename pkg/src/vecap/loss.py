"""Symmetric image-text contrastive loss with a learnable temperature.

Logits are ``Z_I @ Z_T.T / tau`` over L2-normalized rows. The image-side
loss is the cross-entropy of each row's softmax against the diagonal, the
text-side loss the same over columns, and the total is their average.
The temperature is stored as ``log_tau``.

Gradients are taken with respect to the *unnormalized* encoder outputs, so
they include the Jacobian of the row normalization (for unit rows this is a
projection onto the sphere's tangent space).
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .sampler import CaptionSource, SamplerConfig, mix
from .shardio import ImageTextRecord

logger = logging.getLogger(__name__)

NORM_TOL = 1e-6
TAU_INIT = 0.07
TAU_MIN = 0.01


class NormViolation(ValueError):
    pass


class DivergenceDetected(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


def similarity(u: np.ndarray, v: np.ndarray, tol: float = 1e-5) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for name, x in (("u", u), ("v", v)):
        if abs(np.linalg.norm(x) - 1.0) > tol:
            raise NormViolation(f"{name} has norm {np.linalg.norm(x):.8f}")
    return float(np.dot(u, v))


@dataclass
class LossState:
    z_img: np.ndarray
    z_txt: np.ndarray
    log_tau: float = math.log(TAU_INIT)

    def __post_init__(self) -> None:
        self.z_img = np.asarray(self.z_img, dtype=np.float64)
        self.z_txt = np.asarray(self.z_txt, dtype=np.float64)
        if self.z_img.ndim != 2 or self.z_img.shape != self.z_txt.shape:
            raise ValueError(f"shape mismatch: {self.z_img.shape} vs {self.z_txt.shape}")
        if self.z_img.shape[0] < 2:
            raise ValueError("contrastive loss needs a batch of at least 2 pairs")
        for name, z in (("z_img", self.z_img), ("z_txt", self.z_txt)):
            dev = np.max(np.abs(np.linalg.norm(z, axis=1) - 1.0))
            if dev > NORM_TOL:
                raise NormViolation(f"{name} rows deviate from unit norm by {dev:.3g}")

    @property
    def n(self) -> int:
        return self.z_img.shape[0]

    @property
    def dim(self) -> int:
        return self.z_img.shape[1]

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)


def _log_softmax_diag(logits: np.ndarray) -> np.ndarray:
    """``log softmax(logits[i])[i]`` for every row, max-subtracted."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return np.diagonal(logits) - lse


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_reduction(reduction: str) -> None:
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def clip_loss(state: LossState, reduction: str = "mean") -> tuple[float, tuple[float, float]]:
    """Return ``(L, (L_I, L_T))`` for the state."""
    _check_reduction(reduction)
    logits = state.z_img @ state.z_txt.T / state.tau
    loss_img = -_log_softmax_diag(logits).sum()
    loss_txt = -_log_softmax_diag(logits.T).sum()
    if reduction == "mean":
        loss_img /= state.n
        loss_txt /= state.n
    return float((loss_img + loss_txt) / 2), (float(loss_img), float(loss_txt))


def loss_and_grads(
    raw_img: np.ndarray, raw_txt: np.ndarray, log_tau: float, reduction: str = "mean"
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Loss of ``normalize(raw_img)`` vs ``normalize(raw_txt)`` and its gradients.

    Returns ``(L, dL/draw_img, dL/draw_txt, dL/dlog_tau)``.
    """
    _check_reduction(reduction)
    n_img = np.linalg.norm(raw_img, axis=1, keepdims=True)
    n_txt = np.linalg.norm(raw_txt, axis=1, keepdims=True)
    a = raw_img / n_img
    b = raw_txt / n_txt
    n = a.shape[0]
    inv_tau = math.exp(-log_tau)
    logits = a @ b.T * inv_tau

    p_rows = _softmax_rows(logits)
    p_cols = _softmax_rows(logits.T).T
    eye = np.eye(n)
    loss = -(_log_softmax_diag(logits).sum() + _log_softmax_diag(logits.T).sum()) / 2
    g = ((p_rows - eye) + (p_cols - eye)) / 2
    if reduction == "mean":
        loss /= n
        g /= n

    d_a = g @ b * inv_tau
    d_b = g.T @ a * inv_tau
    # logits scale as exp(-log_tau)
    d_log_tau = -float(np.sum(g * logits))
    # back through x / |x|: (I - x̂x̂ᵀ) / |x|
    d_img = (d_a - np.sum(d_a * a, axis=1, keepdims=True) * a) / n_img
    d_txt = (d_b - np.sum(d_b * b, axis=1, keepdims=True) * b) / n_txt
    return float(loss), d_img, d_txt, d_log_tau


def clip_loss_grad(state: LossState, reduction: str = "mean") -> tuple[np.ndarray, np.ndarray, float]:
    _, d_img, d_txt, d_tau = loss_and_grads(state.z_img, state.z_txt, state.log_tau, reduction)
    return d_img, d_txt, d_tau


# --- toy trainer ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps_adam: float = 1e-8
    warmup_steps: int = 50
    total_steps: int = 500
    batch_size: int = 64
    seed: int = 0
    dim: int = 16
    tau_init: float = TAU_INIT
    clamp_tau: bool = True
    reduction: str = "mean"
    aug_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        _check_reduction(self.reduction)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.lr if step == cfg.warmup_steps else 0.0
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a dict of named arrays."""

    def __init__(self, cfg: TrainConfig, no_decay: frozenset[str] = frozenset()):
        self.cfg = cfg
        self.no_decay = no_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if name not in self.no_decay:
                p -= lr * c.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps_adam)


@dataclass
class ToyData:
    """Paired features with a planted one-to-one correspondence.

    ``txt_variants[0]`` plays the AltText-derived features and
    ``txt_variants[1]`` (if present) the VeCap-derived ones.
    """

    img: np.ndarray
    txt_variants: list[np.ndarray]
    record_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.txt_variants:
            raise ValueError("need at least one text feature variant")
        n = self.img.shape[0]
        for t in self.txt_variants:
            if t.shape[0] != n:
                raise ValueError("every text variant needs one row per image")
        if not self.record_ids:
            self.record_ids = [f"toy-{i:06d}" for i in range(n)]
        if not (np.all(np.isfinite(self.img)) and all(np.all(np.isfinite(t)) for t in self.txt_variants)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.img.shape[0]

    def subset(self, idx: np.ndarray) -> "ToyData":
        return ToyData(self.img[idx], [t[idx] for t in self.txt_variants], [self.record_ids[i] for i in idx])


def make_synthetic(
    n: int, img_dim: int = 32, txt_dim: int = 32, seed: int = 0, noise: float = 0.1, variants: int = 2
) -> ToyData:
    """Separable paired data: each text variant is a noisy copy of its image's features.

    With differing dims the text side is a fixed random linear map of the
    image features before noise is added.
    """
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((n, img_dim))
    if txt_dim == img_dim:
        base = img
    else:
        base = img @ (rng.standard_normal((img_dim, txt_dim)) / math.sqrt(img_dim))
    txt = [base + noise * rng.standard_normal((n, txt_dim)) for _ in range(variants)]
    return ToyData(img, txt)


# (record index, epoch, step) -> text variant index
VariantHook = Callable[[int, int, int], int]


@dataclass
class TrainResult:
    w_img: np.ndarray
    w_txt: np.ndarray
    log_tau: float
    history: list[tuple[int, float, float, float]]

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    def encode(self, img: np.ndarray, txt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zi = img @ self.w_img
        zt = txt @ self.w_txt
        return (
            zi / np.linalg.norm(zi, axis=1, keepdims=True),
            zt / np.linalg.norm(zt, axis=1, keepdims=True),
        )

    def history_csv(self) -> str:
        lines = ["step,lr,loss,tau"]
        lines += [f"{s},{lr!r},{loss!r},{tau!r}" for s, lr, loss, tau in self.history]
        return "\n".join(lines) + "\n"


def train_toy(data: ToyData, cfg: TrainConfig, variant_hook: VariantHook | None = None) -> TrainResult:
    """Train linear encoders ``normalize(x @ W)`` on ``data`` with AdamW.

    Each step draws a batch from a per-epoch shuffle; ``variant_hook``
    chooses which text variant each sampled record contributes (default:
    variant 0). Raises :class:`DivergenceDetected` on a non-finite loss.
    """
    n = len(data)
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} pairs, got {n}")
    rng = np.random.default_rng(cfg.seed)
    p = data.img.shape[1]
    q = data.txt_variants[0].shape[1]
    params = {
        "w_img": rng.standard_normal((p, cfg.dim)) / math.sqrt(p),
        "w_txt": rng.standard_normal((q, cfg.dim)) / math.sqrt(q),
        "log_tau": np.array([math.log(cfg.tau_init)]),
    }
    opt = AdamW(cfg, no_decay=frozenset({"log_tau"}))
    history: list[tuple[int, float, float, float]] = []
    hook = variant_hook or (lambda i, epoch, step: 0)
    per_epoch = n // cfg.batch_size
    order = None
    for step in range(cfg.total_steps):
        epoch, slot = divmod(step, per_epoch)
        if slot == 0:
            order = rng.permutation(n)
        idx = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
        x_img = data.img[idx]
        if cfg.aug_sigma:
            x_img = x_img + cfg.aug_sigma * rng.standard_normal(x_img.shape)
        x_txt = np.stack([data.txt_variants[hook(int(i), epoch, step)][i] for i in idx])

        e_img = x_img @ params["w_img"]
        e_txt = x_txt @ params["w_txt"]
        log_tau = float(params["log_tau"][0])
        loss, d_img, d_txt, d_tau = loss_and_grads(e_img, e_txt, log_tau, cfg.reduction)
        if not math.isfinite(loss):
            raise DivergenceDetected(step, loss)
        lr = lr_at(step, cfg)
        history.append((step, lr, loss, math.exp(log_tau)))
        grads = {
            "w_img": x_img.T @ d_img,
            "w_txt": x_txt.T @ d_txt,
            "log_tau": np.array([d_tau]),
        }
        opt.step(params, grads, lr)
        if cfg.clamp_tau:
            params["log_tau"][0] = max(params["log_tau"][0], math.log(TAU_MIN))
    return TrainResult(params["w_img"], params["w_txt"], float(params["log_tau"][0]), history)


def mixed_variant_hook(data: ToyData, sampler_cfg: SamplerConfig) -> VariantHook:
    """Variant hook driven by the caption sampler: VeCap draws map to variant 1."""
    records = [
        ImageTextRecord(rid, rid, ("alt",), vec="vec", vecap="vecap") for rid in data.record_ids
    ]

    def hook(i: int, epoch: int, step: int) -> int:
        choice = mix(records[i], sampler_cfg, epoch, step)
        return 1 if choice.source is CaptionSource.VECAP else 0

    return hook
