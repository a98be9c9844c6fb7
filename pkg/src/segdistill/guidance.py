"""Segmentation-consistency and class-wise feature-matching guidance.

Images and feature maps are channel-first arrays ``(C, H, W)``; masks are
``(H, W)`` integer maps. Every pluggable component (decoder, segmenter,
feature extractor) is a callable with an optional ``vjp`` method; when the
method is missing, gradients fall back to central finite differences.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from ._io import atomic_open
from .ddim import finite_difference_vjp, predict_clean, predictor_vjp
from .masks import DEFAULT_IGNORE_INDEX


class GuidanceError(ValueError):
    pass


@dataclass
class GuidanceConfig:
    lambda_seg: float = 0.05
    lambda_feat: float = 0.2
    grad_norm_floor: float = 1e-12
    active_steps: Sequence[int] | None = None  # None: every step
    differentiate_through_predictor: bool = False
    allow_finite_differences: bool = True

    def __post_init__(self):
        if self.lambda_seg < 0 or self.lambda_feat < 0:
            raise GuidanceError("guidance weights must be non-negative")
        if not self.grad_norm_floor > 0:
            raise GuidanceError("grad_norm_floor must be positive")

    def is_active(self, t: int) -> bool:
        return self.active_steps is None or t in self.active_steps

    @property
    def enabled(self) -> bool:
        return self.lambda_seg > 0 or self.lambda_feat > 0


def vjp_of(component, x, cotangent, allow_fd: bool = True):
    if hasattr(component, "vjp"):
        return component.vjp(x, cotangent)
    if not allow_fd:
        raise GuidanceError(f"{type(component).__name__} has no gradient and finite differences are disabled")
    return finite_difference_vjp(component, x, cotangent)


# -- built-in toy components -------------------------------------------------


def _upsample(x, s):
    return x if s == 1 else x.repeat(s, axis=-2).repeat(s, axis=-1)


def _block_sum(x, s):
    if s == 1:
        return x
    c, h, w = x.shape
    return x.reshape(c, h // s, s, w // s, s).sum(axis=(2, 4))


class IdentityDecoder:
    def __call__(self, z):
        return np.asarray(z, dtype=np.float64)

    def vjp(self, z, cotangent):
        return np.asarray(cotangent, dtype=np.float64)


class PixelDecoder:
    """Per-pixel channel mixing ``act(W z + b)`` followed by nearest upsampling."""

    def __init__(self, weight, bias=None, activation: str = "tanh", upsample: int = 1):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(self.weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
        if activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.upsample = int(upsample)

    def _pre(self, z):
        return np.einsum("oc,chw->ohw", self.weight, z) + self.bias[:, None, None]

    def __call__(self, z):
        h = self._pre(z)
        if self.activation == "tanh":
            h = np.tanh(h)
        return _upsample(h, self.upsample)

    def vjp(self, z, cotangent):
        g = _block_sum(np.asarray(cotangent, dtype=np.float64), self.upsample)
        if self.activation == "tanh":
            g = g * (1.0 - np.tanh(self._pre(z)) ** 2)
        return np.einsum("oc,ohw->chw", self.weight, g)

    @classmethod
    def random(cls, in_channels, out_channels, rng, upsample=1, activation="tanh"):
        w = rng.normal(scale=1.0 / math.sqrt(in_channels), size=(out_channels, in_channels))
        return cls(w, rng.normal(scale=0.1, size=out_channels), activation, upsample)


class LinearSegmenter:
    """logits[k] = W[k] . x(u, v) + b[k] at every pixel."""

    def __init__(self, weight, bias=None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(self.weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return np.einsum("kc,chw->khw", self.weight, x) + self.bias[:, None, None]

    def vjp(self, x, cotangent):
        return np.einsum("kc,khw->chw", self.weight, cotangent)


class PrototypeSegmenter:
    """Nearest-prototype classifier: logits[k] = -sharpness * ||x(u,v) - p_k||^2."""

    def __init__(self, prototypes, sharpness: float = 4.0):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        self.sharpness = float(sharpness)

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    def __call__(self, x):
        diff = x[None] - self.prototypes[:, :, None, None]
        return -self.sharpness * (diff**2).sum(axis=1)

    def vjp(self, x, cotangent):
        diff = x[None] - self.prototypes[:, :, None, None]
        return (-2.0 * self.sharpness * cotangent[:, None] * diff).sum(axis=0)


class PooledFeatureExtractor:
    """Stage l: ``avgpool(tanh(V_l x), factor_l)``."""

    def __init__(self, weights: Sequence[np.ndarray], factors: Sequence[int]):
        if len(weights) != len(factors):
            raise ValueError("one factor per stage")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.factors = [int(f) for f in factors]

    @property
    def stage_channels(self):
        return [w.shape[0] for w in self.weights]

    def __call__(self, x):
        out = []
        for w, f in zip(self.weights, self.factors):
            h = np.tanh(np.einsum("oc,chw->ohw", w, x))
            c, hh, ww = h.shape
            if hh % f or ww % f:
                raise GuidanceError(f"image {hh}x{ww} not divisible by stage factor {f}")
            out.append(_block_sum(h, f) / (f * f))
        return out

    def vjp(self, x, cotangents):
        dx = np.zeros_like(x, dtype=np.float64)
        for w, f, g in zip(self.weights, self.factors, cotangents):
            pre = np.einsum("oc,chw->ohw", w, x)
            gh = _upsample(g, f) / (f * f) * (1.0 - np.tanh(pre) ** 2)
            dx += np.einsum("oc,ohw->chw", w, gh)
        return dx

    @classmethod
    def random(cls, in_channels, channels: Sequence[int], factors: Sequence[int], rng):
        ws = [rng.normal(scale=1.0 / math.sqrt(in_channels), size=(c, in_channels)) for c in channels]
        return cls(ws, factors)


def extractor_vjp(extractor, x, cotangents, allow_fd=True):
    if hasattr(extractor, "vjp"):
        return extractor.vjp(x, cotangents)
    if not allow_fd:
        raise GuidanceError(f"{type(extractor).__name__} has no gradient and finite differences are disabled")

    def flat(xx):
        return np.concatenate([f.ravel() for f in extractor(xx)])

    return finite_difference_vjp(flat, x, np.concatenate([g.ravel() for g in cotangents]))


# -- class-wise feature statistics ---------------------------------------------


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    oh, ow = size
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return mask[rows[:, None], cols[None, :]]


def class_region_mean(feature_map: np.ndarray, mask: np.ndarray, c: int) -> np.ndarray | None:
    """Channel-wise mean of ``feature_map`` over the pixels labelled ``c``.

    ``mask`` must already be at the feature resolution. Returns ``None`` for an
    empty region. Sums are exactly rounded (``math.fsum``), so the result does
    not depend on pixel order.
    """
    if feature_map.shape[1:] != mask.shape:
        raise GuidanceError(f"feature map {feature_map.shape[1:]} and mask {mask.shape} differ in size")
    region = mask == c
    n = int(region.sum())
    if n == 0:
        return None
    vals = feature_map[:, region]
    return np.array([math.fsum(row) / n for row in vals])


def _mask_classes(mask, num_classes, ignore_index):
    vals = np.unique(mask)
    return [int(v) for v in vals if v != ignore_index and 0 <= v < num_classes]


@dataclass
class ClassFeatureBank:
    """Dataset-level mean feature per (stage, class), with contributor counts."""

    num_classes: int
    stage_channels: list[int]
    means: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def get(self, stage: int, c: int):
        return self.means.get((stage, c))

    def __eq__(self, other):
        if not isinstance(other, ClassFeatureBank):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and list(self.stage_channels) == list(other.stage_channels)
            and self.counts == other.counts
            and self.means.keys() == other.means.keys()
            and all(np.array_equal(self.means[k], other.means[k]) for k in self.means)
        )

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "stage_channels": list(self.stage_channels),
            "entries": [
                {"stage": l, "class": c, "count": self.counts[(l, c)], "mean": [float(v) for v in self.means[(l, c)]]}
                for (l, c) in sorted(self.means)
            ],
        }

    @classmethod
    def from_json(cls, obj) -> "ClassFeatureBank":
        bank = cls(int(obj["num_classes"]), [int(c) for c in obj["stage_channels"]])
        for e in obj["entries"]:
            key = (int(e["stage"]), int(e["class"]))
            mean = np.asarray(e["mean"], dtype=np.float64)
            if mean.shape != (bank.stage_channels[key[0]],):
                raise GuidanceError(f"bank entry {key}: expected {bank.stage_channels[key[0]]} channels")
            if int(e["count"]) < 1:
                raise GuidanceError(f"bank entry {key}: count must be >= 1")
            bank.means[key] = mean
            bank.counts[key] = int(e["count"])
        return bank


def write_feature_bank(bank: ClassFeatureBank, path: str | os.PathLike) -> None:
    with atomic_open(path) as fh:
        json.dump(bank.to_json(), fh)
        fh.write("\n")


def read_feature_bank(path: str | os.PathLike) -> ClassFeatureBank:
    with open(path, encoding="utf-8") as fh:
        try:
            return ClassFeatureBank.from_json(json.load(fh))
        except (KeyError, TypeError, IndexError, json.JSONDecodeError) as exc:
            raise GuidanceError(f"{path}: malformed feature bank ({exc})") from exc


def image_class_means(image, mask, extractor, num_classes, ignore_index=DEFAULT_IGNORE_INDEX):
    """Per-image class means at every stage: {(stage, class): vector}."""
    feats = extractor(image)
    out = {}
    for l, F in enumerate(feats):
        small = resize_nearest(mask, F.shape[1:])
        for c in _mask_classes(small, num_classes, ignore_index):
            mu = class_region_mean(F, small, c)
            if mu is not None:
                out[(l, c)] = mu
    return out


def build_feature_bank(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]],
    extractor,
    num_classes: int,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    jobs: int = 1,
) -> ClassFeatureBank:
    """Average per-image class means over the images where the class survives
    at that stage's resolution."""

    def one(pair):
        image, mask = pair
        if image.shape[1:] != mask.shape:
            raise GuidanceError(f"image {image.shape[1:]} and mask {mask.shape} differ in size")
        return image_class_means(image, mask, extractor, num_classes, ignore_index)

    pairs = list(pairs)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            per_image = list(pool.map(one, pairs))
    else:
        per_image = [one(p) for p in pairs]

    collected: dict[tuple[int, int], list[np.ndarray]] = {}
    for means in per_image:
        for key, mu in means.items():
            collected.setdefault(key, []).append(mu)
    bank = ClassFeatureBank(num_classes, list(extractor.stage_channels))
    for key in sorted(collected):
        vecs = np.stack(collected[key])
        bank.means[key] = np.array([math.fsum(col) / len(vecs) for col in vecs.T])
        bank.counts[key] = len(vecs)
    return bank


# -- losses ------------------------------------------------------------------


def _cos_and_grad(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0, np.zeros_like(a)
    cos = float(a @ b / (na * nb))
    return cos, b / (na * nb) - cos * a / (na * na)


def feature_matching_loss(image, mask, extractor, bank: ClassFeatureBank, ignore_index=DEFAULT_IGNORE_INDEX, allow_fd=True):
    """Sum over (class in mask, stage) of 1 - cos(generated mean, bank mean).

    Returns ``(loss, d loss / d image)``. Pairs missing from the bank or with
    an empty region at that stage are skipped.
    """
    feats = extractor(image)
    cots = [np.zeros_like(F) for F in feats]
    loss = 0.0
    matched = 0
    for c in _mask_classes(mask, bank.num_classes, ignore_index):
        for l, F in enumerate(feats):
            target = bank.get(l, c)
            if target is None:
                continue
            small = resize_nearest(mask, F.shape[1:])
            region = small == c
            n = int(region.sum())
            if n == 0:
                continue
            matched += 1
            mu = F[:, region].mean(axis=1)
            cos, dcos = _cos_and_grad(mu, target)
            loss += 1.0 - cos
            cots[l][:, region] -= (dcos / n)[:, None]
    if matched == 0:
        raise GuidanceError("feature bank shares no (stage, class) pair with the mask")
    return loss, extractor_vjp(extractor, image, cots, allow_fd)


def segmentation_consistency_loss(image, mask, segmenter, ignore_index=DEFAULT_IGNORE_INDEX, allow_fd=True):
    """Mean per-pixel cross-entropy over non-ignored pixels.

    Returns ``(loss, d loss / d image)``.
    """
    logits = np.asarray(segmenter(image), dtype=np.float64)
    K = logits.shape[0]
    if logits.shape[1:] != mask.shape:
        raise GuidanceError(f"segmenter output {logits.shape[1:]} and mask {mask.shape} differ in size")
    valid = (mask != ignore_index) & (mask >= 0) & (mask < K)
    n = int(valid.sum())
    if n == 0:
        raise GuidanceError("every mask pixel is ignored; segmentation loss undefined")
    labels = np.where(valid, mask, 0).astype(np.int64)
    logp = log_softmax(logits, axis=0)
    picked = np.take_along_axis(logp, labels[None], axis=0)[0]
    loss = -float(picked[valid].sum()) / n
    g = softmax(logits, axis=0)
    np.put_along_axis(g, labels[None], np.take_along_axis(g, labels[None], axis=0) - 1.0, axis=0)
    g *= valid[None] / n
    return loss, vjp_of(segmenter, image, g, allow_fd)


ImageLoss = Callable[[np.ndarray], tuple[float, np.ndarray]]


def latent_loss_gradient(
    z_t,
    t: int,
    alpha_bar_t: float,
    condition,
    predictor,
    decoder,
    loss_fn: ImageLoss,
    eps=None,
    differentiate_through_predictor: bool = False,
    allow_fd: bool = True,
):
    """Loss on the decoded clean estimate and its gradient w.r.t. ``z_t``.

    z_t -> z0_hat = (z_t - sqrt(1-a) eps(z_t)) / sqrt(a) -> decoder -> loss.
    With ``differentiate_through_predictor`` off, eps is held constant so
    d z0_hat / d z_t = I / sqrt(a).
    """
    if t < 1:
        raise GuidanceError("guidance gradients need t >= 1")
    z_t = np.asarray(z_t, dtype=np.float64)
    if eps is None:
        eps = predictor(z_t, t, alpha_bar_t, condition)
    z0 = predict_clean(z_t, eps, alpha_bar_t)
    image = decoder(z0)
    loss, g_image = loss_fn(image)
    g_z0 = vjp_of(decoder, z0, g_image, allow_fd)
    grad = g_z0 / math.sqrt(alpha_bar_t)
    if differentiate_through_predictor:
        g_eps = predictor_vjp(predictor, z_t, t, alpha_bar_t, condition, g_z0, allow_fd)
        grad = grad - math.sqrt(1.0 - alpha_bar_t) / math.sqrt(alpha_bar_t) * g_eps
    return loss, grad


def guidance_scales(eps, grad_seg, grad_feat, alpha_bar_t: float, config: GuidanceConfig):
    """Scales that give each injected term norm lambda * sqrt(1 - a) * ||eps||."""
    base = math.sqrt(1.0 - alpha_bar_t) * float(np.linalg.norm(eps))

    def scale(lam, g):
        gn = float(np.linalg.norm(g)) if g is not None else 0.0
        if lam == 0 or gn == 0:
            return 0.0
        return lam * base / max(gn, config.grad_norm_floor)

    return scale(config.lambda_seg, grad_seg), scale(config.lambda_feat, grad_feat)


def guided_noise(eps, grad_seg, grad_feat, rho: float, gamma: float):
    out = eps
    if grad_seg is not None and rho != 0:
        out = out + rho * grad_seg
    if grad_feat is not None and gamma != 0:
        out = out + gamma * grad_feat
    return out


class Guide:
    """Step hook for ``ddim.sample`` that injects both guidance gradients.

    Records per-step losses and scales in ``trace``.
    """

    def __init__(
        self,
        config: GuidanceConfig,
        schedule,
        predictor,
        decoder,
        condition,
        target_mask: np.ndarray,
        segmenter=None,
        extractor=None,
        bank: ClassFeatureBank | None = None,
        ignore_index: int = DEFAULT_IGNORE_INDEX,
    ):
        self.config = config
        self.schedule = schedule
        self.predictor = predictor
        self.decoder = decoder
        self.condition = condition
        self.mask = target_mask
        self.segmenter = segmenter
        self.extractor = extractor
        self.bank = bank
        self.ignore_index = ignore_index
        self.trace: list[dict] = []
        if config.lambda_seg > 0 and segmenter is None:
            raise GuidanceError("lambda_seg > 0 needs a segmenter")
        if config.lambda_feat > 0 and (extractor is None or bank is None):
            raise GuidanceError("lambda_feat > 0 needs a feature extractor and a feature bank")

    def _grad(self, t, z, eps, loss_fn):
        return latent_loss_gradient(
            z, t, self.schedule[t], self.condition, self.predictor, self.decoder, loss_fn, eps=eps,
            differentiate_through_predictor=self.config.differentiate_through_predictor,
            allow_fd=self.config.allow_finite_differences,
        )

    def __call__(self, t, z, eps):
        cfg = self.config
        if not cfg.enabled or not cfg.is_active(t):
            return eps
        fd = cfg.allow_finite_differences
        entry = {"t": t}
        g_seg = g_feat = None
        if cfg.lambda_seg > 0:
            entry["loss_seg"], g_seg = self._grad(
                t, z, eps, lambda x: segmentation_consistency_loss(x, self.mask, self.segmenter, self.ignore_index, fd)
            )
        if cfg.lambda_feat > 0:
            entry["loss_feat"], g_feat = self._grad(
                t, z, eps, lambda x: feature_matching_loss(x, self.mask, self.extractor, self.bank, self.ignore_index, fd)
            )
        rho, gamma = guidance_scales(eps, g_seg, g_feat, self.schedule[t], cfg)
        entry.update(rho=rho, gamma=gamma)
        self.trace.append(entry)
        return guided_noise(eps, g_seg, g_feat, rho, gamma)
