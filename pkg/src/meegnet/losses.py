"""Binary cross-entropy, focal and class-balanced focal losses.

All three act on per-cell sigmoid probabilities of shape ``(B, electrodes)``
and reduce by the arithmetic mean over every (sample, electrode) cell.
Probabilities are clamped to ``[eps, 1 - eps]`` before the log; the clamp is
flat, so its derivative is zero outside that range.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigError, ShapeError

LossKind = Literal["bce", "fl", "cbf"]

FL_GRID = {"alpha": (0.25, 0.333, 0.5, 0.666, 0.75),
           "gamma": (0.0, 0.1, 0.3, 0.5, 1.0, 1.5, 2.0)}
CBF_GRID = {"beta": (0.9, 0.99, 0.999, 0.9999),
            "gamma": (0.0, 0.1, 0.3, 0.5, 1.0, 1.5, 2.0)}


@dataclass
class LossConfig:
    kind: LossKind = "bce"
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 0.999
    # (n_pos, n_neg) cell counts of the training split
    class_counts: tuple[int, int] = (1, 1)
    # "per_class": each cell uses its own class count; "global": n = n_pos + n_neg
    count_mode: Literal["per_class", "global"] = "per_class"
    prob_clamp: float = 1e-7

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.kind not in ("bce", "fl", "cbf"):
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected bce, fl or cbf")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.kind == "fl" and not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.count_mode not in ("per_class", "global"):
            raise ConfigError(f"unknown count mode {self.count_mode!r}")
        self.class_counts = tuple(int(n) for n in self.class_counts)
        if len(self.class_counts) != 2 or min(self.class_counts) < 0:
            raise ConfigError(f"class_counts must be two non-negative counts, got {self.class_counts}")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ConfigError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")

    def to_dict(self):
        d = asdict(self)
        d["class_counts"] = list(self.class_counts)
        return d

    def with_counts(self, labels):
        """Copy of this config with class counts taken from a label array."""
        labels = np.asarray(labels)
        n_pos = int(labels.sum())
        d = self.to_dict()
        d["class_counts"] = (n_pos, int(labels.size) - n_pos)
        return LossConfig(**d)


@dataclass
class LossValue:
    mean: float
    cells: np.ndarray | None = field(default=None, repr=False)

    def __float__(self):
        return self.mean


def _check(probs, labels):
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} and labels {labels.shape} differ in shape")
    return probs, labels


def p_t(probs, labels, eps=1e-7):
    """Probability assigned to the true class of each cell (after clamping)."""
    p = np.clip(probs, eps, 1.0 - eps)
    return np.where(np.asarray(labels) == 1, p, 1.0 - p)


def class_balanced_weight(beta, n):
    """``(1 - beta) / (1 - beta**n)``, stable as ``beta`` approaches 1."""
    n = np.asarray(n, dtype=float)
    if beta == 0.0:
        return np.ones_like(n)
    # 1 - beta**n = -expm1(n * log(beta))
    return (1.0 - beta) / -np.expm1(n * np.log(beta))


def cell_weights(labels, cfg: LossConfig):
    """Per-cell multiplicative weight in front of ``(1-p_t)^gamma * -log p_t``."""
    labels = np.asarray(labels)
    if cfg.kind == "bce":
        return np.ones(labels.shape)
    if cfg.kind == "fl":
        return np.full(labels.shape, cfg.alpha)
    n_pos, n_neg = cfg.class_counts
    if cfg.count_mode == "global":
        n = n_pos + n_neg
        if n == 0:
            raise ConfigError("class-balanced loss needs a non-zero sample count")
        return np.full(labels.shape, float(class_balanced_weight(cfg.beta, n)))
    if (labels == 1).any() and n_pos == 0:
        raise ConfigError("class-balanced loss: positive cells present but n_pos = 0")
    if (labels == 0).any() and n_neg == 0:
        raise ConfigError("class-balanced loss: negative cells present but n_neg = 0")
    w_pos = class_balanced_weight(cfg.beta, max(n_pos, 1))
    w_neg = class_balanced_weight(cfg.beta, max(n_neg, 1))
    return np.where(labels == 1, w_pos, w_neg)


def _modulated(probs, labels, weights, gamma, eps):
    pt = p_t(probs, labels, eps)
    if gamma == 0.0:
        return -weights * np.log(pt)
    return -weights * (1.0 - pt) ** gamma * np.log(pt)


def bce(probs, labels, eps=1e-7) -> LossValue:
    probs, labels = _check(probs, labels)
    cells = -np.log(p_t(probs, labels, eps))
    return LossValue(float(cells.mean()), cells)


def focal(probs, labels, alpha=0.25, gamma=2.0, eps=1e-7) -> LossValue:
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    probs, labels = _check(probs, labels)
    cells = _modulated(probs, labels, alpha, gamma, eps)
    return LossValue(float(cells.mean()), cells)


def class_balanced_focal(probs, labels, beta=0.999, gamma=2.0, class_counts=(1, 1),
                         eps=1e-7, count_mode="per_class") -> LossValue:
    probs, labels = _check(probs, labels)
    cfg = LossConfig("cbf", beta=beta, gamma=gamma, class_counts=class_counts,
                     count_mode=count_mode, prob_clamp=eps)
    cells = _modulated(probs, labels, cell_weights(labels, cfg), gamma, eps)
    return LossValue(float(cells.mean()), cells)


def loss_value(probs, labels, cfg: LossConfig) -> LossValue:
    if cfg.kind == "bce":
        return bce(probs, labels, cfg.prob_clamp)
    if cfg.kind == "fl":
        return focal(probs, labels, cfg.alpha, cfg.gamma, cfg.prob_clamp)
    return class_balanced_focal(probs, labels, cfg.beta, cfg.gamma, cfg.class_counts,
                                cfg.prob_clamp, cfg.count_mode)


def loss_gradient(probs, labels, cfg: LossConfig, wrt="probs"):
    """Gradient of the mean loss w.r.t. the probabilities or the pre-sigmoid logits.

    With ``wrt="logits"`` the chain rule through the sigmoid is applied,
    i.e. the result is ``dL/dp * p * (1 - p)``.
    """
    probs, labels = _check(probs, labels)
    eps = cfg.prob_clamp
    gamma = cfg.gamma if cfg.kind != "bce" else 0.0
    weights = cell_weights(labels, cfg)
    positive = labels == 1
    pt = np.where(positive, probs, 1.0 - probs)
    inside = (pt > eps) & (pt < 1.0 - eps)
    pt = np.clip(pt, eps, 1.0 - eps)
    # d/dpt of -(1-pt)^g log pt
    d_pt = -(1.0 - pt) ** gamma / pt
    if gamma != 0.0:
        d_pt = d_pt + gamma * (1.0 - pt) ** (gamma - 1.0) * np.log(pt)
    d_p = np.where(positive, d_pt, -d_pt) * weights * inside / probs.size
    if wrt == "probs":
        return d_p.astype(probs.dtype, copy=False)
    if wrt == "logits":
        return (d_p * probs * (1.0 - probs)).astype(probs.dtype, copy=False)
    raise ValueError(f"wrt must be 'probs' or 'logits', got {wrt!r}")
