"""Segmentation losses: BCE, soft Dice, their fixed mixtures, and the Lovasz hinge."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor, custom_op

BCE_CLAMP = 1e-7
DICE_EPS = 1.0
LOSS_NAMES = ("bce", "dice", "combine1", "combine2", "lovasz")

_WEIGHTS = {"bce": (1.0, 0.0), "dice": (0.0, 1.0), "combine1": (0.5, 1.0), "combine2": (1.0, 1.0)}


@dataclass(frozen=True)
class LossSpec:
    kind: str = "combine1"
    bce_weight: float = 0.5
    dice_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.kind!r}; valid names: {', '.join(LOSS_NAMES)}")
        expected = _WEIGHTS.get(self.kind)
        if expected is not None and (self.bce_weight, self.dice_weight) != expected:
            raise ConfigError(f"{self.kind} fixes (bce_weight, dice_weight) = {expected}")

    @classmethod
    def named(cls, kind):
        if kind not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {kind!r}; valid names: {', '.join(LOSS_NAMES)}")
        bce_w, dice_w = _WEIGHTS.get(kind, (0.0, 0.0))
        return cls(kind, bce_w, dice_w)


def _target(y_true, like):
    y = y_true.data if isinstance(y_true, Tensor) else np.asarray(y_true)
    if y.shape != like.shape:
        raise DimensionError(f"prediction shape {like.shape} does not match target shape {y.shape}")
    return Tensor(y.astype(like.dtype))


def bce_loss(y_pred, y_true):
    """Mean pixel-wise binary cross-entropy of probabilities, clamped away from 0 and 1."""
    y = _target(y_true, y_pred)
    p = T.clip(y_pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = T.add(T.mul(y, T.log(p)), T.mul(T.sub(1.0, y), T.log(T.sub(1.0, p))))
    return T.neg(T.mean(ll))


def dice_loss(y_pred, y_true, eps=DICE_EPS):
    """Soft Dice loss ``1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)`` over all pixels."""
    y = _target(y_true, y_pred)
    inter = T.sum(T.mul(y_pred, y))
    total = T.add(T.sum(y_pred), float(y.data.sum()))
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), eps), T.add(total, eps)))


def combined_loss(y_pred, y_true, spec):
    """``bce_weight * BCE + dice_weight * Dice``."""
    terms = []
    if spec.bce_weight:
        terms.append(T.mul(bce_loss(y_pred, y_true), spec.bce_weight))
    if spec.dice_weight:
        terms.append(T.mul(dice_loss(y_pred, y_true), spec.dice_weight))
    if not terms:
        return Tensor(np.zeros((), dtype=y_pred.dtype))
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def lovasz_loss(logits, y_true):
    """Binary Lovasz hinge on raw logits, computed per image and averaged over the batch.

    With margins ``e = 1 - logit * (2y - 1)`` sorted in decreasing order, each
    image contributes ``sum(relu(e_sorted) * g)`` where ``g`` holds the
    increments of the Jaccard loss along the sorted labels. An image with no
    crack pixels scores ``relu(1 + max logit)``, so it is zero once every
    logit is at most -1.
    """
    y = _target(y_true, logits).data
    b = logits.shape[0] if logits.ndim > 1 else 1
    flat = logits.data.reshape(b, -1).astype(np.float64)
    labels = y.reshape(b, -1).astype(np.float64)
    signs = 2.0 * labels - 1.0
    errors = 1.0 - flat * signs
    total = 0.0
    dloss = np.zeros_like(flat)
    for i in range(b):
        order = np.argsort(-errors[i], kind="stable")
        grad = _kernels.lovasz_grad(np.ascontiguousarray(labels[i, order]))
        e_sorted = errors[i, order]
        total += float(np.dot(np.maximum(e_sorted, 0.0), grad))
        active = (e_sorted > 0) * grad
        dloss[i, order] = -active * signs[i, order]
    dloss /= b
    value = np.asarray(total / b, dtype=logits.dtype)
    shape = logits.shape
    return custom_op(value, (logits,), lambda g: ((g * dloss).reshape(shape).astype(logits.dtype),), "lovasz")


def compute_loss(logits, y_true, spec):
    """Training loss from logits: Lovasz works on logits, the rest on probabilities."""
    y = y_true.data if isinstance(y_true, Tensor) else np.asarray(y_true)
    if logits.ndim == y.ndim + 1 and logits.shape[-1] == 1:
        logits = T.reshape(logits, logits.shape[:-1])
    if spec.kind == "lovasz":
        return lovasz_loss(logits, y_true)
    return combined_loss(T.sigmoid(logits), y_true, spec)
