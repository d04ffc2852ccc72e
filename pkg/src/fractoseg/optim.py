"""Categorical cross-entropy, pixel accuracy and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import ShapeError, check_tensor, softmax_channels

# class ids shared by masks, losses and metrics
BACKGROUND, INTERGRANULAR, TRANSGRANULAR = 0, 1, 2
VOID = 255
CLASS_NAMES = ("background", "intergranular", "transgranular")


def _check_batch(logits: np.ndarray, target: np.ndarray, ignore_index: int | None) -> np.ndarray:
    check_tensor(logits, "logits")
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {(n, h, w)}")
    valid = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    bad = np.unique(target[valid & ((target < 0) | (target >= k))])
    if bad.size:
        raise ValueError(f"target ids {bad.tolist()} out of range for {k} logit channels")
    return valid


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray, ignore_index: int | None = None):
    """Mean per-pixel categorical cross-entropy and its gradient w.r.t. the logits.

    Pixels whose target equals `ignore_index` are dropped from both the mean and
    the gradient. With the default (None) every pixel counts.
    """
    valid = _check_batch(logits, target, ignore_index)
    n, k, h, w = logits.shape
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)

    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    tgt = np.where(valid, target, 0).astype(np.intp)
    picked = np.take_along_axis(z, tgt[:, None], axis=1)[:, 0]
    loss = float(((log_norm - picked) * valid).sum() / count)

    grad = softmax_channels(logits)
    np.put_along_axis(grad, tgt[:, None], np.take_along_axis(grad, tgt[:, None], axis=1) - 1, axis=1)
    grad *= valid[:, None].astype(grad.dtype) / count
    return loss, grad


def pixel_accuracy(logits: np.ndarray, target: np.ndarray, ignore_index: int | None = None) -> float:
    """Fraction of pixels whose argmax channel equals the target id."""
    valid = _check_batch(logits, target, ignore_index)
    count = int(valid.sum())
    if count == 0:
        return float("nan")
    hits = (logits.argmax(axis=1) == target) & valid
    return hits.sum() / count


@dataclass
class AdamState:
    """Moments and step counter for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, checked: bool = False) -> np.ndarray:
    """One bias-corrected Adam update, applied to `param` in place.

    Returns `param` for convenience; `state` is advanced as a side effect.
    """
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, moments {state.m.shape}/{state.v.shape} disagree"
        )
    if checked and not np.all(np.isfinite(grad)):
        raise FloatingPointError("adam_step: non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * (grad * grad)
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param


@dataclass
class Adam:
    """Adam over a dict of named parameters; names in `frozen` are never touched."""

    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checked: bool = True
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], frozen=()) -> None:
        for name in sorted(params):
            if name in frozen or name not in grads:
                continue
            st = self.states.get(name)
            if st is None:
                st = AdamState.zeros_like(params[name], lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
                self.states[name] = st
            adam_step(params[name], grads[name], st, checked=self.checked)
