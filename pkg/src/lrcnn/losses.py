"""Focal classification loss, smooth-L1 regression loss, and their sums.

The focal term implemented here is -(1 - p_t)^gamma * log(p_t); for even
gamma this has the magnitude of the printed (p_t - 1)^gamma * log(p_t) form
with the sign chosen so that minimizing rewards confident correct
predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rpn import RpnTargets
from .tensor import Array, Tensor

_EPS = 1e-12  # probability clamp before log


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    lam: float = 1.0
    gamma: float = 2.0
    n_cls_rule: str = "sampled"  # sampled | positive | one
    n_regr_rule: str = "positive"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        for rule in (self.n_cls_rule, self.n_regr_rule):
            if rule not in ("sampled", "positive", "one"):
                raise ValueError(f"unknown normalizer rule: {rule}")


def _normalizer(rule: str, n_sampled: int, n_pos: int) -> float:
    value = {"sampled": n_sampled, "positive": n_pos, "one": 1}[rule]
    return float(max(1, value))


@dataclass
class LossResult:
    total: Tensor
    cls: Tensor
    reg: Tensor


def _zero_result() -> LossResult:
    z = Tensor(np.zeros(()))
    return LossResult(z, Tensor(np.zeros(())), Tensor(np.zeros(())))


def focal_term(p: float, p_star: int, gamma: float) -> float:
    """Scalar focal loss -(1 - p_t)^gamma * log(p_t), p_t = p if positive else 1-p."""
    p = min(max(p, _EPS), 1.0 - _EPS)
    p_t = p if p_star == 1 else 1.0 - p
    return -((1.0 - p_t) ** gamma) * np.log(p_t)


def smooth_l1(t: float, t_star: float) -> float:
    """0.5 d^2 inside |d| < 1, |d| - 0.5 outside; C1 at the junction."""
    d = abs(t - t_star)
    return 0.5 * d * d if d < 1.0 else d - 0.5


def smooth_l1_op(d: Tensor) -> Tensor:
    """Elementwise smooth-L1 of a difference tensor, on the tape."""
    ad = np.abs(d.data)
    inner = ad < 1.0
    val = np.where(inner, 0.5 * d.data * d.data, ad - 0.5)

    def bw(g: Array) -> Array:
        return g * np.where(inner, d.data, np.sign(d.data))

    return Tensor(val, [(d, bw)])


def _focal_sum(p_t: Tensor, gamma: float) -> Tensor:
    p_t = T.clip(p_t, _EPS, 1.0 - _EPS)
    one_minus = T.add_scalar(T.mul_scalar(p_t, -1.0), 1.0)
    term = T.mul(T.pow_scalar(one_minus, gamma), T.mul_scalar(T.log(p_t), -1.0))
    return T.sum_all(term)


def rpn_loss(probs: Tensor, targets: RpnTargets, pred_deltas: Tensor, cfg: LossConfig) -> LossResult:
    """Objectness focal loss over sampled anchors plus smooth-L1 over the
    positive anchors' four delta components.

    `probs` holds per-anchor foreground probabilities (N,), `pred_deltas`
    the per-anchor (N,4) regression outputs; both live on the tape.
    """
    sampled = np.flatnonzero(targets.sampled)
    if sampled.size == 0:
        return _zero_result()
    labels = targets.labels[sampled]
    p = T.gather_rows(probs, sampled)
    pos_mask = (labels == 1).astype(np.float64)
    one_minus_p = T.add_scalar(T.mul_scalar(p, -1.0), 1.0)
    p_t = T.add(T.mul(p, Tensor(pos_mask)), T.mul(one_minus_p, Tensor(1.0 - pos_mask)))
    n_pos = int((targets.labels[sampled] == 1).sum())
    n_cls = _normalizer(cfg.n_cls_rule, sampled.size, n_pos)
    cls = T.mul_scalar(_focal_sum(p_t, cfg.gamma), cfg.alpha / n_cls)

    pos_idx = sampled[labels == 1]
    if pos_idx.size:
        diff = T.sub(T.gather_rows(pred_deltas, pos_idx), Tensor(targets.deltas[pos_idx]))
        n_regr = _normalizer(cfg.n_regr_rule, sampled.size, pos_idx.size)
        reg = T.mul_scalar(T.sum_all(smooth_l1_op(diff)), cfg.lam / n_regr)
    else:
        reg = Tensor(np.zeros(()))
    return LossResult(T.add(cls, reg), cls, reg)


def head_loss(
    class_probs: Tensor,
    class_labels: Array,
    pred_deltas: Tensor,
    gt_deltas: Array,
    cfg: LossConfig,
) -> LossResult:
    """Focal loss on the probability of each RoI's true class plus smooth-L1
    over the gt class's four delta slots for foreground RoIs.

    Background RoIs contribute classification only.
    """
    labels = np.asarray(class_labels, dtype=np.int64)
    r = labels.shape[0]
    if r == 0:
        return _zero_result()
    p_t = T.pick(class_probs, np.arange(r), labels)
    n_pos = int((labels > 0).sum())
    n_cls = _normalizer(cfg.n_cls_rule, r, n_pos)
    cls = T.mul_scalar(_focal_sum(p_t, cfg.gamma), cfg.alpha / n_cls)

    pos = np.flatnonzero(labels > 0)
    if pos.size:
        rows = np.repeat(pos, 4)
        cols = (labels[pos][:, None] * 4 + np.arange(4)[None, :]).reshape(-1)
        pred = T.pick(pred_deltas, rows, cols)
        diff = T.sub(pred, Tensor(np.asarray(gt_deltas)[pos].reshape(-1)))
        n_regr = _normalizer(cfg.n_regr_rule, r, pos.size)
        reg = T.mul_scalar(T.sum_all(smooth_l1_op(diff)), cfg.lam / n_regr)
    else:
        reg = Tensor(np.zeros(()))
    return LossResult(T.add(cls, reg), cls, reg)


def total_loss(rpn: Tensor, head: Tensor) -> Tensor:
    """Unweighted sum of the two stage losses."""
    if rpn.size != 1 or head.size != 1:
        raise ValueError("total_loss expects scalar inputs")
    return T.add(T.reshape(rpn, ()), T.reshape(head, ()))
