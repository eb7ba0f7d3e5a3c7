"""Classification and dual-space margin losses.

The margin terms use raw dot products inside ``tanh``, not cosines:

    synonym pair:  max(0, m_syn - tanh(<s1, s2>))
    antonym pair:  max(0, tanh(<a1, a2>) - m_ant)

and are averaged over the batch before weighting by ``lambda_w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import InvalidInputError, Tensor

PROB_CLAMP = 1e-7
M_SYN = 0.8
M_ANT = 0.2


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise InvalidInputError(f"{n} predictions but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidInputError("labels must be 0 or 1")
    return y


def bce_loss(preds, labels) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = T.as_tensor(preds)
    p = T.reshape(p, (p.data.size,))
    y = _labels(labels, p.shape[0])
    if y.size == 0:
        raise InvalidInputError("empty batch")
    p = T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return T.mean_op(ll) * -1.0


def margin_terms(s1, s2, a1, a2, labels, m_syn: float = M_SYN, m_ant: float = M_ANT) -> Tensor:
    """Per-pair hinge terms, selected by label. Inputs are row-stacked."""
    syn = T.relu(m_syn - T.tanh_op(T.rowwise_dot(s1, s2)))
    ant = T.relu(T.tanh_op(T.rowwise_dot(a1, a2)) - m_ant)
    y = _labels(labels, syn.data.size).reshape(syn.shape)
    return syn * (1.0 - y) + ant * y


def margin_loss(pf, label: int, m_syn: float = M_SYN, m_ant: float = M_ANT) -> Tensor:
    """Hinge term of a single pair (or the per-pair vector for a batch forward)."""
    labels = np.full(len(pf), label) if np.ndim(label) == 0 else label
    return margin_terms(pf.s1, pf.s2, pf.a1, pf.a2, labels, m_syn, m_ant)


@dataclass
class LossBreakdown:
    bce: float
    margin: float
    total: float
    tensor: Tensor = field(repr=False)
    per_pair_bce: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    per_pair_margin: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def total_loss(preds, labels: Sequence[int], pf, hp) -> LossBreakdown:
    """``bce + lambda_w * mean(margin terms)`` with the graph needed for backward."""
    preds = T.as_tensor(preds)
    y = _labels(labels, preds.data.size)
    bce = bce_loss(preds, y)
    terms = margin_terms(pf.s1, pf.s2, pf.a1, pf.a2, y, hp.m_syn, hp.m_ant)
    margin = T.mean_op(terms)
    total = bce + margin * hp.lambda_w
    p = np.clip(preds.data.reshape(-1), PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return LossBreakdown(
        bce=float(bce.data),
        margin=float(margin.data),
        total=float(total.data),
        tensor=total,
        per_pair_bce=per_bce,
        per_pair_margin=np.array(terms.data).reshape(-1),
    )
