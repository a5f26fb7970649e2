"""Weighted cross-entropy terms and their adversarial combination.

``weighted_ce`` consumes a logits node (probabilities are produced inside
the fused softmax-cross-entropy op, which is what keeps the loss finite).
``dat_loss`` combines the mental-health term with the lambda-scaled gender
term; the sign flip into the encoder comes from the reversal node inside
the discriminator branch, so the combined graph hands the discriminator
head the un-reversed +lambda gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ndnum
from .errors import ContractError, ValidationError


@dataclass(frozen=True)
class ClassWeights:
    w: tuple[float, float]

    def __post_init__(self):
        if len(self.w) != 2 or not all(np.isfinite(v) and v > 0 for v in self.w):
            raise ValidationError(f"class weights must be two finite positives, got {self.w}")

    @staticmethod
    def unit() -> "ClassWeights":
        return ClassWeights((1.0, 1.0))


@dataclass(frozen=True)
class LossBreakdown:
    l_mental: float
    l_dis: float
    lam: float
    l_final: float

    @staticmethod
    def combine(l_mental: float, l_dis: float, lam: float) -> "LossBreakdown":
        return LossBreakdown(l_mental, l_dis, lam, l_mental + lam * l_dis)


def class_weights(counts: Sequence[int]) -> ClassWeights:
    """Inverse-frequency weights w_c = N / (2 * n_c) from per-class counts."""
    if len(counts) != 2:
        raise ValidationError(f"expected two class counts, got {len(counts)}")
    if min(counts) < 1:
        raise ValidationError(f"degenerate class: counts {tuple(counts)} include an empty class")
    total = float(sum(counts))
    return ClassWeights((total / (2.0 * counts[0]), total / (2.0 * counts[1])))


def weighted_ce(scores: ndnum.Node, labels: Sequence[int], weights: Optional[ClassWeights]) -> ndnum.Node:
    """Scalar node (1/N) * sum_i w_{y_i} * (-log softmax(scores)_i[y_i]).

    ``weights=None`` means unit weights, reducing to plain mean cross-entropy.
    """
    labels = list(labels)
    if any(y not in (0, 1) for y in labels):
        raise ValidationError(f"labels must be 0 or 1, got {sorted(set(labels))}")
    cw = None if weights is None else np.asarray(weights.w, dtype=np.float64)
    return ndnum.softmax_cross_entropy(scores, labels, class_weights=cw)


def dat_loss(
    scores_mental: ndnum.Node,
    labels_mental: Sequence[int],
    scores_gender: ndnum.Node,
    labels_gender: Sequence[int],
    weights_mental: Optional[ClassWeights],
    weights_gender: Optional[ClassWeights],
    lam: float,
) -> tuple[ndnum.Node, LossBreakdown]:
    """Combined objective: mental-health CE plus lambda times the gender CE.

    Returns the scalar graph root plus the numeric breakdown of the terms.
    The gender scores are expected to come from the discriminator branch,
    whose reversal node flips the encoder-bound gradient.
    """
    if len(labels_mental) != len(labels_gender):
        raise ContractError(f"batch sizes differ: {len(labels_mental)} vs {len(labels_gender)}")
    if not np.isfinite(lam) or lam < 0.0:
        raise ContractError(f"lambda must be finite and >= 0, got {lam}")
    l_mental = weighted_ce(scores_mental, labels_mental, weights_mental)
    l_dis = weighted_ce(scores_gender, labels_gender, weights_gender)
    root = ndnum.add_bias(l_mental, ndnum.scale(l_dis, lam))
    ndnum.forward(root)
    breakdown = LossBreakdown.combine(float(l_mental.value), float(l_dis.value), lam)
    return root, breakdown
