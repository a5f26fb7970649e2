"""Stratified F1 evaluation, the linear gender probe, and embedding export.

Reports follow the two-class convention throughout: the positive class is
label 1, per-class F1 is computed from one confusion matrix read from both
sides, ``f1_avg`` is the unweighted mean of the two class scores, and
``f1_gender_avg`` averages the male and female ``f1_avg`` values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import datapipe, ndnum, optim
from . import model as model_mod
from .datapipe import open_text
from .errors import StratumError, ValidationError
from .model import ParamSet

GENDER_NAMES = {0: "male", 1: "female"}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def swapped(self) -> "ConfusionMatrix":
        """The same counts viewed with the negative class as positive."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def f1(cm: ConfusionMatrix) -> float:
    """Harmonic mean of precision and recall; degenerate 0/0 ratios count as 0."""
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def round2(value: float) -> float:
    """Two-decimal half-up rounding, as used for tabulated percentages."""
    return float(Decimal(str(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class StratumScores:
    f1_neg: float
    f1_pos: float
    f1_avg: float
    empty: bool = False

    @staticmethod
    def from_confusion(cm: ConfusionMatrix) -> "StratumScores":
        if cm.total == 0:
            return StratumScores(0.0, 0.0, 0.0, empty=True)
        pos, neg = f1(cm), f1(cm.swapped())
        return StratumScores(f1_neg=neg, f1_pos=pos, f1_avg=(neg + pos) / 2.0)


@dataclass
class MetricsReport:
    overall: StratumScores
    per_gender: dict[int, StratumScores]
    f1_gender_avg: float
    counts: dict[str, ConfusionMatrix]

    def to_dict(self) -> dict:
        def scores(s: StratumScores) -> dict:
            out = {"f1_neg": s.f1_neg, "f1_pos": s.f1_pos, "f1_avg": s.f1_avg}
            if s.empty:
                out["empty"] = True
            return out

        def cells(cm: ConfusionMatrix) -> dict:
            return {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn}

        return {
            "f1_neg": self.overall.f1_neg,
            "f1_pos": self.overall.f1_pos,
            "f1_avg": self.overall.f1_avg,
            "per_gender": {GENDER_NAMES[g]: scores(s) for g, s in sorted(self.per_gender.items())},
            "f1_gender_avg": self.f1_gender_avg,
            "counts": {name: cells(cm) for name, cm in self.counts.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def confusion_from_pairs(pairs) -> ConfusionMatrix:
    tp = fp = fn = tn = 0
    for truth, pred in pairs:
        if truth == 1 and pred == 1:
            tp += 1
        elif truth == 0 and pred == 1:
            fp += 1
        elif truth == 1 and pred == 0:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def predict(params: ParamSet, examples: list[datapipe.Example]) -> np.ndarray:
    """Argmax class per example; ties resolve to class 0."""
    x = np.array([e.embedding for e in examples], dtype=np.float64)
    probs = model_mod.classify(params, model_mod.encode(params, x))
    return np.argmax(probs, axis=1)


def _majority(votes: list[int]) -> int:
    ones = sum(votes)
    zeros = len(votes) - ones
    return 1 if ones > zeros else 0


def evaluate(
    params: ParamSet, examples: list[datapipe.Example], by_participant: bool = False
) -> MetricsReport:
    """Score predictions overall and per gender stratum.

    ``by_participant`` aggregates segment predictions to one majority-vote
    decision per participant before scoring.
    """
    if not examples:
        raise ValidationError("cannot evaluate an empty example set")
    preds = predict(params, examples)
    rows = [(e.label, int(p), e.gender, e.participant) for e, p in zip(examples, preds)]
    if by_participant:
        grouped: dict[str, list[tuple[int, int, int]]] = {}
        for label, pred, gender, participant in rows:
            grouped.setdefault(participant, []).append((label, pred, gender))
        rows = [
            (votes[0][0], _majority([v[1] for v in votes]), votes[0][2], pid)
            for pid, votes in grouped.items()
        ]

    overall_cm = confusion_from_pairs((label, pred) for label, pred, _, _ in rows)
    gender_cms = {
        g: confusion_from_pairs((label, pred) for label, pred, gender, _ in rows if gender == g)
        for g in (0, 1)
    }
    per_gender = {g: StratumScores.from_confusion(cm) for g, cm in gender_cms.items()}
    f1_gender_avg = (per_gender[0].f1_avg + per_gender[1].f1_avg) / 2.0
    counts = {"overall": overall_cm}
    counts.update({GENDER_NAMES[g]: cm for g, cm in gender_cms.items()})
    return MetricsReport(
        overall=StratumScores.from_confusion(overall_cm),
        per_gender=per_gender,
        f1_gender_avg=f1_gender_avg,
        counts=counts,
    )


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 200
    lr: float = 1e-2
    seed: int = 0


def gender_probe(
    params: ParamSet, examples: list[datapipe.Example], probe: ProbeConfig = ProbeConfig()
) -> float:
    """Held-in accuracy of a fresh affine+softmax gender classifier on frozen encodings.

    The encoder is never updated; only the probe's affine map trains, with
    full-batch Adam for a fixed number of steps.
    """
    genders = [e.gender for e in examples]
    if min(genders.count(0), genders.count(1)) < 2:
        raise StratumError("gender probe needs at least 2 examples of each gender")
    x = np.array([e.embedding for e in examples], dtype=np.float64)
    h = model_mod.encode(params, x)

    hidden = h.shape[1]
    rng = np.random.default_rng(probe.seed)
    bound = np.sqrt(6.0 / (hidden + 2))
    probe_params = ParamSet(
        {"probe.weight": rng.uniform(-bound, bound, size=(hidden, 2)), "probe.bias": np.zeros(2)}
    )
    state = optim.AdamState.init(probe_params)
    for _ in range(probe.steps):
        w = ndnum.input_node(probe_params["probe.weight"], name="probe.weight")
        b = ndnum.input_node(probe_params["probe.bias"], name="probe.bias")
        logits = ndnum.add_bias(ndnum.matmul(ndnum.input_node(h), w), b)
        loss = ndnum.softmax_cross_entropy(logits, genders)
        ndnum.forward(loss)
        grads = ndnum.backward(loss)
        probe_params, state = optim.adam_step(probe_params, grads, state, probe.lr)

    scores = h @ probe_params["probe.weight"] + probe_params["probe.bias"]
    predictions = np.argmax(scores, axis=1)
    return float(np.mean(predictions == np.asarray(genders)))


def export_embeddings(params: ParamSet, examples: list[datapipe.Example], sink) -> int:
    """Write one CSV row per example: id, gender, label, then the encoder outputs.

    Returns the number of data rows written.
    """
    if examples:
        x = np.array([e.embedding for e in examples], dtype=np.float64)
        h = model_mod.encode(params, x)
        width = h.shape[1]
    else:
        h = np.zeros((0, 0))
        width = model_mod.config_from_params(params).encoder_hidden
    with open_text(sink, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "gender", "label"] + [f"h{i}" for i in range(width)])
        for ex, row in zip(examples, h):
            writer.writerow([ex.id, ex.gender, ex.label] + [repr(float(v)) for v in row])
    return len(examples)
