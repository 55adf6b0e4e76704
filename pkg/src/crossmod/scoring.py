"""Answer-token loss and multiple-choice accuracy scoring."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.special import logsumexp

from .domain import UnderstandingInstance
from .errors import DataError, EmptyMask, UnknownInstanceId, UnnormalizedRow

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class LogProbSequence:
    """Per-position log-probability rows, target tokens and an answer mask."""

    rows: np.ndarray
    targets: np.ndarray
    answer_mask: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.int64)
        mask = np.asarray(self.answer_mask, dtype=bool)
        if rows.ndim != 2 or not (len(rows) == len(targets) == len(mask)):
            raise DataError("rows, targets and answer_mask must have equal length")
        if np.any(targets < 0) or np.any(targets >= rows.shape[1]):
            raise DataError("target index outside vocabulary")
        lse = logsumexp(rows, axis=1)
        bad = np.flatnonzero(np.abs(lse) > NORMALIZATION_TOL)
        if bad.size:
            raise UnnormalizedRow(f"row {bad[0]} log-sum-exp {lse[bad[0]]:.3g} != 0")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "answer_mask", mask)


@dataclass(frozen=True)
class NtpLoss:
    total: float
    mean: float
    n_tokens: int

    def __float__(self) -> float:
        return self.total


def masked_ntp_loss(seq: LogProbSequence) -> NtpLoss:
    """Summed negative log-likelihood over the answer positions only.

    The sum is the primary value; the per-token mean is reported alongside.
    """
    idx = np.flatnonzero(seq.answer_mask)
    if idx.size == 0:
        raise EmptyMask("no answer positions in mask")
    picked = seq.rows[idx, seq.targets[idx]]
    total = float(-np.sum(picked))
    # -log p is >= 0 mathematically; clip the -0.0 / rounding case
    total = max(total, 0.0)
    return NtpLoss(total=total, mean=total / idx.size, n_tokens=int(idx.size))


def normalize_answer(text: str | None) -> str:
    """Strip, case-fold, and keep the first alphabetic character ("  b." -> "B")."""
    if text is None:
        return ""
    for ch in str(text).strip():
        if ch.isalpha():
            return ch.upper()
    return ""


@dataclass
class TaskScore:
    n: int = 0
    correct: int = 0
    missing: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


@dataclass
class TaskAccuracyReport:
    tasks: dict[str, TaskScore] = field(default_factory=dict)

    @property
    def average(self) -> float:
        present = [s.accuracy for s in self.tasks.values() if s.n]
        return float(np.mean(present)) if present else 0.0

    @property
    def missing(self) -> int:
        return sum(s.missing for s in self.tasks.values())

    def to_dict(self) -> dict:
        return {
            "tasks": {
                t: {"n": s.n, "correct": s.correct, "accuracy": s.accuracy, "missing": s.missing}
                for t, s in sorted(self.tasks.items())
            },
            "average_accuracy": self.average,
            "missing": self.missing,
        }


def score_answers(
    instances: Iterable[UnderstandingInstance], predictions: Mapping[str, str]
) -> TaskAccuracyReport:
    """Exact-match accuracy per task; absent predictions count as wrong."""
    instances = list(instances)
    known = {i.instance_id for i in instances}
    for iid in predictions:
        if iid not in known:
            raise UnknownInstanceId(f"prediction for unknown instance {iid!r}")
    report = TaskAccuracyReport()
    for inst in instances:
        score = report.tasks.setdefault(inst.task, TaskScore())
        score.n += 1
        if inst.instance_id not in predictions:
            score.missing += 1
            continue
        if normalize_answer(predictions[inst.instance_id]) == inst.answer_letter:
            score.correct += 1
    return report


def read_predictions(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["instance_id"]] = row["answer"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction row ({exc})") from None
    return out

