import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import log_softmax

from crossmod.domain import UnderstandingInstance
from crossmod.errors import EmptyMask, UnknownInstanceId, UnnormalizedRow
from crossmod.scoring import (
    LogProbSequence,
    masked_ntp_loss,
    normalize_answer,
    read_predictions,
    score_answers,
)


def _rows(probs):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(probs, dtype=float))


def test_certain_target_zero_loss():
    seq = LogProbSequence(_rows([[1.0, 0.0]]), [0], [True])
    assert masked_ntp_loss(seq).total == 0.0


def test_uniform_over_four():
    seq = LogProbSequence(_rows([[0.25] * 4]), [2], [True])
    assert masked_ntp_loss(seq).total == pytest.approx(1.386294, abs=1e-6)


def test_two_positions_sum():
    rows = _rows([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25], [0.1, 0.2, 0.3, 0.4]])
    loss = masked_ntp_loss(LogProbSequence(rows, [0, 3, 1], [True, True, False]))
    assert loss.total == pytest.approx(2.079442, abs=1e-6)
    assert loss.mean == pytest.approx(2.079442 / 2, abs=1e-6)
    assert loss.n_tokens == 2
    assert float(loss) == loss.total


def test_empty_mask():
    with pytest.raises(EmptyMask):
        masked_ntp_loss(LogProbSequence(_rows([[0.5, 0.5]]), [0], [False]))


def test_unnormalized_row():
    with pytest.raises(UnnormalizedRow):
        LogProbSequence(np.log([[0.5, 0.6]]), [0], [True])


logits = arrays(np.float64, (6, 5), elements=st.floats(-8, 8))


@given(logits, logits, arrays(np.bool_, 6), st.lists(st.integers(0, 4), min_size=6, max_size=6))
@settings(max_examples=60, deadline=None)
def test_loss_nonnegative_and_ignores_unmasked(a, b, mask, targets):
    mask[0] = True
    rows = log_softmax(a, axis=1)
    other = np.where(mask[:, None], rows, log_softmax(b, axis=1))
    la = masked_ntp_loss(LogProbSequence(rows, targets, mask)).total
    lb = masked_ntp_loss(LogProbSequence(other, targets, mask)).total
    assert la >= 0.0
    assert la == lb
    expected = -sum(rows[i, targets[i]] for i in range(6) if mask[i])
    assert la == pytest.approx(max(expected, 0.0), rel=1e-12, abs=1e-12)


def _inst(iid, task, answer):
    return UnderstandingInstance(
        instance_id=iid,
        task=task,
        prompt="",
        image_refs=("v#0",),
        options=("w", "x", "y", "z"),
        answer_index="ABCD".index(answer),
        answer_letter=answer,
    )


def test_two_of_three_correct():
    insts = [_inst("a", "MI", "A"), _inst("b", "MI", "B"), _inst("c", "MI", "C")]
    report = score_answers(insts, {"a": "A", "b": "B", "c": "D"})
    assert report.tasks["MI"].accuracy == pytest.approx(2 / 3)
    assert report.missing == 0


def test_normalization():
    assert score_answers([_inst("a", "CTS", "B")], {"a": "  b "}).tasks["CTS"].correct == 1
    assert normalize_answer("B.") == "B"
    assert normalize_answer("  (c) ") == "C"
    assert normalize_answer(None) == ""


def test_empty_predictions():
    insts = [_inst("a", "TIA", "A"), _inst("b", "TIA", "B")]
    report = score_answers(insts, {})
    assert report.tasks["TIA"].accuracy == 0.0
    assert report.missing == 2


def test_unknown_prediction_id():
    with pytest.raises(UnknownInstanceId):
        score_answers([_inst("a", "MI", "A")], {"zzz": "A"})


def test_average_is_unweighted_over_present_tasks():
    insts = [_inst("a", "MI", "A"), _inst("b", "CTS", "A"), _inst("c", "CTS", "A")]
    report = score_answers(insts, {"a": "A", "b": "A", "c": "B"})
    assert report.average == pytest.approx((1.0 + 0.5) / 2)
    assert set(report.to_dict()["tasks"]) == {"CTS", "MI"}


@given(st.permutations(range(6)))
@settings(max_examples=20, deadline=None)
def test_permutation_invariant(perm):
    insts = [_inst(str(i), ("MI", "CTS", "TIA")[i % 3], "ABCD"[i % 4]) for i in range(6)]
    preds = {str(i): "A" for i in range(6)}
    assert score_answers([insts[i] for i in perm], preds).to_dict() == score_answers(insts, preds).to_dict()


def test_read_predictions(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text('{"instance_id": "a", "answer": "B"}\n\n{"instance_id": "b", "answer": "c"}\n')
    assert read_predictions(path) == {"a": "B", "b": "c"}
    assert math.isfinite(len(read_predictions(path)))
