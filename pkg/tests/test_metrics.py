import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexmoe.errors import EmptyReportError, UndefinedClassError
from flexmoe.metrics import (
    RoutingLog,
    accuracy,
    activation_matrix,
    auc_macro,
    bank_similarity,
    confusion_matrix,
    cosine_matrix,
    macro_f1,
    specialization_rate,
    write_activation_matrix,
    write_similarity,
)
from flexmoe.modality import ADNI, ExpertIndexMap, bank_init

from oracles import auc_pair_count, macro_auc_pair_count


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert accuracy([0, 1, 0, 1], [0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_accuracy_is_confusion_trace(pairs):
    preds, labels = zip(*pairs)
    cm = confusion_matrix(preds, labels, 4)
    assert cm.sum() == len(pairs)
    assert accuracy(preds, labels) == pytest.approx(np.trace(cm) / len(pairs), abs=1e-15)


def test_macro_f1_examples():
    assert macro_f1([0, 1, 2, 0], [0, 1, 2, 0], 3) == 1.0
    # confusion [[1,1],[1,1]]: precision = recall = 0.5 per class
    assert macro_f1([0, 1, 0, 1], [0, 0, 1, 1], 2) == pytest.approx(0.5, abs=1e-15)
    # collapse to class 0 on balanced labels: F1_0 = 2*2/(6+2) = 0.5
    assert macro_f1([0] * 6, [0, 0, 1, 1, 2, 2], 3) == pytest.approx(1 / 6, abs=1e-15)
    with pytest.raises(ValueError):
        macro_f1([0, 3], [0, 1], 3)


def test_macro_f1_absent_class_scores_zero():
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3, abs=1e-15)


def test_auc_examples():
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    assert auc_macro(scores, [0, 0, 1, 1]) == 1.0
    assert auc_macro(np.full((4, 2), 0.5), [0, 0, 1, 1]) == 0.5
    s = np.array([0.1, 0.6, 0.4, 0.8])
    assert auc_macro(np.stack([1 - s, s], axis=1), [0, 0, 1, 1]) == 0.75


def test_auc_undefined_class_named():
    with pytest.raises(UndefinedClassError) as info:
        auc_macro(np.full((3, 3), 1 / 3), [0, 1, 1])
    assert info.value.label == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 50))
def test_binary_auc_matches_pair_counting(seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    # coarse scores force ties
    s = rng.integers(0, 6, size=n) / 5.0
    scores = np.stack([1 - s, s], axis=1)
    assert auc_macro(scores, labels) == macro_auc_pair_count(labels, scores, 2)
    assert auc_pair_count(labels == 1, s) == pytest.approx(auc_macro(scores, labels), abs=0)


# ---------------------------------------------------------------- activation ratios


def _log(masks, tops, n_experts=16):
    tops = np.asarray(tops)
    return RoutingLog(np.asarray(masks), np.zeros(len(masks), dtype=np.int64), tops, n_experts)


def test_activation_one_hot():
    m = activation_matrix(_log([3] * 5, [[3]] * 5), ADNI)
    expected = np.zeros(16)
    expected[3] = 1.0
    np.testing.assert_array_equal(m.row("IG"), expected)


def test_activation_counts_all_assignments():
    m = activation_matrix(_log([15, 15], [[0, 1], [0, 2]]), ADNI)
    np.testing.assert_allclose(m.row("IGCB")[:4], [0.5, 0.25, 0.25, 0.0], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_activation_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    tops = np.stack([rng.permutation(16)[:4] for _ in range(n)])
    m = activation_matrix(_log(rng.integers(1, 16, size=n), tops), ADNI)
    np.testing.assert_allclose(m.values.sum(axis=1), 1.0, atol=1e-9)


def test_activation_empty():
    with pytest.raises(EmptyReportError):
        activation_matrix(_log([], np.zeros((0, 4), dtype=np.int64)), ADNI)


def test_specialization_rate():
    imap = ExpertIndexMap(ADNI)
    ig = ADNI.parse("IG")
    logs = _log([ig.mask, ig.mask, 15], [[5, 0], [1, 5], [0, 1]])
    rates = specialization_rate(logs, imap)
    assert rates["IG"] == 0.5 and rates["IGCB"] == 1.0


def test_activation_csv(tmp_path):
    m = activation_matrix(_log([15, 1], [[0], [11]]), ADNI, ExpertIndexMap(ADNI))
    path = tmp_path / "a.csv"
    write_activation_matrix(m, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("combo,expert_0")
    assert lines[1].startswith("IGCB,1.0") and lines[2].startswith("I,")


# ---------------------------------------------------------------- bank similarity


def test_cosine_examples():
    v = np.array([1.0, 2.0, -0.5])
    sim, zero = cosine_matrix([v, v, 2 * v, [0.0, 0.0, 0.0]])
    assert sim[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert sim[0, 2] == pytest.approx(1.0, abs=1e-15)
    assert zero == [False, False, False, True]
    assert sim[0, 3] == 0.0
    sim, _ = cosine_matrix([[1.0, 0.0], [0.0, 1.0]])
    assert sim[0, 1] == 0.0


def test_bank_similarity_shapes_and_csv(tmp_path):
    bank = bank_init(ADNI, 8, seed=0)
    sim = bank_similarity(bank, ExpertIndexMap(ADNI))
    # the full combination has no readable cell and is left out
    assert sim.rows.values.shape == (14, 14)
    assert sim.cols.values.shape == (4, 4)
    assert sim.rows.labels[0] == "IGC" and not any(sim.rows.zero_norm)
    np.testing.assert_allclose(np.diag(sim.cols.values), 1.0, atol=1e-12)
    path = tmp_path / "rows.csv"
    write_similarity(sim.rows, path, "observed")
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "observed" and header[-1] == "zero_norm"


def test_bank_similarity_ignores_unreadable_cells():
    bank = bank_init(ADNI, 8, seed=0)
    before = bank_similarity(bank)
    ig = ADNI.parse("IG")
    bank.table.data[ig.row, 0] += 100.0  # slot I is observed in IG, so never read
    after = bank_similarity(bank)
    np.testing.assert_array_equal(before.rows.values, after.rows.values)
    np.testing.assert_array_equal(before.cols.values, after.cols.values)
