import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import kappa_brute
from tasgen.errors import ValidationError
from tasgen.metrics import ConfusionMatrix, f1_relabel, f1_score, oa_kappa


def cm(counts, k=None):
    counts = np.asarray(counts)
    return ConfusionMatrix(counts, tuple(f"c{i}" for i in range(k or len(counts))))


def test_f1_perfect_and_empty():
    truth = np.array([0, 1, 1, 0, 1], dtype=bool)
    assert f1_score(truth, truth) == 1.0
    assert f1_score(np.zeros(5, bool), np.zeros(5, bool)) == 0.0


def test_f1_hand_value():
    # 4 true positives, 5 predicted, 8 actual: precision 0.8, recall 0.5
    pred = np.zeros(20, dtype=bool)
    truth = np.zeros(20, dtype=bool)
    pred[:5] = True
    truth[1:9] = True
    assert f1_score(pred, truth) == pytest.approx(0.6154, abs=1e-4)


def test_f1_length_mismatch():
    with pytest.raises(ValidationError):
        f1_score([True, False], [True])


def test_f1_relabel_definition():
    anchor = ["a"] * 6
    truth = ["a", "b", "b", "c", "a", "a"]
    assert f1_relabel(truth, truth, anchor) == 1.0
    # two changed steps found, one with the wrong class, one spurious change
    pred = ["a", "b", "c", "a", "b", "a"]
    p, r = 1 / 3, 1 / 3
    assert f1_relabel(pred, truth, anchor) == pytest.approx(2 * p * r / (p + r))
    assert f1_relabel(anchor, truth, anchor) == 0.0
    with pytest.raises(ValidationError):
        f1_relabel(["a"], ["a", "b"], ["a", "a"])


def test_oa_kappa_hand_values():
    oa, kappa = oa_kappa(cm([[40, 10], [5, 45]]))
    assert abs(oa - 0.85) <= 1e-9 and abs(kappa - 0.70) <= 1e-9
    assert oa_kappa(cm(np.diag([3, 4, 5]))) == (1.0, 1.0)
    assert oa_kappa(cm([[25, 25], [25, 25]])) == (0.5, 0.0)


def test_oa_kappa_errors():
    with pytest.raises(ValidationError, match="empty"):
        oa_kappa(cm(np.zeros((2, 2), dtype=int)))
    with pytest.raises(ValidationError, match="degenerate marginals"):
        oa_kappa(cm([[10, 0], [0, 0]]))
    with pytest.raises(ValidationError):
        cm([[1, -1], [0, 1]])
    with pytest.raises(ValidationError):
        ConfusionMatrix(np.zeros((2, 3)), ("a", "b"))


def test_kappa_bounds_on_random_matrices():
    rng = np.random.default_rng(0)
    done = 0
    while done < 1000:
        k = int(rng.integers(2, 6))
        counts = rng.integers(0, 50, size=(k, k)) * (rng.random((k, k)) < 0.7)
        if counts.sum() == 0:
            continue
        try:
            oa, kappa = oa_kappa(cm(counts))
        except ValidationError:
            continue
        assert -1.0 <= kappa <= 1.0 and 0.0 <= oa <= 1.0
        ref_oa, ref_kappa = kappa_brute(counts)
        assert oa == pytest.approx(ref_oa, abs=1e-12) and kappa == pytest.approx(ref_kappa, abs=1e-12)
        done += 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("xyz"), st.sampled_from("xyz")), min_size=1, max_size=60))
def test_oa_matches_raw_label_streams(pairs):
    truth, pred = zip(*pairs)
    m = ConfusionMatrix.from_labels(truth, pred, ("x", "y", "z"))
    assert m.total == len(pairs)
    direct = sum(t == p for t, p in pairs) / len(pairs)
    try:
        oa, _ = oa_kappa(m)
    except ValidationError:
        return
    assert oa == direct


def test_per_class_precision_recall():
    m = cm([[40, 10], [5, 45]])
    pc = m.per_class()
    assert pc["c0"] == {"precision": 40 / 45, "recall": 40 / 50}
    assert m.to_dict() == {"class_vocabulary": ["c0", "c1"], "counts": [[40, 10], [5, 45]]}
