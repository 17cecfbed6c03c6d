import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planktomae.evaluation import ConfusionMatrix, accuracy, aggregate_folds, confusion_matrix, write_results


class TestAccuracy:
    @pytest.mark.parametrize("pred,expected", [([0, 1, 2, 1], 1.0), ([1, 2, 0, 0], 0.0), ([0, 1, 2, 0], 0.75)])
    def test_examples(self, pred, expected):
        assert accuracy(pred, [0, 1, 2, 1]) == expected

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            accuracy([0, 1], [0])


class TestConfusion:
    def test_perfect_is_diagonal(self):
        cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))

    def test_hand_tally(self):
        labels = [0, 0, 0, 1, 1, 2, 2, 2, 2]
        preds = [0, 1, 1, 1, 2, 2, 0, 2, 2]
        expected = np.array([[1, 2, 0],
                             [0, 1, 1],
                             [1, 0, 3]])
        cm = confusion_matrix(preds, labels, 3)
        np.testing.assert_array_equal(cm.counts, expected)
        assert cm.accuracy == pytest.approx(5 / 9)
        np.testing.assert_allclose(cm.per_label_accuracy(), [1 / 3, 1 / 2, 3 / 4])

    def test_index_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 3], [0, 1], 3)

    def test_row_normalized_handles_empty_rows(self):
        cm = confusion_matrix([0, 0], [0, 0], 2)
        np.testing.assert_array_equal(cm.row_normalized(), [[100.0, 0.0], [0.0, 0.0]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6).flatmap(lambda k: st.tuples(
        st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=60))),
        st.integers(0, 2**31))
    def test_trace_permutation_and_merge(self, case, seed):
        k, pairs = case
        p, y = np.array(pairs).T
        cm = confusion_matrix(p, y, k)
        assert cm.total == len(p)
        assert cm.accuracy == pytest.approx(accuracy(p, y))
        perm = np.random.default_rng(seed).permutation(len(p))
        np.testing.assert_array_equal(confusion_matrix(p[perm], y[perm], k).counts, cm.counts)
        cut = len(p) // 2
        if 0 < cut < len(p):
            merged = confusion_matrix(p[:cut], y[:cut], k) + confusion_matrix(p[cut:], y[cut:], k)
            np.testing.assert_array_equal(merged.counts, cm.counts)

    def test_files(self, tmp_path):
        cm = ConfusionMatrix(np.array([[3, 1], [0, 4]]))
        cm.write_csv(tmp_path / "c.csv", ["a", "b"])
        assert (tmp_path / "c.csv").read_text() == "true\\pred,a,b\na,3,1\nb,0,4\n"
        cm.write_png(tmp_path / "c.png", ["a", "b"], title="fold 0")
        assert (tmp_path / "c.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        text = cm.to_text(["a", "b"]).splitlines()
        assert text[1].split() == ["a", "75.0", "25.0"]


class TestAggregate:
    def test_textbook(self):
        s = aggregate_folds([1, 2, 3])
        assert (s.mean, s.std) == (2.0, 1.0)

    def test_identical_folds(self):
        assert aggregate_folds([0.9] * 5).std == 0.0

    def test_single_fold_std_undefined(self):
        s = aggregate_folds([0.8])
        assert s.mean == 0.8 and s.std is None
        assert s.format() == "80.00 ± undefined"

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_folds([])

    def test_two_decimal_format(self):
        s = aggregate_folds([0.9916, 0.9929, 0.9942])
        assert s.format() == "99.29 ± 0.13"

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=10))
    def test_mean_within_range(self, values):
        s = aggregate_folds(values)
        assert min(values) - 1e-12 <= s.mean <= max(values) + 1e-12
        assert s.std == pytest.approx(np.std(values, ddof=1), abs=1e-12)


def test_results_file(tmp_path):
    rows = [(0, 0.05, 0.5), (1, 0.05, 0.75)]
    write_results(tmp_path / "r.csv", rows, aggregate_folds([0.5, 0.75]))
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[:3] == ["fold,subset_fraction,accuracy", "0,0.05,0.500000", "1,0.05,0.750000"]
    assert lines[3] == "# folds: 2"
    assert lines[-1] == "# summary: 62.50 ± 17.68"
