import pytest
from hypothesis import given, strategies as st

from msra.metrics import aggregate, edit_distance, format_table, match_sets, ned


@pytest.mark.parametrize("a, b, d", [("579", "579", 0), ("579", "59", 1), ("", "abc", 3), ("kitten", "sitting", 3)])
def test_edit_distance(a, b, d):
    assert edit_distance(a, b) == d
    assert edit_distance(b, a) == d


def test_edit_distance_on_tuples():
    assert edit_distance((1, 2, 3), (1, 3)) == 1


def test_ned():
    assert ned("12", "13") == 0.5
    with pytest.raises(ValueError):
        ned("", "1")


class TestMatchSets:
    def test_unordered_equality(self):
        r = match_sets(["12", "579"], ["579", "12"])
        assert [p[2] for p in r.pairs] == [0.0, 0.0]
        assert r.n_exact == 2 and r.image_exact

    def test_missing_prediction(self):
        r = match_sets(["12"], ["12", "579"])
        assert r.mean_ned == 0.5
        assert r.n_exact == 1 and not r.image_exact
        assert r.pairs[1][1] is None

    def test_substitution(self):
        r = match_sets(["13", "579"], ["12", "579"])
        assert sorted(p[2] for p in r.pairs) == [0.0, 0.5]
        assert r.mean_ned == 0.25 and r.n_exact == 1

    def test_extra_prediction_only_hurts_image(self):
        r = match_sets(["12", "579", "4"], ["12", "579"])
        assert r.mean_ned == 0.0 and r.n_exact == 2 and not r.image_exact

    def test_unmatched_cheaper_than_bad_match(self):
        # "999999" vs "1" costs 6, so the ground truth stays unmatched at 1.0
        r = match_sets(["999999"], ["1"])
        assert r.pairs == [(0, None, 1.0)]

    def test_duplicates_are_multisets(self):
        assert match_sets(["1", "1"], ["1", "1"]).image_exact
        assert not match_sets(["1"], ["1", "1"]).image_exact

    def test_empty_ground_truth(self):
        with pytest.raises(ValueError):
            match_sets(["1"], [])


def test_aggregate_example():
    m = aggregate([match_sets(["12"], ["12", "579"])])
    assert (m["NED"], m["SA"], m["IA"]) == (50.0, 50.0, 0.0)


def test_aggregate_perfect():
    m = aggregate([match_sets(["1", "2"], ["2", "1"]), match_sets(["33"], ["33"])])
    assert (m["NED"], m["SA"], m["IA"]) == (0.0, 100.0, 100.0)
    assert m["images"] == 2 and m["sequences"] == 3


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_format_table():
    text = format_table({"NED": 50.0, "SA": 50.0, "IA": 0.0, "images": 1, "sequences": 2})
    assert "NED%" in text.splitlines()[0]
    assert "50.00" in text.splitlines()[1]


words = st.lists(st.text("0123", min_size=1, max_size=5), min_size=1, max_size=4)


@given(words, words, st.randoms(use_true_random=False))
def test_permutation_symmetry(pred, gt, rnd):
    r = match_sets(pred, gt)
    p2, g2 = pred[:], gt[:]
    rnd.shuffle(p2)
    rnd.shuffle(g2)
    r2 = match_sets(p2, g2)
    assert r.total_ned == pytest.approx(r2.total_ned)
    assert r.n_exact == r2.n_exact and r.image_exact == r2.image_exact


@given(words)
def test_perfect_prediction(gt):
    r = match_sets(gt, gt)
    assert r.total_ned == 0 and r.n_exact == len(gt) and r.image_exact
