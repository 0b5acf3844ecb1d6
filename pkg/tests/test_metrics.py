import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from blrmoe.metrics import edit_distance, token_error_rate

seqs = st.lists(st.integers(1, 4), max_size=8)


def test_edit_distance_examples():
    assert edit_distance([1, 2, 3], [1, 2, 3]) == (0, 0, 0)
    assert edit_distance([1, 2, 3], [1, 3]) == (0, 1, 0)
    assert edit_distance([], [1, 2]) == (0, 0, 2)


def test_edit_distance_prefers_substitutions_on_ties():
    # [a,b] vs [b,c]: two substitutions or delete-a/insert-c pairs both cost 2
    assert edit_distance([1, 2], [2, 3]) == (2, 0, 0)


def _levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@given(seqs, seqs)
def test_edit_distance_properties(hyp, ref):
    s, i, d = edit_distance(hyp, ref)
    assert s + i + d == _levenshtein(hyp, ref)
    assert len(hyp) - len(ref) == i - d
    s2, i2, d2 = edit_distance(ref, hyp)
    assert s2 + i2 + d2 == s + i + d
    assert (i2, d2) == (d, i)
    assert s + i + d <= len(hyp) + len(ref)
    assert edit_distance(hyp, hyp) == (0, 0, 0)


def test_token_error_rate_basic():
    langs = ("zh", "en")
    rep = token_error_rate([([1, 2], [1, 2], "zh")], langs)
    assert rep.ter["zh"] == 0.0 and math.isnan(rep.ter["en"])
    rep = token_error_rate([([1, 9, 3, 4], [1, 2, 3, 4], "en")], langs)
    assert rep.ter["en"] == 0.25


def test_micro_and_macro_aggregation():
    pairs = [([1], [1, 2], "zh"), ([1, 2, 3], [1, 2, 3], "zh"), ([5, 6], [4, 5, 6, 7], "en")]
    rep = token_error_rate(pairs, ("zh", "en"), routed=[(0, 0), (1, 0), (1, 1)])
    total_err = sum(sum(edit_distance(h, r)) for h, r, _ in pairs)
    total_ref = sum(len(r) for _, r, _ in pairs)
    assert rep.ter_micro == pytest.approx(total_err / total_ref)
    assert rep.ter_macro == pytest.approx((1 / 5 + 2 / 4) / 2)
    assert rep.router_acc == {"zh": 0.5, "en": 1.0}
    assert rep.router_acc_avg == pytest.approx(2 / 3)
    assert "Avg" in rep.table()
    assert rep.to_dict()["ter"]["en"] == 0.5


def test_empty_reference_set_raises():
    with pytest.raises(ValueError):
        token_error_rate([], ("zh",))
