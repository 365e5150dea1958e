import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handslt.errors import ValidationError
from handslt.metrics import (
    CorpusPair,
    bleu,
    diff_gallery_html,
    highlight_diff,
    lcs_length,
    rouge_l,
    rouge_l_pair,
    score_report,
)
from oracles import bleu_oracle, lcs_oracle, random_corpus, rouge_oracle


def corpus(hyps, refs):
    return CorpusPair.from_texts(hyps, refs)


def test_identical_corpus_scores_100():
    c = corpus(["a b c d e", "x y z w"], ["a b c d e", "x y z w"])
    for n in range(1, 5):
        assert bleu(c, n) == pytest.approx(100.0)
    assert rouge_l(c) == pytest.approx(100.0)


def test_bleu1_hand_example():
    assert bleu(corpus(["a b c"], ["a b d"]), 1) == pytest.approx(66.67, abs=0.01)


def test_rouge_hand_example():
    assert lcs_length("a b c".split(), "a c b".split()) == 2
    assert rouge_l(corpus(["a b c"], ["a c b"])) == pytest.approx(66.67, abs=0.01)


def test_rouge_edge_cases():
    assert rouge_l(corpus(["a b"], ["c d"])) == 0.0
    assert rouge_l_pair([], ["a"]) == 0.0


def test_brevity_penalty():
    # hypothesis shorter than reference: BP = exp(1 - 4/2)
    assert bleu(corpus(["a b"], ["a b c d"]), 1) == pytest.approx(100 * 2.718281828459045 ** (-1), rel=1e-12)


def test_clipping():
    assert bleu(corpus(["the the the the"], ["the cat"]), 1) == pytest.approx(100 * 1 / 4, rel=1e-12)


def test_empty_corpus():
    with pytest.raises(ValidationError):
        bleu(CorpusPair([], []))
    with pytest.raises(ValidationError):
        rouge_l(CorpusPair([], []))
    with pytest.raises(ValidationError):
        CorpusPair([["a"]], [])


def test_report_columns():
    report = score_report(["a b c d"], ["a b c d"])
    assert list(report) == ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "num_samples"]


def test_agreement_with_brute_force_on_200_corpora():
    rng = random.Random(1234)
    for _ in range(200):
        hyps, refs = random_corpus(rng)
        c = CorpusPair(hyps, refs)
        for n in range(1, 5):
            assert abs(bleu(c, n) - bleu_oracle(hyps, refs, n)) < 1e-9
        assert abs(rouge_l(c) - rouge_oracle(hyps, refs)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(
    pairs=st.lists(
        st.tuples(st.lists(st.sampled_from("abc"), max_size=7), st.lists(st.sampled_from("abc"), min_size=1, max_size=7)),
        min_size=1,
        max_size=5,
    )
)
def test_metric_bounds_and_lcs(pairs):
    hyps = [h for h, _ in pairs]
    refs = [r for _, r in pairs]
    c = CorpusPair(hyps, refs)
    for n in range(1, 5):
        assert 0.0 <= bleu(c, n) <= 100.0 + 1e-9
    assert 0.0 <= rouge_l(c) <= 100.0 + 1e-9
    for h, r in pairs:
        assert lcs_length(h, r) == lcs_oracle(h, r)


def test_higher_order_can_exceed_lower_order():
    # clipped corpus precisions need not decrease with n, so neither does BLEU-n
    c = CorpusPair([["a"], ["a", "a"]], [["b"], ["a", "a"]])
    assert bleu(c, 1) == pytest.approx(100 * 2 / 3)
    assert bleu(c, 2) == pytest.approx(100 * (2 / 3) ** 0.5)
    assert bleu(c, 2) > bleu(c, 1)


@settings(max_examples=60, deadline=None)
@given(sent=st.lists(st.sampled_from("abcdefgh"), min_size=4, max_size=9, unique=True), extra=st.integers(0, 3))
def test_bleu_monotone_for_distinct_token_hypotheses(sent, extra):
    # with no repeated tokens every matched n-gram implies matched (n-1)-grams
    hyp = sent
    ref = sent[extra:] if extra < len(sent) else sent
    scores = [bleu(CorpusPair([hyp], [ref]), n) for n in range(1, 5)]
    assert all(x >= y - 1e-9 for x, y in zip(scores, scores[1:]))


# -- highlighting -------------------------------------------------------------


def test_highlight_examples():
    same = highlight_diff("a b c".split(), "a b c".split())
    assert all(same.marked)
    assert not any(highlight_diff("x y".split(), "a b".split()).marked)
    hl = highlight_diff("x a b y".split(), "a b".split())
    assert hl.runs() == [["a", "b"]]
    assert hl.to_text() == "x [a b] y"
    assert hl.to_html() == 'x <span class="match">a b</span> y'


@settings(max_examples=80, deadline=None)
@given(hyp=st.lists(st.sampled_from("abcd"), max_size=8), ref=st.lists(st.sampled_from("abcd"), max_size=8))
def test_highlight_runs_are_reference_substrings(hyp, ref):
    for run in highlight_diff(hyp, ref).runs():
        assert any(ref[i : i + len(run)] == run for i in range(len(ref) - len(run) + 1))


def test_gallery_escapes_html():
    page = diff_gallery_html([{"sample_id": "s<1>", "hypothesis": "a <b>", "reference": "a <b>"}])
    assert "s&lt;1&gt;" in page and "<b>" not in page.replace("<body>", "")


def test_adjacent_runs_render_separately():
    hl = highlight_diff(["a", "a"], ["a"])
    assert hl.runs() == [["a"], ["a"]]
    assert hl.to_text() == "[a] [a]"
