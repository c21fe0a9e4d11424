import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import WORDS, random_bleu_cases, slow_bleu4

from viref.data import build_vocabulary
from viref.metrics import (
    RetrievalReport,
    bleu4,
    closest_ref_length,
    generation_report,
    read_table,
    retrieval_metrics,
    write_generation_table,
    write_retrieval_table,
    write_timing_table,
)

# ---------------------------------------------------------------------------
# BLEU


def test_identical_candidate_scores_one():
    s = "the red car parked near the van".split()
    assert bleu4(s, [s]) == 1.0


def test_no_shared_four_gram_scores_zero():
    assert bleu4("the red car parked".split(), ["the red car moving".split()]) == 0.0


def test_worked_brevity_example():
    got = bleu4("the red car parked".split(), ["the red car parked near".split()])
    assert got == pytest.approx(math.exp(1 - 5 / 4), abs=1e-12)
    assert round(got, 4) == 0.7788


def test_short_candidate_has_no_four_grams():
    assert bleu4(["the", "red", "car"], [["the", "red", "car"]]) == 0.0


def test_clipping_uses_the_best_single_reference():
    cand = ["the"] * 4
    # each reference has the word twice; clipping takes the max, not the sum
    assert bleu4(cand, [["the", "the", "red", "car"], ["car", "the", "the", "van"]]) == 0.0
    refs = [["the"] * 4 + ["car"]]
    assert bleu4(cand, refs) == pytest.approx(math.exp(1 - 5 / 4), abs=1e-12)


def test_closest_reference_length_ties_go_shorter():
    assert closest_ref_length(5, [3, 7]) == 3
    assert closest_ref_length(5, [7, 4, 6]) == 4


def test_bleu_input_errors():
    with pytest.raises(ValueError):
        bleu4([], [["a"]])
    with pytest.raises(ValueError):
        bleu4(["a"], [])


def test_bleu_matches_slow_oracle_on_random_bleu_cases():
    cases = random_bleu_cases(200)
    nonzero = 0
    for cand, refs in cases:
        got, want = bleu4(cand, refs), slow_bleu4(cand, refs)
        assert abs(got - want) < 1e-9
        nonzero += want > 0
    assert nonzero >= 20  # the comparison is not only over zeros


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.sampled_from(WORDS), min_size=4, max_size=10),
    st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=10), min_size=0, max_size=3),
)
def test_adding_the_candidate_as_a_reference_gives_one(cand, refs):
    assert bleu4(cand, refs + [cand]) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.sampled_from(WORDS), min_size=1, max_size=10),
    st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=10), min_size=1, max_size=4),
    st.randoms(use_true_random=False),
)
def test_bleu_reference_order_and_range(cand, refs, rnd):
    shuffled = list(refs)
    rnd.shuffle(shuffled)
    a = bleu4(cand, refs)
    assert a == bleu4(cand, shuffled)
    assert 0.0 <= a <= 1.0


# ---------------------------------------------------------------------------
# retrieval


def test_all_rank_one():
    r = retrieval_metrics([1, 1, 1])
    assert r.mean_ap == 1.0 and r.accuracy == {1: 1.0, 2: 1.0, 3: 1.0}


def test_ranks_one_two_four():
    r = retrieval_metrics([1, 2, 4])
    assert r.mean_ap == pytest.approx((1 + 1 / 2 + 1 / 4) / 3, abs=1e-15)
    assert r.accuracy == {1: 1 / 3, 2: 2 / 3, 3: 2 / 3}


def test_retrieval_matches_hand_counts_on_random_ranks():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ranks = [int(k) for k in rng.integers(1, 8, size=int(rng.integers(1, 15)))]
        r = retrieval_metrics(ranks)
        total = 0.0
        for k in ranks:
            total += 1.0 / k
        assert abs(r.mean_ap - total / len(ranks)) < 1e-12
        for k in (1, 2, 3):
            hits = 0
            for x in ranks:
                if x <= k:
                    hits += 1
            assert abs(r.accuracy[k] - hits / len(ranks)) < 1e-12
        r.check()
        assert (r.mean_ap == 1.0) == all(k == 1 for k in ranks)


def test_retrieval_errors():
    with pytest.raises(ValueError):
        retrieval_metrics([])
    with pytest.raises(ValueError):
        retrieval_metrics([1, 0])


@pytest.mark.parametrize(
    "row",
    [(0.55, 0.35, 0.61, 0.69), (0.46, 0.26, 0.49, 0.57), (0.65, 0.47, 0.69, 0.78)],
    ids=["VIREF-e", "VIREF-a", "VIREF"],
)
def test_published_rows_satisfy_report_invariants(row):
    mean_ap, r1, r2, r3 = row
    RetrievalReport(mean_ap, {1: r1, 2: r2, 3: r3}).check()


def test_check_rejects_inconsistent_reports():
    with pytest.raises(AssertionError):
        RetrievalReport(0.5, {1: 0.6, 2: 0.7, 3: 0.8}).check()
    with pytest.raises(AssertionError):
        RetrievalReport(0.9, {1: 0.6, 2: 0.5, 3: 0.8}).check()


# ---------------------------------------------------------------------------
# generation report


def test_generation_report_all_exact():
    refs = {"p0": [WORDS[:5]], "p1": [WORDS[2:7], WORDS[:4]]}
    gen = {"p0": WORDS[:5], "p1": WORDS[:4]}
    rep = generation_report(gen, refs)
    assert rep.average_bleu == 1.0


def test_distinct_word_count():
    vocab = build_vocabulary(["red car near van"] * 2)
    rep = generation_report({"p": "red car near van".split()}, {"p": [["red", "car"]]}, vocab)
    assert rep.distinct_words == 4


def test_reserved_tokens_are_not_counted_and_empty_output_scores_zero():
    rep = generation_report({"a": ["<unk>", "car"], "b": []}, {"a": [["car"]], "b": [["van"]]})
    assert rep.distinct_words == 1
    assert rep.per_item["b"] == 0.0


def test_generation_report_key_mismatch_lists_ids():
    with pytest.raises(KeyError, match="p9"):
        generation_report({"p0": ["a"]}, {"p0": [["a"]], "p9": [["b"]]})


def test_generation_average_matches_oracle():
    cases = random_bleu_cases(20, seed=9)
    gen = {f"p{i}": c for i, (c, _) in enumerate(cases)}
    refs = {f"p{i}": r for i, (_, r) in enumerate(cases)}
    want = sum(slow_bleu4(c, r) for c, r in cases) / 20
    assert abs(generation_report(gen, refs).average_bleu - want) < 1e-9


# ---------------------------------------------------------------------------
# tables


def test_tables_round_trip(tmp_path):
    gen = generation_report({"p": WORDS[:5]}, {"p": [WORDS[:5]]})
    ret = retrieval_metrics([1, 2, 4])
    write_generation_table(tmp_path / "g.tsv", {"VIREF": gen}, meteor={})
    write_retrieval_table(tmp_path / "r.tsv", {"VIREF": ret})
    write_timing_table(tmp_path / "t.tsv", {"VIREF": (1234, 0.5, 0.25)})
    g = read_table(tmp_path / "g.tsv")
    assert g == [{"Method": "VIREF", "Average BLEU-4 Score": "1.0000", "Average METEOR Score": "n/a", "# of words used in the output": "5"}]
    r = read_table(tmp_path / "r.tsv")[0]
    assert (r["mAP"], r["rank-1 accuracy"], r["rank-2 accuracy"], r["rank-3 accuracy"]) == ("0.5833", "0.3333", "0.6667", "0.6667")
    t = read_table(tmp_path / "t.tsv")[0]
    assert t["# of parameters"] == "1234" and t["Generation time (sec)"] == "0.5000"


def test_external_meteor_column_is_merged(tmp_path):
    gen = generation_report({"p": WORDS[:5]}, {"p": [WORDS[:5]]})
    write_generation_table(tmp_path / "g.tsv", {"VIREF": gen}, meteor={"VIREF": 0.3})
    assert read_table(tmp_path / "g.tsv")[0]["Average METEOR Score"] == "0.3000"
