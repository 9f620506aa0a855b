import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s4m.metrics.caption import bleu, bleu_all, cider, corpus_rouge_l, lcs_length, rouge_l
from s4m.metrics.report import evaluate_reports
from s4m.metrics.probe import auc_scores

from oracles import bleu_oracle, cider_oracle, lcs_oracle, rouge_l_oracle

WORDS = list("abcdef")


def random_case(rng, n_items=None):
    n_items = n_items or rng.randint(1, 4)
    cands, refs = [], []
    for _ in range(n_items):
        cands.append([rng.choice(WORDS) for _ in range(rng.randint(1, 9))])
        refs.append([[rng.choice(WORDS) for _ in range(rng.randint(1, 9))] for _ in range(rng.randint(1, 3))])
    return cands, refs


@pytest.mark.parametrize("seed", range(25))
def test_bleu_matches_oracle(seed):
    cands, refs = random_case(random.Random(seed))
    expected = bleu_oracle(cands, refs, 4)
    got = bleu_all(cands, refs, 4)
    assert got == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("seed", range(25))
def test_cider_matches_oracle(seed):
    cands, refs = random_case(random.Random(100 + seed), n_items=random.Random(seed).randint(2, 4))
    assert cider(cands, refs) == pytest.approx(cider_oracle(cands, refs), abs=1e-6)


@pytest.mark.parametrize("seed", range(25))
def test_rouge_matches_oracle(seed):
    rng = random.Random(200 + seed)
    cands, refs = random_case(rng)
    for c, g in zip(cands, refs):
        assert rouge_l(c, g) == pytest.approx(rouge_l_oracle(c, g), abs=1e-6)
        for r in g:
            assert lcs_length(c, r) == lcs_oracle(c, r)


def test_bleu_identity_and_disjoint():
    refs = [["the heart is normal in size ."], ["no acute fracture ."]]
    cands = ["the heart is normal in size .", "no acute fracture ."]
    assert bleu_all(cands, refs, 4) == pytest.approx([1.0] * 4)
    assert bleu(["x y z w"], [["a b c d"]], 1) == 0.0


def test_bleu_empty_candidates():
    with pytest.raises(ValueError, match="empty candidate set"):
        bleu([], [], 4)


def test_bleu_brevity_penalty_hand_value():
    # 2 of 2 unigrams match, reference has 4 tokens: BP = exp(1 - 4/2)
    assert bleu(["a b"], [["a b c d"]], 1) == pytest.approx(math.exp(-1.0))


def test_rouge_hand_example():
    # LCS("a b c", "a c") = 2; P = 2/3 over the candidate, R = 2/2 over the reference
    p, r = 2 / 3, 1.0
    expected = (1 + 1.2) * p * r / (r + 1.2 * p)
    assert rouge_l("a b c", ["a c"]) == pytest.approx(expected)
    assert rouge_l("a b", ["a b"]) == 1.0
    assert rouge_l("a b", ["c d"]) == 0.0


def test_cider_two_doc_self_similarity():
    refs = [["the heart is normal ."], ["there is a small effusion ."]]
    cands = ["the heart is normal .", "there is a small effusion ."]
    assert cider(cands, refs) == pytest.approx(cider_oracle([c.split() for c in cands],
                                                            [[r.split() for r in g] for g in refs]))


def test_cider_disjoint_is_zero():
    assert cider(["x y", "z w"], [["a b c"], ["a d e"]]) == 0.0


def test_cider_duplication_invariance():
    rng = random.Random(5)
    refs = [[[rng.choice(WORDS) for _ in range(6)]] for _ in range(4)]
    # candidates reuse reference text so every candidate n-gram has a document frequency
    cands = [refs[(i + 1) % 4][0][:5] for i in range(4)]
    once = cider(cands, refs)
    twice = cider(cands + cands, refs + refs)
    assert twice == pytest.approx(once, abs=1e-9)
    assert twice == pytest.approx(cider_oracle(cands + cands, refs + refs), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_corpus_metrics_order_invariant(rnd):
    cands, refs = random_case(rnd, n_items=3)
    perm = list(range(3))
    rnd.shuffle(perm)
    pc, pr = [cands[i] for i in perm], [list(reversed(refs[i])) for i in perm]
    assert bleu_all(pc, pr) == pytest.approx(bleu_all(cands, refs), abs=1e-12)
    assert cider(pc, pr) == pytest.approx(cider(cands, refs), abs=1e-9)
    assert corpus_rouge_l(pc, pr) == pytest.approx(corpus_rouge_l(cands, refs), abs=1e-12)


def test_eval_report_identity_and_missing_region(caplog):
    hyps = ["the heart is normal .", "there is no fracture .", "the knee joint is preserved ."]
    refs = [[h] for h in hyps]
    report = evaluate_reports(hyps, refs, ["chest", "wrist", "knee"])
    for name in ("chest", "wrist", "knee"):
        assert report.regions[name]["B4"] == pytest.approx(1.0)
    assert report.average["B4"] == pytest.approx(1.0)
    assert report.regions["hip"] is None
    table = report.to_table().splitlines()
    assert len(table) == 2 + 6 + 1
    assert table[-1].startswith("Ave")
    assert "no hypotheses for region" in caplog.text


def test_auc_invariant_to_monotone_transform():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=(200, 3))
    scores = rng.standard_normal((200, 3)) + labels
    a = auc_scores(labels, scores)
    b = auc_scores(labels, np.exp(3 * scores) - 7)
    assert a == b
