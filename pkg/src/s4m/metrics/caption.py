"""Corpus BLEU, CIDEr and ROUGE-L computed from n-gram counts.

Inputs may be raw strings (tokenized with the report normalizer) or
pre-tokenized word lists.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence, Union

from ..tokenizer import normalize

Text = Union[str, Sequence[str]]


def _tokens(text: Text) -> list[str]:
    return normalize(text) if isinstance(text, str) else list(text)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _prepare(cands: Sequence[Text], refs: Sequence[Sequence[Text]]):
    if len(cands) == 0:
        raise ValueError("empty candidate set")
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates but {len(refs)} reference groups")
    c_toks = [_tokens(c) for c in cands]
    r_toks = []
    for group in refs:
        if isinstance(group, str):
            group = [group]
        if len(group) == 0:
            raise ValueError("candidate without references")
        r_toks.append([_tokens(r) for r in group])
    return c_toks, r_toks


def bleu_all(cands: Sequence[Text], refs: Sequence[Sequence[Text]], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..``max_n`` with the standard brevity penalty, no smoothing."""
    c_toks, r_toks = _prepare(cands, refs)
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, group in zip(c_toks, r_toks):
        cand_len += len(cand)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in group)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in group:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)

    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def bleu(cands: Sequence[Text], refs: Sequence[Sequence[Text]], n: int = 4) -> float:
    return bleu_all(cands, refs, max_n=n)[n - 1]


def cider(cands: Sequence[Text], refs: Sequence[Sequence[Text]], max_n: int = 4) -> float:
    """Plain CIDEr (no Gaussian length penalty, no count clipping), scaled by 10.

    Document frequencies come from the reference groups; an n-gram that
    never occurs in any reference gets a document frequency of one.
    """
    c_toks, r_toks = _prepare(cands, refs)
    n_docs = len(r_toks)
    doc_freq: Counter = Counter()
    for group in r_toks:
        seen = set()
        for r in group:
            for n in range(1, max_n + 1):
                seen.update(ngrams(r, n))
        doc_freq.update(seen)
    log_docs = math.log(float(n_docs))

    def tfidf(tokens):
        vecs, norms = [], []
        for n in range(1, max_n + 1):
            vec = {g: c * (log_docs - math.log(max(1.0, doc_freq[g]))) for g, c in ngrams(tokens, n).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    total = 0.0
    for cand, group in zip(c_toks, r_toks):
        c_vecs, c_norms = tfidf(cand)
        acc = 0.0
        for r in group:
            r_vecs, r_norms = tfidf(r)
            for n in range(max_n):
                dot = sum(v * r_vecs[n].get(g, 0.0) for g, v in c_vecs[n].items())
                if c_norms[n] != 0 and r_norms[n] != 0:
                    dot /= c_norms[n] * r_norms[n]
                acc += dot / max_n
        total += 10.0 * acc / len(group)
    return total / len(c_toks)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand: Text, refs: Sequence[Text] | Text, beta2: float = 1.2) -> float:
    """LCS F-measure; precision over the candidate, recall over the reference.

    With several references the best per-reference F wins.
    """
    c = _tokens(cand)
    if isinstance(refs, str):
        refs = [refs]
    best = 0.0
    for ref in refs:
        r = _tokens(ref)
        lcs = lcs_length(c, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(c), lcs / len(r)
        best = max(best, (1 + beta2) * p * rec / (rec + beta2 * p))
    return best


def corpus_rouge_l(cands: Sequence[Text], refs: Sequence[Sequence[Text]], beta2: float = 1.2) -> float:
    c_toks, r_toks = _prepare(cands, refs)
    return sum(rouge_l(c, g, beta2) for c, g in zip(c_toks, r_toks)) / len(c_toks)
