"""Deliberately naive reference implementations used only by the tests.

They share no code with the package: plain loops, explicit enumeration,
dense vectors.
"""
import itertools
import math


def ngram_list(tokens, n):
    out = []
    for i in range(len(tokens) - n + 1):
        out.append(tuple(tokens[i:i + n]))
    return out


def count_of(item, items):
    c = 0
    for x in items:
        if x == item:
            c += 1
    return c


def bleu_oracle(cands, refs, max_n):
    """Papineni corpus BLEU by explicit counting; returns [BLEU-1..max_n]."""
    clipped = [0] * max_n
    totals = [0] * max_n
    c_len = 0
    r_len = 0
    for cand, group in zip(cands, refs):
        c_len += len(cand)
        best = None
        for r in group:
            key = (abs(len(r) - len(cand)), len(r))
            if best is None or key < best:
                best = key
        r_len += best[1]
        for n in range(1, max_n + 1):
            grams = ngram_list(cand, n)
            totals[n - 1] += len(grams)
            seen = []
            for g in grams:
                if g in seen:
                    continue
                seen.append(g)
                max_ref = 0
                for r in group:
                    max_ref = max(max_ref, count_of(g, ngram_list(r, n)))
                clipped[n - 1] += min(count_of(g, grams), max_ref)
    out = []
    for n in range(1, max_n + 1):
        if c_len == 0 or any(clipped[k] == 0 for k in range(n)):
            out.append(0.0)
            continue
        bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
        logs = [math.log(clipped[k] / totals[k]) for k in range(n)]
        out.append(bp * math.exp(sum(logs) / n))
    return out


def cider_oracle(cands, refs, max_n=4):
    """Plain CIDEr with dense TF-IDF vectors over the full n-gram vocabulary."""
    n_docs = len(refs)
    score = 0.0
    for cand, group in zip(cands, refs):
        per_ref = []
        for r in group:
            sims = []
            for n in range(1, max_n + 1):
                vocab = sorted(set(ngram_list(cand, n)) | set(ngram_list(r, n)))
                def weight(g):
                    df = 0
                    for grp in refs:
                        if any(g in ngram_list(x, n) for x in grp):
                            df += 1
                    return math.log(n_docs) - math.log(max(1, df))
                vc = [count_of(g, ngram_list(cand, n)) * weight(g) for g in vocab]
                vr = [count_of(g, ngram_list(r, n)) * weight(g) for g in vocab]
                dot = sum(a * b for a, b in zip(vc, vr))
                nc = math.sqrt(sum(a * a for a in vc))
                nr = math.sqrt(sum(b * b for b in vr))
                sims.append(dot / (nc * nr) if nc > 0 and nr > 0 else dot)
            per_ref.append(sum(sims) / max_n)
        score += 10.0 * sum(per_ref) / len(per_ref)
    return score / len(cands)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_oracle(a, b):
    """Longest common subsequence by enumerating subsets of the shorter list."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subsequence([short[i] for i in idx], long_):
                return size
    return 0


def rouge_l_oracle(cand, refs, beta2=1.2):
    best = 0.0
    for r in refs:
        lcs = lcs_oracle(cand, r)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        rec = lcs / len(r)
        best = max(best, (1 + beta2) * p * rec / (rec + beta2 * p))
    return best


def nll_oracle(logits, targets, mask):
    """Mean -log softmax over unmasked positions, by scalar loops."""
    total = 0.0
    count = 0
    for b in range(len(logits)):
        for t in range(len(logits[b])):
            if not mask[b][t]:
                continue
            row = logits[b][t]
            m = max(row)
            lse = m + math.log(sum(math.exp(v - m) for v in row))
            total += lse - row[targets[b][t]]
            count += 1
    return total / count


def info_nce_oracle(img, txt, tau):
    """Symmetric InfoNCE by scalar loops."""
    n = len(img)
    sim = [[sum(a * b for a, b in zip(img[i], txt[j])) / tau for j in range(n)] for i in range(n)]
    def ce_rows(mat):
        tot = 0.0
        for i in range(n):
            m = max(mat[i])
            lse = m + math.log(sum(math.exp(v - m) for v in mat[i]))
            tot += lse - mat[i][i]
        return tot / n
    cols = [[sim[j][i] for j in range(n)] for i in range(n)]
    return 0.5 * (ce_rows(sim) + ce_rows(cols))
