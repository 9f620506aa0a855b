import itertools
import math

import pytest
import torch

from s4m.generator import beam_ids, beam_search, generate_batch, generate_greedy, greedy_ids
from s4m.knowledge import RegionTag, load_knowledge
from s4m.model import ModelConfig, S4M, build_model, strip_ipg
from s4m.tokenizer import BOS, EOS, build_vocab

KB = load_knowledge()
VOCAB = build_vocab(["the heart is normal . no acute fracture seen"], 1)


def tiny(seed=0, **kw):
    opts = dict(vocab_size=len(VOCAB), d=8, heads=2, decoder_layers=1, agg_layers=1, text_layers=1, d_ff=16,
                dropout=0.0, max_len=12, image_size=64, encoder_channels=(2, 2, 4, 4), shared_dim=8)
    opts.update(kw)
    return build_model(ModelConfig(**opts), KB, seed=seed)


def images(b, seed=0):
    return torch.randn(b, 2, 1, 64, 64, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(seed):
    model = tiny(seed)
    x = images(1, seed)
    assert beam_ids(model, x, RegionTag.CHEST, 1) == greedy_ids(model, x, [RegionTag.CHEST])[0]


def test_greedy_batch_matches_single():
    model = tiny(3)
    x = images(4, 3)
    tags = [RegionTag.CHEST, RegionTag.KNEE, RegionTag.HIP, RegionTag.CHEST]
    batch = generate_batch(model, VOCAB, x, tags)
    single = [generate_greedy(model, VOCAB, x[i], tags[i]) for i in range(4)]
    assert batch == single


def test_greedy_length_bound():
    model = tiny(1)
    for max_len in (2, 3, 5, 12):
        ids = greedy_ids(model, images(2), [RegionTag.CHEST] * 2, max_len)
        for seq in ids:
            assert seq[0] == BOS and seq[-1] == EOS and len(seq) <= max_len
    assert generate_greedy(model, VOCAB, images(1)[0], RegionTag.CHEST, max_len=2) == ""


def test_generation_ignores_ipg_heads():
    model = tiny(2)
    plain = S4M(ModelConfig(**{**model.config.to_dict(), "ipg": False}), KB)
    plain.load_state_dict(strip_ipg(model.state_dict()))
    x = images(3, 5)
    tags = [RegionTag.WRIST] * 3
    assert greedy_ids(model, x, tags) == greedy_ids(plain, x, tags)
    assert beam_ids(model, x[:1], RegionTag.WRIST, 3) == beam_ids(plain, x[:1], RegionTag.WRIST, 3)


# -- beam search on a toy next-token table ---------------------------------------

def toy_model(table):
    """Log-probs depend only on the last token."""
    logp = torch.log_softmax(torch.tensor(table, dtype=torch.float64), dim=-1)

    def step(prefixes):
        return torch.stack([logp[p[-1]] for p in prefixes])

    return step, logp


def exhaustive_best(logp, max_len, alpha):
    vocab = logp.shape[0]
    best = None
    for t in range(0, max_len - 1):
        for body in itertools.product([v for v in range(vocab) if v != EOS], repeat=t):
            seq = [BOS, *body, EOS]
            # a hypothesis that runs out of room is closed without paying for EOS
            scored = seq if t < max_len - 2 else seq[:-1]
            lp = sum(logp[a, b].item() for a, b in zip(scored, scored[1:]))
            score = lp / ((5 + len(seq) - 1) / 6) ** alpha
            if best is None or score > best[0] + 1e-12:
                best = (score, seq)
    return best[1]


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("alpha", [0.0, 0.7])
def test_wide_beam_finds_exhaustive_optimum(seed, alpha):
    gen = torch.Generator().manual_seed(seed)
    table = (torch.randn(4, 4, generator=gen) * 2).tolist()
    step, logp = toy_model(table)
    max_len = 6
    # wide enough to hold every candidate, finished ones included
    got = beam_search(step, beam_size=4 ** (max_len - 1), max_len=max_len, length_penalty=alpha)
    assert got == exhaustive_best(logp, max_len, alpha)


def test_beam_beats_greedy_trap():
    # greedy takes token 3 (p=.6) whose continuation is flat; token 4 (p=.4) leads to EOS surely
    probs = [[1e-9] * 5 for _ in range(5)]
    probs[BOS] = [1e-9, 1e-9, 1e-9, 0.6, 0.4]
    probs[3] = [1e-9, 1e-9, 0.3, 0.35, 0.35]
    probs[4] = [1e-9, 1e-9, 1.0, 1e-9, 1e-9]
    step, _ = toy_model([[math.log(p) for p in row] for row in probs])
    assert beam_search(step, 1, 6)[:2] == [BOS, 3]
    assert beam_search(step, 2, 6) == [BOS, 4, EOS]


def test_beam_respects_max_len():
    step, _ = toy_model([[0.0, 0.0, -50.0, 0.0]] * 4)
    for max_len in (2, 3, 7):
        seq = beam_search(step, 3, max_len)
        assert len(seq) <= max_len and seq[-1] == EOS


def test_beam_argument_checks():
    step, _ = toy_model([[0.0] * 4] * 4)
    with pytest.raises(ValueError):
        beam_search(step, 0, 5)
    with pytest.raises(ValueError):
        beam_search(step, 2, 1)
