"""Autoregressive report generation (greedy and beam search).

Only the encoder, knowledge aggregation and decoder take part; the
alignment heads are never touched, so a checkpoint stripped of them
generates exactly the same tokens.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import images_to_tensor
from .model import S4M
from .tokenizer import BOS, EOS, Vocab, decode


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 5 else images.unsqueeze(0)
    arr = np.asarray(images)
    tensor = images_to_tensor(arr)
    return tensor if tensor.dim() == 5 else tensor.unsqueeze(0)


@torch.no_grad()
def greedy_ids(model: S4M, images: torch.Tensor, tags: Sequence, max_len: int | None = None) -> list[list[int]]:
    """Greedy token ids (BOS ... EOS) for a batch; argmax ties go to the lowest id."""
    model.eval()
    max_len = min(max_len or model.config.max_len, model.config.max_len)
    images = images.to(model.decoder.pos.dtype)
    memory, memory_pad = model.memory(images, tags)
    b = images.shape[0]
    seqs = torch.full((b, 1), BOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    # leave room for the closing EOS
    while seqs.shape[1] < max_len - 1 and not done.all():
        logits = model.decode(memory, seqs, memory_pad)[:, -1]
        nxt = logits.argmax(dim=-1)  # first maximal index on ties
        nxt = torch.where(done, torch.full_like(nxt, EOS), nxt)
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        done |= nxt == EOS
    out = []
    for row in seqs.tolist():
        ids = row[: row.index(EOS) + 1] if EOS in row else row + [EOS]
        out.append(ids)
    return out


def generate_greedy(model: S4M, vocab: Vocab, images, tag, max_len: int | None = None) -> str:
    return decode(vocab, greedy_ids(model, _as_batch(images), [tag], max_len)[0])


def generate_batch(model: S4M, vocab: Vocab, images, tags: Sequence, max_len: int | None = None,
                   beam_size: int = 1, length_penalty: float = 0.0, chunk: int = 64) -> list[str]:
    """Reports for many examples; greedy when ``beam_size == 1``."""
    images = _as_batch(images)
    if beam_size == 1:
        out = []
        for start in range(0, len(tags), chunk):
            ids = greedy_ids(model, images[start:start + chunk], tags[start:start + chunk], max_len)
            out.extend(decode(vocab, s) for s in ids)
        return out
    return [generate_beam(model, vocab, images[i], tags[i], beam_size, max_len, length_penalty)
            for i in range(len(tags))]


def length_normalizer(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def beam_search(step_logprobs: Callable[[list[list[int]]], torch.Tensor], beam_size: int, max_len: int,
                length_penalty: float = 0.0, bos: int = BOS, eos: int = EOS) -> list[int]:
    """Beam search over any next-token model.

    ``step_logprobs`` maps a list of prefixes to an ``(n, V)`` tensor of
    next-token log-probabilities. Hypotheses are ranked by
    ``logP / ((5 + T) / 6) ** alpha`` where T counts generated tokens; a
    hypothesis that emits EOS competes with the live beams for the
    ``beam_size`` slots. Returns the best sequence including BOS and EOS.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    live: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[tuple[float, list[int]]] = []

    def score(logp: float, seq: list[int]) -> float:
        return logp / length_normalizer(len(seq) - 1, length_penalty)

    while live:
        if len(live[0][0]) >= max_len - 1:
            # out of room: close every live hypothesis as is
            for seq, logp in live:
                finished.append((score(logp, seq + [eos]), seq + [eos]))
            break
        logps = step_logprobs([seq for seq, _ in live])
        cands = []
        for (seq, logp), row in zip(live, logps.tolist()):
            for tok, lp in enumerate(row):
                if lp == -math.inf:
                    continue
                new_seq, new_logp = seq + [tok], logp + lp
                cands.append((-score(new_logp, new_seq), new_seq, new_logp))
        # best score first; ties resolved towards lower token ids lexicographically
        cands.sort(key=lambda c: (c[0], c[1]))
        live = []
        for neg, seq, logp in cands[:beam_size]:
            if seq[-1] == eos:
                finished.append((-neg, seq))
            else:
                live.append((seq, logp))
        finished.sort(key=lambda f: (-f[0], f[1]))
        finished = finished[:beam_size]
        if length_penalty == 0.0 and finished and live:
            # log-probs only shrink: no live beam can overtake the best finished one
            if finished[0][0] >= max(logp for _, logp in live):
                break
    return min(finished, key=lambda f: (-f[0], f[1]))[1]


@torch.no_grad()
def beam_ids(model: S4M, images: torch.Tensor, tag, beam_size: int, max_len: int | None = None,
             length_penalty: float = 0.0) -> list[int]:
    model.eval()
    max_len = min(max_len or model.config.max_len, model.config.max_len)
    images = images.to(model.decoder.pos.dtype)
    if images.dim() == 4:
        images = images.unsqueeze(0)
    memory, memory_pad = model.memory(images, [tag])

    def step(prefixes):
        n = len(prefixes)
        prefix = torch.tensor(prefixes, dtype=torch.long)
        mem = memory.expand(n, -1, -1)
        pad = memory_pad.expand(n, -1) if memory_pad is not None else None
        logits = model.decode(mem, prefix, pad)[:, -1]
        return torch.log_softmax(logits.double(), dim=-1)

    return beam_search(step, beam_size, max_len, length_penalty)


def generate_beam(model: S4M, vocab: Vocab, images, tag, beam_size: int = 3, max_len: int | None = None,
                  length_penalty: float = 0.0) -> str:
    return decode(vocab, beam_ids(model, _as_batch(images), tag, beam_size, max_len, length_penalty))
