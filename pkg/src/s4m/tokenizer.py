"""Word-level report vocabulary.

Reports are lowercased, punctuation is dropped except sentence periods
(which become their own ``.`` token), and the result is split on
whitespace. The same normalization is reused by the caption metrics so
hypotheses and references are always tokenized identically.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

# a period that ends a sentence: followed by whitespace or end of text
_SENTENCE_PERIOD = re.compile(r"\.(?=\s|$)")
# anything that is not a word char, hyphen, period or whitespace
_PUNCT = re.compile(r"[^\w\s.\-]")


def normalize(text: str) -> list[str]:
    """Split a report into normalized word tokens."""
    text = text.lower()
    text = _PUNCT.sub(" ", text)
    text = _SENTENCE_PERIOD.sub(" . ", text)
    tokens = []
    for tok in text.split():
        # stray hyphens / periods left over after stripping
        tok = tok.strip("-")
        if tok == "." or (tok and tok.strip(".")):
            tokens.append(tok)
    return tokens


@dataclass(frozen=True)
class Vocab:
    """Immutable token <-> id mapping. ``tokens[i]`` is the word with id ``i``."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the four special tokens")
        mapping = {tok: i for i, tok in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise ValueError("duplicate token in vocab")
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def id_to_token(self) -> dict[int, str]:
        return dict(enumerate(self.tokens))

    @property
    def specials(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.token_to_id

    def to_json(self) -> str:
        return json.dumps({"specials": self.specials, "tokens": list(self.tokens)}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        data = json.loads(text)
        if data.get("specials") != {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}:
            raise ValueError("vocab file has unexpected special tokens")
        return cls(tuple(data["tokens"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Iterable[str], min_freq: int = 3) -> Vocab:
    """Build a vocabulary from report strings.

    Words are ordered by descending frequency, ties broken lexicographically,
    after the four special tokens.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    n_docs = 0
    for report in corpus:
        n_docs += 1
        counts.update(normalize(report))
    if n_docs == 0:
        raise ValueError("empty corpus")
    words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocab(SPECIAL_TOKENS + tuple(words))


def encode(vocab: Vocab, text: str, max_len: int = 60) -> list[int]:
    """Encode ``text`` as ``[BOS, ..., EOS]`` with at most ``max_len`` ids."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    lookup = vocab.token_to_id
    ids = [lookup.get(tok, UNK) for tok in normalize(text)]
    return [BOS] + ids[: max_len - 2] + [EOS]


def decode(vocab: Vocab, seq: Sequence[int]) -> str:
    words = []
    n = len(vocab.tokens)
    for i in seq:
        i = int(i)
        if not 0 <= i < n:
            raise ValueError(f"unknown token id {i}")
        if i >= len(SPECIAL_TOKENS):
            words.append(vocab.tokens[i])
    return " ".join(words)
