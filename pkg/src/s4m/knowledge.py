"""Radiology topic sets and their frozen embeddings.

The general topic set is the union of six per-region subsets. Selecting
topics for an example is an exact lookup on its region tag; the image
never enters into it.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class KnowledgeError(ValueError):
    pass


class RegionTag(str, enum.Enum):
    CHEST = "chest"
    ABDOMEN = "abdomen"
    KNEE = "knee"
    HIP = "hip"
    WRIST = "wrist"
    SHOULDER = "shoulder"

    @property
    def label(self) -> str:
        return f"{self.value} X-ray"

    @classmethod
    def parse(cls, value: "str | RegionTag") -> "RegionTag":
        if isinstance(value, RegionTag):
            return value
        key = str(value).strip().lower()
        if key.endswith(" x-ray"):
            key = key[: -len(" x-ray")]
        try:
            return cls(key)
        except ValueError:
            raise KnowledgeError(f"unknown region tag {value!r}") from None


REGIONS = tuple(RegionTag)


@dataclass(frozen=True)
class KnowledgeBase:
    general_set: tuple[str, ...]
    region_subsets: Mapping[RegionTag, tuple[str, ...]]

    def __post_init__(self):
        if len(set(self.general_set)) != len(self.general_set):
            dupes = sorted({t for t in self.general_set if self.general_set.count(t) > 1})
            raise KnowledgeError(f"duplicate topics in general set: {dupes}")
        general = set(self.general_set)
        outside = sorted({t for topics in self.region_subsets.values() for t in topics} - general)
        if outside:
            raise KnowledgeError(f"region topics missing from general set: {outside}")
        covered = set().union(*map(set, self.region_subsets.values())) if self.region_subsets else set()
        uncovered = [t for t in self.general_set if t not in covered]
        if uncovered:
            raise KnowledgeError(f"general topics not in any region subset: {uncovered}")

    def index(self, topic: str) -> int:
        return self.general_set.index(topic)

    def to_dict(self) -> dict:
        return {
            "general": list(self.general_set),
            "regions": {tag.value: list(topics) for tag, topics in self.region_subsets.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "KnowledgeBase":
        try:
            general = tuple(data["general"])
            regions = {RegionTag.parse(k): tuple(v) for k, v in data["regions"].items()}
        except (KeyError, TypeError, AttributeError) as exc:
            raise KnowledgeError(f"malformed knowledge file: {exc}") from None
        missing = [t.value for t in REGIONS if t not in regions]
        if missing:
            raise KnowledgeError(f"knowledge file lacks regions {missing}")
        return cls(general, {t: regions[t] for t in REGIONS})


def bundled_knowledge_path() -> Path:
    return Path(str(resources.files("s4m") / "data" / "knowledge_s4m.json"))


def load_knowledge(path: str | Path | None = None) -> KnowledgeBase:
    """Load and validate a knowledge file (defaults to the bundled topic lists)."""
    path = Path(path) if path is not None else bundled_knowledge_path()
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise KnowledgeError(f"{path}: line {exc.lineno}: {exc.msg}: {line.strip()!r}") from None
    return KnowledgeBase.from_dict(data)


def select_topics(kb: KnowledgeBase, tag: "str | RegionTag",
                  fallback_full_knowledge: bool = False) -> tuple[str, ...]:
    """Topics relevant to ``tag``, in canonical order.

    With ``fallback_full_knowledge`` an unknown tag yields the whole general
    set instead of raising.
    """
    try:
        tag = RegionTag.parse(tag)
    except KnowledgeError:
        if fallback_full_knowledge:
            return kb.general_set
        raise
    return kb.region_subsets[tag]


@dataclass(frozen=True)
class TopicEmbeddings:
    matrix: np.ndarray
    topics: tuple[str, ...]

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.topics):
            raise ValueError("row count does not match topic count")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("non-finite topic embedding")


class HashTopicEmbedder:
    """Fixed random vector per topic string, seeded by a hash of the string.

    Stands in for a pretrained clinical text encoder. Multi-word topics are
    embedded as a single unit.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, topic: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{topic}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim) / np.sqrt(self.dim)


class PrecomputedTopicEmbedder:
    """Looks topics up in an externally computed table.

    The file is either ``.npz`` with arrays ``topics`` and ``vectors`` or JSON
    ``{topic: [floats]}``.
    """

    def __init__(self, table: Mapping[str, Sequence[float]]):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape for v in self.table.values()}
        if len(dims) != 1:
            raise ValueError("precomputed embeddings have inconsistent dimensions")
        (shape,) = dims
        self.dim = shape[0]

    @classmethod
    def from_file(cls, path: str | Path) -> "PrecomputedTopicEmbedder":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path, allow_pickle=False) as f:
                return cls(dict(zip(f["topics"].tolist(), f["vectors"])))
        return cls(json.loads(path.read_text(encoding="utf-8")))

    def __call__(self, topic: str) -> np.ndarray:
        try:
            return self.table[topic]
        except KeyError:
            raise KnowledgeError(f"no precomputed embedding for topic {topic!r}") from None


def embed_topics(topics: Sequence[str], embedder) -> TopicEmbeddings:
    topics = tuple(topics)
    if not topics:
        raise KnowledgeError("empty topic set")
    matrix = np.stack([np.asarray(embedder(t), dtype=np.float64) for t in topics])
    matrix.setflags(write=False)
    return TopicEmbeddings(matrix, topics)
