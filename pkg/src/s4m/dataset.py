"""Two-view image/report examples: manifest loading, synthesis, batching.

Synthetic examples carry a faint region-coded background grating and 0-3
finding glyphs drawn from the region's topic subset; the report names
exactly the rendered findings.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .knowledge import REGIONS, KnowledgeBase, RegionTag, load_knowledge
from .tokenizer import PAD, Vocab, encode, normalize

logger = logging.getLogger(__name__)

IMAGE_SIZE = 224
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Example:
    id: str
    images: np.ndarray  # (2, H, W) uint8
    report: str
    tag: RegionTag
    split: str = "train"
    findings: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] != 2:
            raise DatasetError(f"{self.id}: expected two views, got shape {self.images.shape}")


@dataclass
class Dataset:
    examples: list[Example]
    finding_names: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [ex.id for ex in self.examples]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate example ids")

    def __len__(self):
        return len(self.examples)

    def split(self, name: str) -> list[Example]:
        return [ex for ex in self.examples if ex.split == name]

    @property
    def train(self) -> list[Example]:
        return self.split("train")

    @property
    def val(self) -> list[Example]:
        return self.split("val")

    @property
    def test(self) -> list[Example]:
        return self.split("test")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for ex in self.examples:
            h.update(ex.id.encode())
            h.update(ex.report.encode())
            h.update(ex.images.tobytes())
        return h.hexdigest()[:16]


def two_views(views: Sequence[np.ndarray]) -> np.ndarray:
    """Duplicate a single view; keep the first two of many (first = frontal)."""
    if len(views) == 0:
        raise DatasetError("example without images")
    if len(views) == 1:
        views = [views[0], views[0]]
    return np.stack([views[0], views[1]])


def report_length_ok(report: str, lo: int = 30, hi: int = 60) -> bool:
    return lo <= len(normalize(report)) <= hi


def _load_image(path: Path, size: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def read_manifest_rows(path: str | Path) -> Iterator[tuple[int, dict]]:
    """``(line number, row)`` for every non-blank JSONL line."""
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: bad manifest row ({exc})") from None
            if not isinstance(row, dict):
                raise DatasetError(f"{path}:{lineno}: manifest row is not an object")
            yield lineno, row


def example_from_row(row: Mapping, root: Path, lineno: int = 0, image_size: int = IMAGE_SIZE,
                     default_tag=None, finding_names: Sequence[str] | None = None) -> Example:
    """Build one example; ``default_tag`` fills in rows without a ``tag``."""
    try:
        paths = row["image_paths"]
        report = row["report"]
    except KeyError as exc:
        raise DatasetError(f"line {lineno}: missing field {exc}") from None
    tag_value = row.get("tag", default_tag)
    if tag_value is None:
        raise DatasetError(f"line {lineno}: missing region tag")
    try:
        tag = RegionTag.parse(tag_value)
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: {exc}") from None
    split = row.get("split", "train")
    if split not in SPLITS:
        raise DatasetError(f"line {lineno}: unknown split {split!r}")
    views = [_load_image(root / p, image_size) for p in paths[:2]]
    findings = None
    if "labels" in row:
        names = finding_names if finding_names is not None else tuple(row["labels"])
        findings = np.array([int(row["labels"].get(n, 0)) for n in names], dtype=np.int64)
    return Example(str(row.get("id", f"row{lineno}")), two_views(views), report, tag, split, findings)


def load_manifest(path: str | Path, filter_length: bool = False, image_size: int = IMAGE_SIZE) -> Dataset:
    """Read a JSONL manifest of ``{image_paths, report, tag, split}`` rows.

    Image paths are resolved relative to the manifest's directory. Optional
    per-row ``labels`` (``{finding: 0/1}``) become the findings vector.
    """
    path = Path(path)
    examples: list[Example] = []
    finding_names: tuple[str, ...] | None = None
    for lineno, row in read_manifest_rows(path):
        if filter_length and not report_length_ok(str(row.get("report", ""))):
            continue
        if finding_names is None and "labels" in row:
            finding_names = tuple(row["labels"])
        try:
            examples.append(example_from_row(row, path.parent, lineno, image_size, finding_names=finding_names))
        except DatasetError as exc:
            raise DatasetError(f"{path}:{exc}") from None
    return Dataset(examples, finding_names or ())


def export_manifest(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write ``manifest.jsonl`` plus one PNG per view under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as f:
        for ex in dataset.examples:
            paths = []
            for v in range(2):
                rel = f"images/{ex.id}_v{v}.png"
                Image.fromarray(ex.images[v]).save(out_dir / rel)
                paths.append(rel)
            row = {"id": ex.id, "image_paths": paths, "report": ex.report, "tag": ex.tag.value, "split": ex.split}
            if ex.findings is not None:
                row["labels"] = {n: int(v) for n, v in zip(dataset.finding_names, ex.findings)}
            f.write(json.dumps(row) + "\n")
    return manifest


# --- synthesis -------------------------------------------------------------

DEFAULT_FINDINGS = {
    RegionTag.CHEST: ("atelectasis", "cardiomegaly", "edema", "effusion", "opacity", "pneumothorax"),
    RegionTag.ABDOMEN: ("consolidation", "degenerative", "faecal", "gas", "material", "obstruction"),
    RegionTag.KNEE: ("dislocation", "effusion", "fracture", "lucency", "prosthesis", "swelling"),
    RegionTag.HIP: ("degenerative", "fracture", "lucency", "periprosthetic", "sclerosis", "symphysis"),
    RegionTag.WRIST: ("angulation", "cast", "displacement", "fracture", "plate", "swelling"),
    RegionTag.SHOULDER: ("calcification", "degenerative", "dislocation", "fracture", "subacromial", "tuberosity"),
}

# region-specific normal statements; none of them may contain a finding name
NORMAL_TEXT = {
    RegionTag.CHEST: (
        "frontal and lateral views of the chest were obtained . the lungs are clear bilaterally . "
        "the heart size is within normal limits . the mediastinal silhouette is unremarkable ."
    ),
    RegionTag.ABDOMEN: (
        "supine view of the abdomen was obtained . the bowel pattern is nonspecific . "
        "no free air is seen under the diaphragm . the visualised organs appear unremarkable ."
    ),
    RegionTag.KNEE: (
        "two views of the knee were obtained . the patella is in normal position . "
        "the joint spaces are preserved . the soft tissues are otherwise unremarkable ."
    ),
    RegionTag.HIP: (
        "anteroposterior view of the pelvis and hip was obtained . the femoral head is located . "
        "the pelvic ring appears intact . the sacroiliac joints are symmetric ."
    ),
    RegionTag.WRIST: (
        "two views of the wrist were obtained . the carpal bones are aligned . "
        "the radiocarpal joint is preserved . the distal ulna is unremarkable ."
    ),
    RegionTag.SHOULDER: (
        "two views of the shoulder were obtained . the glenohumeral joint is congruent . "
        "the acromioclavicular joint is unremarkable . the humeral head is well seen ."
    ),
}
NO_FINDING_TEXT = "no focal abnormality is identified ."

GLYPH_SHAPES = ("circle", "square", "diamond", "cross", "ring", "hbar", "vbar", "triangle")


@dataclass
class SynthSpec:
    counts: Mapping[RegionTag, int] = field(default_factory=lambda: {r: 100 for r in REGIONS})
    findings: Mapping[RegionTag, Sequence[str]] = field(default_factory=lambda: dict(DEFAULT_FINDINGS))
    max_findings: int = 3
    image_size: int = IMAGE_SIZE
    background_contrast: float = 0.06
    noise: float = 0.12
    split_ratio: tuple[float, float, float] = (0.7, 0.15, 0.15)

    @classmethod
    def from_dict(cls, data: Mapping) -> "SynthSpec":
        data = dict(data)
        kwargs = {}
        if "counts" in data:
            kwargs["counts"] = {RegionTag.parse(k): int(v) for k, v in data.pop("counts").items()}
        if "findings" in data:
            kwargs["findings"] = {RegionTag.parse(k): tuple(v) for k, v in data.pop("findings").items()}
        if "split_ratio" in data:
            kwargs["split_ratio"] = tuple(data.pop("split_ratio"))
        unknown = set(data) - {"max_findings", "image_size", "background_contrast", "noise"}
        if unknown:
            raise DatasetError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**kwargs, **data)

    def finding_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for region in REGIONS:
            for f in self.findings.get(region, ()):
                if f not in names:
                    names.append(f)
        return tuple(names)


def compose_report(tag: RegionTag, present: Sequence[str], region_findings: Sequence[str]) -> str:
    """Normal statements for the region, then one sentence per finding in canonical order."""
    parts = [NORMAL_TEXT[tag]]
    ordered = [f for f in region_findings if f in set(present)]
    if ordered:
        parts.extend(f"there is {f} ." for f in ordered)
    else:
        parts.append(NO_FINDING_TEXT)
    return " ".join(parts)


def mentions(report: str, topic: str) -> bool:
    """Whole-token (phrase) match of ``topic`` in ``report``."""
    toks, phrase = normalize(report), normalize(topic)
    n = len(phrase)
    return any(toks[i:i + n] == phrase for i in range(len(toks) - n + 1))


def _glyph_mask(shape: str, r: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    if shape == "circle":
        return yy**2 + xx**2 <= r**2
    if shape == "square":
        return np.maximum(ay, ax) <= r * 0.8
    if shape == "diamond":
        return ay + ax <= r
    if shape == "cross":
        w = r / 3
        return ((ay <= w) & (ax <= r)) | ((ax <= w) & (ay <= r))
    if shape == "ring":
        d2 = yy**2 + xx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "hbar":
        return (ay <= r / 3) & (ax <= r)
    if shape == "vbar":
        return (ax <= r / 3) & (ay <= r)
    if shape == "triangle":
        return (yy <= r * 0.8) & (yy >= -r) & (ax <= (yy + r) * 0.55)
    raise ValueError(shape)


def glyph_style(index: int) -> tuple[str, float, float]:
    """(shape, radius, signed intensity) for the ``index``-th finding."""
    shape = GLYPH_SHAPES[index % len(GLYPH_SHAPES)]
    radius = (11.0, 18.0)[(index // len(GLYPH_SHAPES)) % 2]
    polarity = (0.45, -0.45)[(index // (2 * len(GLYPH_SHAPES))) % 2]
    return shape, radius, polarity


def _render_view(rng: np.random.Generator, tag: RegionTag, glyphs: Sequence[int], spec: SynthSpec,
                 mirror: bool) -> np.ndarray:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    region = REGIONS.index(tag)
    # body-like blob plus a faint grating whose orientation codes the region
    cy, cx = size / 2 + rng.uniform(-12, 12), size / 2 + rng.uniform(-12, 12)
    body = np.exp(-(((yy - cy) / (0.42 * size)) ** 2 + ((xx - cx) / (0.36 * size)) ** 2))
    img = 0.25 + 0.35 * body
    # horizontal / vertical orientation x three periods; both survive a horizontal flip
    theta = (0.0, np.pi / 2)[region % 2]
    freq = 2 * np.pi / (9.0, 13.0, 19.0)[region // 2]
    phase = rng.uniform(0, 2 * np.pi)
    img += spec.background_contrast * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)

    slots = rng.permutation(9)[: len(glyphs)]
    cell = size / 3
    for g, slot in zip(glyphs, slots):
        shape, radius, polarity = glyph_style(g)
        gy = cell * (slot // 3 + 0.5) + rng.uniform(-0.18, 0.18) * cell
        gx = cell * (slot % 3 + 0.5) + rng.uniform(-0.18, 0.18) * cell
        img[_glyph_mask(shape, radius, yy - gy, xx - gx)] += polarity

    img += spec.noise * rng.standard_normal(img.shape)
    if mirror:
        img = img[:, ::-1]
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def synthesize_dataset(spec: SynthSpec | None = None, seed: int = 0, kb: KnowledgeBase | None = None) -> Dataset:
    """Deterministically generate a multi-region two-view corpus."""
    spec = spec or SynthSpec()
    kb = kb or load_knowledge()
    for region, count in spec.counts.items():
        if count <= 0:
            raise DatasetError(f"count for {RegionTag.parse(region).value} must be positive, got {count}")
    names = spec.finding_names()
    for region in spec.counts:
        region = RegionTag.parse(region)
        for f in spec.findings.get(region, ()):
            if f not in kb.region_subsets[region]:
                raise DatasetError(f"finding {f!r} is not a {region.value} topic")
            for other in names:
                if mentions(NORMAL_TEXT[region] + " " + NO_FINDING_TEXT, other):
                    raise DatasetError(f"normal text for {region.value} mentions finding {other!r}")

    rng = np.random.default_rng(seed)
    examples: list[Example] = []
    for region in REGIONS:
        count = spec.counts.get(region, 0)
        if not count:
            continue
        region_findings = tuple(spec.findings.get(region, ()))
        n_train = int(round(spec.split_ratio[0] * count))
        n_val = int(round(spec.split_ratio[1] * count))
        order = rng.permutation(count)
        split_of = {}
        for rank, i in enumerate(order):
            split_of[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        for i in range(count):
            k = int(rng.integers(0, min(spec.max_findings, len(region_findings)) + 1))
            present = [region_findings[j] for j in sorted(rng.choice(len(region_findings), size=k, replace=False))]
            glyphs = [names.index(f) for f in present]
            views = np.stack([
                _render_view(rng, region, glyphs, spec, mirror=False),
                _render_view(rng, region, glyphs, spec, mirror=True),
            ])
            labels = np.array([int(n in present) for n in names], dtype=np.int64)
            examples.append(Example(f"{region.value}-{i:04d}", views, compose_report(region, present, region_findings),
                                    region, split_of[i], labels))
    return Dataset(examples, names)


# --- augmentation and batching ----------------------------------------------

def augment(image: np.ndarray, rng: np.random.Generator | None = None, train: bool = True,
            size: int = IMAGE_SIZE) -> np.ndarray:
    """Random crop + horizontal flip (p=0.5) in training, center crop otherwise.

    Works on ``(H, W)`` or ``(C, H, W)`` arrays.
    """
    h, w = image.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    if train:
        if rng is None:
            raise ValueError("training augmentation needs an rng")
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        out = image[..., top:top + size, left:left + size]
        if rng.random() < 0.5:
            out = out[..., ::-1]
    else:
        top, left = (h - size) // 2, (w - size) // 2
        out = image[..., top:top + size, left:left + size]
    return np.ascontiguousarray(out)


@dataclass
class Batch:
    images: torch.Tensor  # (B, 2, 1, H, W) float
    targets: torch.Tensor  # (B, T) long, PAD-filled
    tags: list[RegionTag]
    ids: list[str]

    @property
    def pad_mask(self) -> torch.Tensor:
        return self.targets != PAD


def images_to_tensor(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    """uint8 views ``(..., 2, H, W)`` -> float tensor ``(..., 2, 1, H, W)`` roughly in [-2, 2]."""
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy((arr / 255.0 - 0.5) / 0.25).unsqueeze(-3)


def collate(examples: Sequence[Example], vocab: Vocab, max_len: int = 60, train: bool = False,
            rng: np.random.Generator | None = None, size: int = IMAGE_SIZE) -> Batch:
    views = np.stack([
        np.stack([augment(ex.images[v], rng, train, size) for v in range(2)]) for ex in examples
    ])
    seqs = [encode(vocab, ex.report, max_len) for ex in examples]
    width = max(len(s) for s in seqs)
    targets = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        targets[i, : len(s)] = torch.tensor(s)
    return Batch(images_to_tensor(views), targets, [ex.tag for ex in examples], [ex.id for ex in examples])


def iter_batches(examples: Sequence[Example], vocab: Vocab, batch_size: int, rng: np.random.Generator,
                 max_len: int = 60, train: bool = True, shuffle: bool = True) -> Iterator[Batch]:
    """One pass over ``examples``; order and augmentation driven by ``rng``."""
    order = rng.permutation(len(examples)) if shuffle else np.arange(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        yield collate(chunk, vocab, max_len, train=train, rng=rng)
