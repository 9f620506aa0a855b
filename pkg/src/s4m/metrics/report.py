from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..knowledge import REGIONS, RegionTag
from .caption import bleu_all, cider, corpus_rouge_l

logger = logging.getLogger(__name__)

METRIC_NAMES = ("B1", "B2", "B3", "B4", "ROUGE-L", "CIDEr")


def score_corpus(hyps: Sequence[str], refs: Sequence[Sequence[str]]) -> dict[str, float]:
    b = bleu_all(hyps, refs, 4)
    return {
        "B1": b[0], "B2": b[1], "B3": b[2], "B4": b[3],
        "ROUGE-L": corpus_rouge_l(hyps, refs),
        "CIDEr": cider(hyps, refs),
    }


@dataclass
class EvalReport:
    """Per-region metric rows plus their unweighted average.

    Regions with no hypotheses are kept as ``None`` rows and left out of the
    average.
    """

    regions: dict[str, dict[str, float] | None]
    metadata: dict = field(default_factory=dict)

    @property
    def average(self) -> dict[str, float]:
        present = [row for row in self.regions.values() if row is not None]
        if not present:
            return {}
        return {m: sum(row[m] for row in present) / len(present) for m in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {"regions": self.regions, "average": self.average, "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        header = f"{'region':<10}" + "".join(f"{m:>9}" for m in METRIC_NAMES)
        lines = [header, "-" * len(header)]
        for name, row in list(self.regions.items()) + [("Ave", self.average or None)]:
            if row is None:
                lines.append(f"{name:<10}" + "".join(f"{'-':>9}" for _ in METRIC_NAMES))
            else:
                lines.append(f"{name:<10}" + "".join(f"{row[m]:>9.3f}" for m in METRIC_NAMES))
        return "\n".join(lines)


def evaluate_reports(hyps: Sequence[str], refs: Sequence[Sequence[str]],
                     tags: Sequence[str | RegionTag], metadata: Mapping | None = None) -> EvalReport:
    """Score hypotheses grouped by region tag (regions x metrics plus an average row)."""
    if not (len(hyps) == len(refs) == len(tags)):
        raise ValueError("hyps, refs and tags must have equal length")
    tags = [RegionTag.parse(t) for t in tags]
    regions: dict[str, dict[str, float] | None] = {}
    for region in REGIONS:
        idx = [i for i, t in enumerate(tags) if t == region]
        if not idx:
            logger.warning("no hypotheses for region %s; excluded from average", region.value)
            regions[region.value] = None
            continue
        regions[region.value] = score_corpus([hyps[i] for i in idx], [refs[i] for i in idx])
    return EvalReport(regions, dict(metadata or {}))
