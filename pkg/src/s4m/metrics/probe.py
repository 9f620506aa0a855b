"""Frozen-encoder linear probing and the image/report alignment score."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.metrics import roc_auc_score

from ..dataset import Dataset, Example, images_to_tensor
from ..model import S4M
from ..tokenizer import Vocab, encode

logger = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    per_label: dict[str, float]
    mean: float

    def to_table(self) -> str:
        width = max([len(k) for k in self.per_label] + [4])
        lines = [f"{name:<{width}}  {auc:.4f}" for name, auc in self.per_label.items()]
        lines.append(f"{'mean':<{width}}  {self.mean:.4f}")
        return "\n".join(lines)


def auc_scores(labels: np.ndarray, scores: np.ndarray, names: Sequence[str] | None = None) -> dict[str, float]:
    """ROC AUC per label column; columns with a single class are skipped."""
    labels, scores = np.asarray(labels), np.asarray(scores)
    names = list(names) if names is not None else [str(i) for i in range(labels.shape[1])]
    out = {}
    for j, name in enumerate(names):
        if len(np.unique(labels[:, j])) < 2:
            logger.warning("label %r has a single class; skipped", name)
            continue
        out[name] = float(roc_auc_score(labels[:, j], scores[:, j]))
    return out


@torch.no_grad()
def pooled_features(model: S4M, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    """Mean of the encoder's image tokens, one row per example."""
    model.eval()
    feats = []
    dtype = model.decoder.pos.dtype
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        images = images_to_tensor(np.stack([ex.images for ex in chunk])).to(dtype)
        feats.append(model.encode_image(images).mean(dim=1).double().numpy())
    return np.concatenate(feats)


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray, epochs: int = 300, lr: float = 1e-2,
                     weight_decay: float = 1e-4, seed: int = 0) -> tuple[nn.Linear, np.ndarray, np.ndarray]:
    """Full-batch logistic regression heads on standardized features."""
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    x = torch.tensor((train_x - mu) / sd, dtype=torch.float64)
    y = torch.tensor(train_y, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(x.shape[1], y.shape[1]).double()
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen, dtype=torch.float64) * 0.01)
        head.bias.zero_()
    opt = torch.optim.Adam(head.parameters(), lr=lr, weight_decay=weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()
    for _ in range(epochs):
        opt.zero_grad()
        loss_fn(head(x), y).backward()
        opt.step()
    return head, mu, sd


def probe_features(train_x, train_y, test_x, test_y, names: Sequence[str], epochs: int = 300,
                   seed: int = 0) -> ProbeResult:
    head, mu, sd = fit_linear_probe(train_x, train_y, epochs=epochs, seed=seed)
    with torch.no_grad():
        scores = head(torch.tensor((test_x - mu) / sd, dtype=torch.float64)).numpy()
    per_label = auc_scores(test_y, scores, names)
    if not per_label:
        raise ValueError("no label has both classes in the evaluation split")
    return ProbeResult(per_label, float(np.mean(list(per_label.values()))))


def linear_probe(model: S4M, labeled: Dataset, epochs: int = 300, seed: int = 0) -> ProbeResult:
    """Train only a linear head on frozen pooled encoder features.

    Fits on the training split and reports per-label AUC on the test split
    (validation split if there is no test split).
    """
    train = [ex for ex in labeled.train if ex.findings is not None]
    test = [ex for ex in (labeled.test or labeled.val) if ex.findings is not None]
    if not train or not test:
        raise ValueError("probe needs labeled train and test examples")
    return probe_features(
        pooled_features(model, train), np.stack([ex.findings for ex in train]),
        pooled_features(model, test), np.stack([ex.findings for ex in test]),
        labeled.finding_names, epochs=epochs, seed=seed,
    )


@torch.no_grad()
def alignment_score(model: S4M, vocab: Vocab, images, report: str) -> float:
    """Cosine between the pooled image embedding and the report embedding."""
    if not model.has_ipg:
        raise RuntimeError("checkpoint has no alignment heads")
    model.eval()
    if not isinstance(images, torch.Tensor):
        images = images_to_tensor(np.asarray(images))
    if images.dim() == 4:
        images = images.unsqueeze(0)
    images = images.to(model.decoder.pos.dtype)
    tokens = torch.tensor([encode(vocab, report, model.config.max_len)])
    img = model.pool_image(model.encode_image(images))
    txt = model.embed_report(tokens)
    return float((img * txt).sum(dim=-1).clamp(-1.0, 1.0)[0])
