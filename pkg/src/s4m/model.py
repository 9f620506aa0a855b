"""Encoder-decoder report generator with knowledge aggregation and an
image/report contrastive branch.

Layout of the parameter namespace:

* ``encoder.*``     conv image encoder (two views share weights)
* ``aggregator.*``  co-attention over [image tokens; topic rows]
* ``decoder.*``     causal transformer decoder
* ``ipg.*``         training-only alignment heads (image projection, report
                    encoder, temperature); safe to delete after training
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .knowledge import (HashTopicEmbedder, KnowledgeBase, RegionTag, embed_topics, load_knowledge,
                        select_topics)
from .tokenizer import BOS, PAD

KNOWLEDGE_MODES = ("none", "full", "region")
POOL_MODES = ("mean", "max", "cls")


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    heads: int = 8
    decoder_layers: int = 3
    agg_layers: int = 3
    text_layers: int = 2
    d_ff: int = 256
    dropout: float = 0.1
    max_len: int = 60
    lam: float = 1.0
    tau_init: float = 0.07
    shared_dim: int = 64
    d_k: int | None = None
    pool: str = "mean"
    knowledge: str = "region"
    ipg: bool = True
    fallback_full_knowledge: bool = False
    image_size: int = 224
    in_channels: int = 1
    encoder_channels: tuple[int, ...] = (8, 16, 32, 48)
    topic_seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.knowledge not in KNOWLEDGE_MODES:
            raise ValueError(f"knowledge must be one of {KNOWLEDGE_MODES}")
        if self.pool not in POOL_MODES:
            raise ValueError(f"pool must be one of {POOL_MODES}")
        if self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels lists the first four of five stages")

    @property
    def grid(self) -> int:
        return self.image_size // 32

    @property
    def num_image_tokens(self) -> int:
        return 2 * self.grid**2

    @property
    def topic_dim(self) -> int:
        return self.d_k or self.d

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder_channels"] = list(self.encoder_channels)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class ImageEncoder(nn.Module):
    """Five stride-2 conv stages -> (grid x grid) token map per view."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = (cfg.in_channels,) + cfg.encoder_channels + (cfg.d,)
        layers = []
        for i in range(5):
            layers += [
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                nn.GroupNorm(1, chans[i + 1]),
                nn.GELU(),
            ]
        layers.append(nn.Conv2d(cfg.d, cfg.d, 1))
        self.net = nn.Sequential(*layers)
        self.row_pos = nn.Parameter(torch.randn(cfg.grid, cfg.d) * 0.02)
        self.col_pos = nn.Parameter(torch.randn(cfg.grid, cfg.d) * 0.02)
        self.image_size = cfg.image_size

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 2, C, H, W) -> (B, 2*g*g, d)
        if images.dim() != 5 or images.shape[1] != 2 or images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected (B, 2, C, {self.image_size}, {self.image_size}) images, "
                             f"got {tuple(images.shape)}")
        b = images.shape[0]
        feats = self.net(images.flatten(0, 1))  # (2B, d, g, g)
        feats = feats + (self.row_pos[:, None, :] + self.col_pos[None, :, :]).permute(2, 0, 1)
        tokens = feats.flatten(2).transpose(1, 2)  # (2B, g*g, d)
        return tokens.reshape(b, -1, tokens.shape[-1])


class CoAttentionLayer(nn.Module):
    """LN(X + MHA(X)) over the concatenated image and topic rows."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm = nn.LayerNorm(d)

    def forward(self, x, pad_mask=None):
        out, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        return self.norm(x + out)


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_ff, d))
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, causal_mask, memory_pad=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, attn_mask=causal_mask, need_weights=False)[0])
        h = self.norm2(x)
        x = x + self.drop(self.cross_attn(h, memory, memory, key_padding_mask=memory_pad, need_weights=False)[0])
        return x + self.drop(self.ff(self.norm3(x)))


class TextDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.d) * 0.02)
        self.layers = nn.ModuleList(DecoderLayer(cfg.d, cfg.heads, cfg.d_ff, cfg.dropout)
                                    for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(cfg.d)
        self.out = nn.Linear(cfg.d, cfg.vocab_size)
        self.drop = nn.Dropout(cfg.dropout)
        self.max_len = cfg.max_len

    def forward(self, memory, prefix, memory_pad=None):
        t = prefix.shape[1]
        if t > self.max_len:
            raise ValueError(f"prefix length {t} exceeds max_len {self.max_len}")
        x = self.drop(self.embed(prefix) + self.pos[:t])
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=prefix.device), diagonal=1)
        for layer in self.layers:
            x = layer(x, memory, causal, memory_pad)
        return self.out(self.norm(x))


class ReportEncoder(nn.Module):
    """Small bidirectional transformer over the report; pooled at BOS."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d, padding_idx=PAD)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.d) * 0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(cfg.d, cfg.heads, cfg.d_ff, cfg.dropout, activation="gelu",
                                       batch_first=True, norm_first=True)
            for _ in range(cfg.text_layers)
        )
        self.norm = nn.LayerNorm(cfg.d)

    def forward(self, tokens):
        if tokens.shape[1] == 0:
            raise ValueError("empty report sequence")
        x = self.embed(tokens) + self.pos[: tokens.shape[1]]
        pad = tokens == PAD
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=pad)
        return self.norm(x[:, 0])


class IPGHeads(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_proj = nn.Linear(cfg.d, cfg.shared_dim)
        self.text = ReportEncoder(cfg)
        self.text_proj = nn.Linear(cfg.d, cfg.shared_dim)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        if cfg.pool == "cls":
            self.pool_query = nn.Parameter(torch.randn(cfg.d) * 0.02)


class S4M(nn.Module):
    def __init__(self, cfg: ModelConfig, kb: KnowledgeBase | None = None, topic_table: np.ndarray | None = None,
                 embedder=None):
        super().__init__()
        self.config = cfg
        self.kb = kb or load_knowledge()
        self.encoder = ImageEncoder(cfg)
        self.decoder = TextDecoder(cfg)
        if cfg.knowledge != "none":
            if topic_table is None:
                embedder = embedder or HashTopicEmbedder(cfg.topic_dim, cfg.topic_seed)
                topic_table = embed_topics(self.kb.general_set, embedder).matrix
            if topic_table.shape != (len(self.kb.general_set), cfg.topic_dim):
                raise ValueError(f"topic table shape {topic_table.shape} does not match knowledge base")
            # frozen: a buffer, never handed to the optimizer
            self.register_buffer("topic_table", torch.tensor(np.asarray(topic_table), dtype=torch.float32))
            self.topic_proj = nn.Linear(cfg.topic_dim, cfg.d) if cfg.topic_dim != cfg.d else nn.Identity()
            self.aggregator = nn.ModuleList(CoAttentionLayer(cfg.d, cfg.heads)
                                            for _ in range(cfg.agg_layers))
        if cfg.ipg:
            self.ipg = IPGHeads(cfg)

    @property
    def has_ipg(self) -> bool:
        return hasattr(self, "ipg")

    # -- knowledge path --------------------------------------------------

    def topic_indices(self, tag) -> list[int]:
        if self.config.knowledge == "full":
            topics = self.kb.general_set
        else:
            topics = select_topics(self.kb, tag, self.config.fallback_full_knowledge)
        return [self.kb.index(t) for t in topics]

    def topic_rows(self, tags: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
        """Projected topic rows ``(B, k_max, d)`` and their padding mask."""
        idx = [self.topic_indices(t) for t in tags]
        k_max = max(len(i) for i in idx)
        table = self.topic_proj(self.topic_table.to(self.decoder.pos.dtype))
        rows = table.new_zeros(len(idx), k_max, table.shape[-1])
        pad = torch.ones(len(idx), k_max, dtype=torch.bool, device=table.device)
        for b, ids in enumerate(idx):
            rows[b, : len(ids)] = table[ids]
            pad[b, : len(ids)] = False
        return rows, pad

    # -- forward pieces -----------------------------------------------------

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def aggregate(self, img: torch.Tensor, topics: torch.Tensor, topic_pad: torch.Tensor | None = None):
        """Co-attend image tokens and topic rows; returns fused rows and their padding mask."""
        if topics.shape[1] == 0:
            raise ValueError("aggregation needs at least one topic")
        if not hasattr(self, "aggregator"):
            raise RuntimeError("model was built without knowledge aggregation")
        x = torch.cat([img, topics], dim=1)
        pad = None
        if topic_pad is not None:
            img_pad = torch.zeros(img.shape[:2], dtype=torch.bool, device=img.device)
            pad = torch.cat([img_pad, topic_pad], dim=1)
        for layer in self.aggregator:
            x = layer(x, pad)
        return x, pad

    def memory(self, images: torch.Tensor, tags: Sequence) -> tuple[torch.Tensor, torch.Tensor | None]:
        img = self.encode_image(images)
        if self.config.knowledge == "none":
            return img, None
        rows, pad = self.topic_rows(tags)
        return self.aggregate(img, rows, pad)

    def decode(self, memory, prefix, memory_pad=None):
        """Next-token logits ``(B, T, V)`` for a BOS-initial prefix."""
        if prefix.shape[1] == 0 or not bool((prefix[:, 0] == BOS).all()):
            raise ValueError("decoder prefix must start with BOS")
        return self.decoder(memory, prefix, memory_pad)

    def pool_image(self, img: torch.Tensor) -> torch.Tensor:
        heads = self._heads()
        if self.config.pool == "mean":
            pooled = img.mean(dim=1)
        elif self.config.pool == "max":
            pooled = img.max(dim=1).values
        else:
            weights = torch.softmax(img @ heads.pool_query / math.sqrt(img.shape[-1]), dim=1)
            pooled = (weights.unsqueeze(-1) * img).sum(dim=1)
        return F.normalize(heads.image_proj(pooled), dim=-1, eps=1e-12)

    def embed_report(self, tokens: torch.Tensor) -> torch.Tensor:
        heads = self._heads()
        return F.normalize(heads.text_proj(heads.text(tokens)), dim=-1, eps=1e-12)

    @property
    def tau(self) -> torch.Tensor:
        return self._heads().log_tau.exp().clamp(min=0.01)

    def _heads(self) -> IPGHeads:
        if not self.has_ipg:
            raise RuntimeError("checkpoint has no alignment heads")
        return self.ipg

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(image + report encoders, everything else)."""
        enc, rest = [], []
        for name, p in self.named_parameters():
            (enc if name.startswith(("encoder.", "ipg.text.")) else rest).append(p)
        return enc, rest


def strip_ipg(state_dict: dict) -> dict:
    return {k: v for k, v in state_dict.items() if not k.startswith("ipg.")}


def generation_loss(logits: torch.Tensor, targets: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Mean token negative log-likelihood over non-PAD positions."""
    n = pad_mask.sum()
    if n == 0:
        raise ValueError("all-PAD batch")
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    return (nll * pad_mask.reshape(-1).to(nll.dtype)).sum() / n


def contrastive_loss(img_vecs: torch.Tensor, txt_vecs: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives."""
    if img_vecs.shape[0] < 2:
        raise ValueError("contrastive loss needs negatives")
    logits = img_vecs @ txt_vecs.T / tau
    labels = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def joint_loss(model: S4M, batch) -> tuple[torch.Tensor, dict[str, float]]:
    """Generation loss + lambda * contrastive loss, with teacher forcing."""
    img = model.encode_image(batch.images)
    if model.config.knowledge == "none":
        memory, memory_pad = img, None
    else:
        rows, pad = model.topic_rows(batch.tags)
        memory, memory_pad = model.aggregate(img, rows, pad)
    targets = batch.targets
    logits = model.decode(memory, targets[:, :-1], memory_pad)
    gen = generation_loss(logits, targets[:, 1:], targets[:, 1:] != PAD)
    lam = model.config.lam
    if model.has_ipg and lam > 0:
        ctr = contrastive_loss(model.pool_image(img), model.embed_report(targets), model.tau)
        total = gen + lam * ctr
        return total, {"gen_loss": gen.item(), "ctr_loss": ctr.item(), "joint": total.item()}
    return gen, {"gen_loss": gen.item(), "ctr_loss": 0.0, "joint": gen.item()}


def build_model(cfg: ModelConfig, kb: KnowledgeBase | None = None, seed: int = 0, **kwargs) -> S4M:
    torch.manual_seed(seed)
    return S4M(cfg, kb, **kwargs)

