"""Joint training over the merged multi-region corpus, plus checkpoint I/O."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .dataset import Dataset, iter_batches
from .generator import generate_batch
from .knowledge import KnowledgeBase, load_knowledge
from .metrics.caption import bleu
from .model import S4M, ModelConfig, joint_loss, strip_ipg
from .tokenizer import Vocab, build_vocab

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "s4m-ckpt-v1"
ABLATIONS = ("base", "radka_star", "radka", "s4m")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    max_steps: int | None = None
    lr_encoders: float = 5e-5
    lr_rest: float = 1e-4
    weight_decay: float = 1e-4
    lam: float = 1.0
    ablation: str = "s4m"
    seed: int = 0
    eval_every: int = 1
    grad_clip: float = 5.0
    min_freq: int = 3
    max_len: int = 60
    augment: bool = True
    select_best: bool = True
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; allowed: {', '.join(ABLATIONS)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def model_config(self, vocab_size: int) -> ModelConfig:
        knowledge = {"base": "none", "radka_star": "full", "radka": "region", "s4m": "region"}[self.ablation]
        ipg = self.ablation == "s4m"
        opts = dict(self.model)
        opts.update(vocab_size=vocab_size, knowledge=knowledge, ipg=ipg, lam=self.lam if ipg else 0.0,
                    max_len=self.max_len)
        return ModelConfig(**opts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Checkpoint:
    model: S4M
    vocab: Vocab
    train_config: TrainConfig | None = None
    history: list[dict] = field(default_factory=list)
    best_val_bleu4: float | None = None


def _set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def val_bleu4(model: S4M, vocab: Vocab, examples, max_len: int) -> float:
    from .dataset import images_to_tensor

    images = images_to_tensor(np.stack([ex.images for ex in examples]))
    hyps = generate_batch(model, vocab, images, [ex.tag for ex in examples], max_len)
    return bleu(hyps, [[ex.report] for ex in examples], 4)


def train(config: TrainConfig, dataset: Dataset, kb: KnowledgeBase | None = None, vocab: Vocab | None = None,
          log_path: str | Path | None = None, on_step: Callable[[dict], None] | None = None) -> Checkpoint:
    """Optimize generation loss + lambda * contrastive loss with two Adam groups.

    Image and report encoders use ``lr_encoders``; everything else uses
    ``lr_rest``. The best validation BLEU-4 state is kept when a validation
    split exists and ``select_best`` is set.
    """
    kb = kb or load_knowledge()
    train_set = dataset.train
    if not train_set:
        raise ValueError("dataset has no training split")
    vocab = vocab or build_vocab([ex.report for ex in train_set], config.min_freq)
    _set_seed(config.seed)
    model = S4M(config.model_config(len(vocab)), kb)
    enc, rest = model.parameter_groups()
    opt = torch.optim.Adam(
        [{"params": enc, "lr": config.lr_encoders}, {"params": rest, "lr": config.lr_rest}],
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    val_set = dataset.val
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    history: list[dict] = []
    best_state, best_score = None, -math.inf
    step = 0
    try:
        for epoch in range(config.max_epochs):
            model.train()
            for batch in iter_batches(train_set, vocab, config.batch_size, rng, config.max_len,
                                      train=config.augment):
                if batch.targets.shape[0] < 2:
                    continue
                loss, parts = joint_loss(model, batch)
                if not math.isfinite(parts["joint"]):
                    raise TrainingDiverged(f"non-finite loss at step {step}: {parts}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                record = {"step": step, "epoch": epoch, **parts, "lr": [g["lr"] for g in opt.param_groups]}
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                if on_step:
                    on_step(record)
                step += 1
                if config.max_steps is not None and step >= config.max_steps:
                    break
            last = config.max_steps is not None and step >= config.max_steps
            last = last or epoch == config.max_epochs - 1
            if val_set and config.select_best and ((epoch + 1) % config.eval_every == 0 or last):
                score = val_bleu4(model, vocab, val_set, config.max_len)
                logger.info("epoch %d step %d val BLEU-4 %.4f", epoch, step, score)
                history.append({"step": step, "epoch": epoch, "val_bleu4": score})
                if score > best_score:
                    best_score, best_state = score, copy.deepcopy(model.state_dict())
            if last:
                break
    finally:
        if log_file:
            log_file.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return Checkpoint(model, vocab, config, history, best_score if best_state is not None else None)


# --- checkpoint files -----------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path, strip_ipg_heads: bool = False) -> Path:
    """Write a zip archive: format tag, configs, vocab, knowledge, parameter arrays."""
    model = ckpt.model
    cfg = model.config.to_dict()
    state = model.state_dict()
    if strip_ipg_heads:
        state = strip_ipg(state)
        cfg["ipg"] = False
    buf = io.BytesIO()
    np.savez(buf, **{k: v.detach().cpu().numpy() for k, v in state.items()})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("FORMAT", CHECKPOINT_FORMAT)
        zf.writestr("model_config.json", json.dumps(cfg))
        zf.writestr("train_config.json", json.dumps(ckpt.train_config.to_dict() if ckpt.train_config else None))
        zf.writestr("vocab.json", ckpt.vocab.to_json())
        zf.writestr("knowledge.json", json.dumps(model.kb.to_dict()))
        zf.writestr("params.npz", buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            tag = zf.read("FORMAT").decode()
            if tag != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: checkpoint format {tag!r}, expected {CHECKPOINT_FORMAT!r}")
            cfg = ModelConfig.from_dict(json.loads(zf.read("model_config.json")))
            train_cfg = json.loads(zf.read("train_config.json"))
            vocab = Vocab.from_json(zf.read("vocab.json").decode("utf-8"))
            kb = KnowledgeBase.from_dict(json.loads(zf.read("knowledge.json")))
            with np.load(io.BytesIO(zf.read("params.npz")), allow_pickle=False) as npz:
                arrays = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, KeyError, EOFError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if cfg.ipg and not any(k.startswith("ipg.") for k in arrays):
        cfg.ipg = False
    model = S4M(cfg, kb, topic_table=arrays.get("topic_table"))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()}, strict=True)
    model.eval()
    return Checkpoint(model, vocab, TrainConfig.from_dict(train_cfg) if train_cfg else None)
