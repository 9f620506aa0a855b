import json
import zipfile

import numpy as np
import pytest
import torch

from s4m.dataset import SynthSpec, images_to_tensor, synthesize_dataset
from s4m.generator import generate_batch
from s4m.knowledge import REGIONS, load_knowledge
from s4m.metrics.probe import alignment_score
from s4m.model import S4M
from s4m.tokenizer import build_vocab
from s4m.trainer import (ABLATIONS, CHECKPOINT_FORMAT, Checkpoint, CheckpointError, TrainConfig, load_checkpoint,
                         save_checkpoint, train)

KB = load_knowledge()
SMALL_MODEL = {"d": 16, "heads": 2, "decoder_layers": 1, "agg_layers": 1, "text_layers": 1, "d_ff": 32,
               "encoder_channels": [4, 4, 8, 8], "shared_dim": 16, "dropout": 0.0}


@pytest.fixture(scope="module")
def data():
    return synthesize_dataset(SynthSpec(counts={r: 7 for r in REGIONS}), seed=11)


def quick(**kw):
    opts = dict(batch_size=8, max_epochs=1, max_steps=4, min_freq=1, model=SMALL_MODEL, eval_every=1)
    opts.update(kw)
    return TrainConfig(**opts)


@pytest.fixture(scope="module")
def trained(data):
    return train(quick(max_steps=6, max_epochs=2), data, KB)


def test_config_aliases_and_validation():
    cfg = TrainConfig.from_dict({"lambda": 0.5, "ablation": "radka"})
    assert cfg.lam == 0.5
    with pytest.raises(ValueError, match="unknown ablation"):
        TrainConfig(ablation="foo")
    with pytest.raises(ValueError, match="unknown train config keys"):
        TrainConfig.from_dict({"lr": 1})
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.1)


def test_ablation_model_configs():
    modes = {a: TrainConfig(ablation=a).model_config(20) for a in ABLATIONS}
    assert modes["base"].knowledge == "none" and not modes["base"].ipg
    assert modes["radka_star"].knowledge == "full" and not modes["radka_star"].ipg
    assert modes["radka"].knowledge == "region" and not modes["radka"].ipg
    assert modes["s4m"].knowledge == "region" and modes["s4m"].ipg
    assert modes["radka"].lam == 0.0


def test_ablation_parameters_nest():
    keys = {}
    for a in ABLATIONS:
        cfg = quick(ablation=a).model_config(30)
        keys[a] = set(S4M(cfg, KB).state_dict())
    assert keys["base"] < keys["radka"] < keys["s4m"]
    assert keys["radka_star"] == keys["radka"]
    assert all(k.startswith("ipg.") for k in keys["s4m"] - keys["radka"])


def test_training_log(tmp_path, data):
    log = tmp_path / "train.jsonl"
    seen = []
    train(quick(), data, KB, log_path=log, on_step=seen.append)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(rows) == 4 == len(seen)
    for row in rows:
        assert set(row) == {"step", "epoch", "gen_loss", "ctr_loss", "joint", "lr"}
        assert row["joint"] == pytest.approx(row["gen_loss"] + row["ctr_loss"], rel=1e-5)
        assert row["lr"] == [5e-5, 1e-4]


def test_lambda_zero_and_base_have_no_contrastive_term(data):
    for cfg in (quick(lam=0.0), quick(ablation="base")):
        ckpt = train(cfg, data, KB)
        assert all(r["ctr_loss"] == 0.0 for r in ckpt.history if "joint" in r)


def test_deterministic_runs(data):
    a = train(quick(max_steps=20, max_epochs=5, select_best=False), data, KB)
    b = train(quick(max_steps=20, max_epochs=5, select_best=False), data, KB)
    assert [r.get("joint") for r in a.history] == [r.get("joint") for r in b.history]
    for (ka, va), (kb_, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb_ and torch.equal(va, vb)


def test_loss_decreases(data):
    ckpt = train(quick(max_steps=30, max_epochs=20, lr_encoders=1e-3, lr_rest=2e-3, select_best=False), data, KB)
    losses = [r["gen_loss"] for r in ckpt.history if "gen_loss" in r]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_best_val_selection_recorded(trained):
    vals = [r["val_bleu4"] for r in trained.history if "val_bleu4" in r]
    assert vals and trained.best_val_bleu4 == max(vals)


def test_checkpoint_roundtrip(tmp_path, data, trained):
    path = save_checkpoint(trained, tmp_path / "m.s4m")
    back = load_checkpoint(path)
    assert back.vocab == trained.vocab
    assert back.model.config == trained.model.config
    assert back.train_config == trained.train_config
    sa, sb = trained.model.state_dict(), back.model.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k
    x = images_to_tensor(np.stack([ex.images for ex in data.test]))
    tags = [ex.tag for ex in data.test]
    assert generate_batch(trained.model, trained.vocab, x, tags) == generate_batch(back.model, back.vocab, x, tags)


def test_stripped_checkpoint_generates_identically(tmp_path, data, trained):
    path = save_checkpoint(trained, tmp_path / "lean.s4m", strip_ipg_heads=True)
    back = load_checkpoint(path)
    assert not back.model.has_ipg
    x = images_to_tensor(np.stack([ex.images for ex in data.test]))
    tags = [ex.tag for ex in data.test]
    assert generate_batch(trained.model, trained.vocab, x, tags) == generate_batch(back.model, back.vocab, x, tags)
    ex = data.test[0]
    with pytest.raises(RuntimeError, match="no alignment heads"):
        alignment_score(back.model, back.vocab, ex.images, ex.report)
    score = alignment_score(trained.model, trained.vocab, ex.images, ex.report)
    assert -1.0 <= score <= 1.0


def test_truncated_checkpoint(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "m.s4m")
    blob = path.read_bytes()
    bad = tmp_path / "bad.s4m"
    bad.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.s4m")


def test_format_mismatch(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "m.s4m")
    other = tmp_path / "old.s4m"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(other, "w") as dst:
        for name in src.namelist():
            dst.writestr(name, "s4m-ckpt-v0" if name == "FORMAT" else src.read(name))
    with pytest.raises(CheckpointError, match=CHECKPOINT_FORMAT):
        load_checkpoint(other)


def test_checkpoint_without_train_config(tmp_path, trained):
    ckpt = Checkpoint(trained.model, trained.vocab)
    back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "m.s4m"))
    assert back.train_config is None


def test_external_vocab_used(data):
    vocab = build_vocab([ex.report for ex in data.examples], 1)
    ckpt = train(quick(max_steps=1), data, KB, vocab=vocab)
    assert ckpt.vocab is vocab and ckpt.model.config.vocab_size == len(vocab)
