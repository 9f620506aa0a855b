# %% [markdown]
# # Train, generate, evaluate
#
# A short S4M run on a small corpus, then greedy and beam decoding and the
# per-region metric table. Takes a few minutes on one CPU core.

# %%
import numpy as np

from s4m.dataset import SynthSpec, images_to_tensor, synthesize_dataset
from s4m.generator import generate_batch
from s4m.knowledge import REGIONS, load_knowledge
from s4m.metrics import evaluate_reports
from s4m.metrics.probe import alignment_score
from s4m.trainer import TrainConfig, save_checkpoint, train

ds = synthesize_dataset(SynthSpec(counts={r: 60 for r in REGIONS}), seed=0)
config = TrainConfig(batch_size=16, max_epochs=8, lr_encoders=5e-4, lr_rest=1e-3, eval_every=2, min_freq=1)
ckpt = train(config, ds, load_knowledge(), on_step=lambda r: r["step"] % 50 or print(r))
print("best val BLEU-4", ckpt.best_val_bleu4)

# %% greedy vs beam on the test split
test = ds.test
images = images_to_tensor(np.stack([ex.images for ex in test]))
tags = [ex.tag for ex in test]
greedy = generate_batch(ckpt.model, ckpt.vocab, images, tags)
beam = generate_batch(ckpt.model, ckpt.vocab, images, tags, beam_size=3)
for ex, g, b in list(zip(test, greedy, beam))[:3]:
    print(f"[{ex.tag.value}]\n  ref:    {ex.report}\n  greedy: {g}\n  beam-3: {b}")

# %% per-region metric table
report = evaluate_reports(greedy, [[ex.report] for ex in test], tags)
print(report.to_table())

# %% the alignment heads score matched pairs above mismatched ones
ex, other = test[0], next(e for e in test if e.tag != test[0].tag)
print("matched   ", alignment_score(ckpt.model, ckpt.vocab, ex.images, ex.report))
print("mismatched", alignment_score(ckpt.model, ckpt.vocab, ex.images, other.report))

# %% drop the training-only heads for deployment; generation is unchanged
save_checkpoint(ckpt, "s4m_lean.s4m", strip_ipg_heads=True)
