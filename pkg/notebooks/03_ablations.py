# %% [markdown]
# # Component ablation, probing and the lambda sweep
#
# Base (no knowledge), RadKA (region-selected knowledge) and S4M (RadKA plus
# the alignment heads) on the 600-example synthetic corpus, three seeds.
# Every run is cached, so re-running this script is cheap once the runs
# exist. Cold, it needs a bit over an hour on one CPU core.

# %%
import logging
import os

import numpy as np

from s4m.experiments import ablation_corpus, run_variant

logging.basicConfig(level=logging.INFO)
cache = os.environ.get("S4M_CACHE_DIR", "runs/cache")
ds = ablation_corpus(0)
seeds = (0, 1, 2)

# %% ablation table
rows = {}
for variant in ("base", "radka", "s4m"):
    rows[variant] = [run_variant(ds, variant, s, cache_dir=cache) for s in seeds]
print(f"{'variant':<8}{'B4 mean':>9}  per seed")
for variant, results in rows.items():
    b4 = [r.test_bleu4 for r in results]
    print(f"{variant:<8}{np.mean(b4):>9.4f}  {np.round(b4, 4)}")

# %% linear probe on frozen encoder features: with vs without alignment heads
for variant in ("radka", "s4m"):
    print(variant, [round(r.probe_auc, 4) for r in rows[variant]])

# %% lambda sweep for S4M
for lam in (0.5, 1.0, 1.5):
    b4 = [run_variant(ds, "s4m", s, lam=lam, cache_dir=cache).test_bleu4 for s in seeds]
    print(f"lambda={lam}: {np.round(b4, 4)} mean {np.mean(b4):.4f}")
