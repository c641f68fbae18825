"""Reuse a backbone trained on a big city to price a small one.

``python demos/02_cross_city_transfer.py [--source-epochs N] [--epochs N]``
"""
# %%
import argparse
from collections import Counter

from hfthlf.protocol import TrainConfig, finetune_transfer, fit_supervised, scratch_baseline
from hfthlf.synth import generate_universe

parser = argparse.ArgumentParser()
parser.add_argument("--source-epochs", type=int, default=15)
parser.add_argument("--epochs", type=int, default=60)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

# %%
universe = generate_universe()
source_records, target_records = universe["Source"], universe["Target"]
per_res = Counter(r.residence for r in target_records)
print(f"source: {len(source_records)} listings; target: {len(target_records)} listings in {len(per_res)} residences")

# %% [markdown]
# Train on the source city first. The backbone learns how area, floor,
# build year and the categorical attributes move the log price; none of
# that depends on which city the listing is in.

# %%
source, _ = fit_supervised(source_records, "hft_hlf", TrainConfig.for_tier(1, epochs=args.source_epochs))
print("source model trained on", source.vocab.city)

# %% [markdown]
# Fine-tune on k listings per target residence. The backbone stays frozen,
# so only the head (which also sees the target's own location one-hots) is
# trained. A model trained from scratch on the same few rows is the
# reference point.

# %%
config = TrainConfig.for_tier(3, epochs=args.epochs, seed=args.seed)
for k in (5, 10, 15):
    result = finetune_transfer(source, target_records, k, config)
    line = f"k={k:2d}: {len(result.finetune_records):3d} fine-tune rows, transfer r2={result.report.r2:.3f}"
    if k == 10:
        line += f", from scratch r2={scratch_baseline(result, config).r2:.3f}"
    print(line)

# %% [markdown]
# The source checkpoint is untouched by fine-tuning: the transferred model
# holds its own copy of the backbone weights.
