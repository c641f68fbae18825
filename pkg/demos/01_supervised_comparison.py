"""Side-by-side fit of the split-input network and the single-stack baseline.

Run with ``python demos/01_supervised_comparison.py [--epochs N]``. The
default epoch count keeps it under a minute; pass ``--epochs 250`` for the
full schedule.
"""
# %%
import argparse

import numpy as np

from hfthlf.ingest import split_train_test
from hfthlf.protocol import TrainConfig, evaluate, fit_supervised
from hfthlf.synth import UniverseSpec, generate_universe

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

# %% [markdown]
# Generate the default two-city universe and keep the larger city. Its
# listings share one price law for the physical attributes, plus a district
# and a residence offset that only the location one-hots can explain.

# %%
universe = generate_universe(UniverseSpec())
records = universe["Source"]
prices = np.array([r.price for r in records])
print(f"{len(records)} listings, median price {np.median(prices):,.0f}")
print(f"log-price spread: {np.log(prices).std():.3f}")

# %%
train, test = split_train_test(records, 0.1, args.seed)
config = TrainConfig.for_tier(3, epochs=args.epochs, seed=args.seed)
print(f"train {len(train)} / test {len(test)}, lr={config.learning_rate}, batch={config.batch_size}")

# %% [markdown]
# Both models see the same features. The split-input model routes the
# physical attributes through a backbone and joins the location one-hots
# in a second stack; the baseline concatenates everything up front.

# %%
results = {}
for kind in ("traditional", "hft_hlf"):
    ckpt, history = fit_supervised(train, kind, config)
    results[kind] = evaluate(ckpt, test)
    print(f"{kind:12s} final train loss {history[-1]:.4f}  "
          f"r2={results[kind].r2:.3f} rmse={results[kind].rmse:.3f} mape={results[kind].mape:.3f}")

# %% [markdown]
# Batch-norm running statistics are collected while dropout is active. The
# ``recalibrate_bn`` option re-estimates them in inference mode once
# training ends, which usually lifts the split-input model noticeably.

# %%
recal = TrainConfig.for_tier(3, epochs=args.epochs, seed=args.seed, recalibrate_bn=True)
ckpt, _ = fit_supervised(train, "hft_hlf", recal)
print(f"hft_hlf with recalibrated batch norm: r2={evaluate(ckpt, test).r2:.3f}")
