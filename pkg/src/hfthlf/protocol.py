"""Training loop, metrics and the experiment protocols.

* supervised single-city evaluation over repeated random 90/10 splits;
* cross-city transfer: train on a source city, copy the backbone, fine-tune a
  fresh head on at most ``k`` records per target residence, test on held-out
  target records.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .encode import EncodedDataset, FeatureLayout, encode_dataset, fit_normalizer
from .ingest import PropertyRecord, build_vocabulary, split_train_test
from .model import (
    HFT_HLF,
    KindMismatch,
    ModelCheckpoint,
    build_model,
    predict_standardized,
    transfer_backbone,
)
from .neural import DROPOUT_RATE, Mode, OptimState, ShapeMismatch, adam_amsgrad_step, mse_loss

logger = logging.getLogger(__name__)

TIER_PRESETS = {
    1: (0.005, 256),
    2: (0.01, 128),
    3: (0.02, 64),
}
EPOCHS = 250
TEST_FRACTION = 0.1


class EmptyDataset(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class TooFewSamples(ValueError):
    pass


class ZeroVarianceTargets(ValueError):
    pass


class FineTuneSetEmpty(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int = EPOCHS
    seed: int = 42
    # Off by default. When set, batch-norm running statistics are recomputed
    # on the full training set with dropout disabled once training ends.
    recalibrate_bn: bool = False
    # Off by default. When set, a final mini-batch smaller than half the batch
    # size is folded into the previous batch instead of taking its own step.
    merge_short_batch: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    @classmethod
    def for_tier(cls, tier: int, epochs: int = EPOCHS, seed: int = 42, **options) -> "TrainConfig":
        """Preset learning rate and batch size; ``options`` sets the opt-in flags."""
        try:
            lr, batch = TIER_PRESETS[tier]
        except KeyError:
            raise ValueError(f"tier must be one of {sorted(TIER_PRESETS)}, got {tier}") from None
        return cls(lr, batch, epochs, seed, **options)

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mape: float
    r2: float
    n: int

    # where each metric is computed
    SPACES = {"rmse": "standardized_log_price", "mape": "price", "r2": "standardized_log_price"}

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mape": self.mape, "r2": self.r2, "n": self.n, "spaces": dict(self.SPACES)}

    @classmethod
    def mean(cls, reports: Sequence["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ValueError("no reports to average")
        k = len(reports)
        return cls(
            rmse=sum(r.rmse for r in reports) / k,
            mape=sum(r.mape for r in reports) / k,
            r2=sum(r.r2 for r in reports) / k,
            n=sum(r.n for r in reports),
        )


def compute_metrics(
    pred_target: np.ndarray,
    true_target: np.ndarray,
    pred_price: np.ndarray,
    true_price: np.ndarray,
) -> MetricsReport:
    """RMSE and R² on standardized log targets; MAPE (as a fraction) on prices."""
    t_hat = np.asarray(pred_target, dtype=np.float64)
    t = np.asarray(true_target, dtype=np.float64)
    p_hat = np.asarray(pred_price, dtype=np.float64)
    p = np.asarray(true_price, dtype=np.float64)
    n = t.size
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples for R², got {n}")
    if not (t_hat.shape == t.shape == p_hat.shape == p.shape):
        raise ShapeMismatch("prediction and target arrays differ in shape")
    resid = t_hat - t
    ss_res = float(np.dot(resid, resid))
    dev = t - t.mean()
    ss_tot = float(np.dot(dev, dev))
    if ss_tot == 0.0:
        raise ZeroVarianceTargets("R² is undefined for constant targets")
    return MetricsReport(
        rmse=math.sqrt(ss_res / n),
        mape=float(np.mean(np.abs(p_hat - p) / p)),
        r2=1.0 - ss_res / ss_tot,
        n=n,
    )


def evaluate(ckpt: ModelCheckpoint, records: Sequence[PropertyRecord]) -> MetricsReport:
    data = encode_dataset(records, ckpt.norm, ckpt.layout)
    if len(data) < 2:
        raise TooFewSamples(f"need at least 2 records to evaluate, got {len(data)}")
    t_hat = predict_standardized(ckpt.model, data.homog, data.heterog)
    norm = ckpt.norm
    p_hat = np.exp(t_hat * norm.target_std + norm.target_mean)
    p = np.array([r.price for r in records], dtype=np.float64)
    return compute_metrics(t_hat, data.target, p_hat, p)


# ----------------------------------------------------------------------------
# training


def minibatch_indices(
    n: int, batch_size: int, rng: np.random.Generator, merge_short: bool = False
) -> list[np.ndarray]:
    """Shuffled mini-batches; a final short batch is kept only if it has >= 2 rows.

    With ``merge_short`` a final batch under half of ``batch_size`` is appended
    to the one before it, so every row is still seen once per epoch.
    """
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if merge_short and len(batches) > 1 and 2 * len(batches[-1]) < batch_size:
        last = batches.pop()
        batches[-1] = perm[len(perm) - len(last) - batch_size :]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def train(model, data: EncodedDataset, config: TrainConfig, rng: np.random.Generator | None = None):
    """Mini-batch AMSGrad on the MSE of standardized targets.

    Only the model's trainable parameters are updated (a frozen backbone is
    left untouched). With ``config.recalibrate_bn`` the batch-norm running
    statistics of the trained stacks are recomputed at the end. Returns ``(model, per-epoch mean training loss)``.
    """
    n = len(data)
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if n < 2:
        raise EmptyDataset("need at least 2 rows for a batch-normalized training step")
    if data.homog.shape[1] != model.homog_dim or data.heterog.shape[1] != model.heterog_dim:
        raise ShapeMismatch(
            f"dataset widths {data.homog.shape[1]}/{data.heterog.shape[1]} "
            f"do not match model {model.homog_dim}/{model.heterog_dim}"
        )
    if rng is None:
        rng = np.random.default_rng(config.seed)
    params, grads = model.trainable()
    opt = OptimState.for_params(params, config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        total, seen = 0.0, 0
        for idx in minibatch_indices(n, config.batch_size, rng, config.merge_short_batch):
            pred = model.forward(data.homog[idx], data.heterog[idx], Mode.TRAIN, rng)
            loss, grad = mse_loss(pred[:, 0], data.target[idx])
            model.backward(grad[:, None])
            adam_amsgrad_step(params, grads, opt)
            total += loss * len(idx)
            seen += len(idx)
        epoch_loss = total / seen
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
        history.append(epoch_loss)
    if config.recalibrate_bn:
        model.recompute_bn_stats(data.homog, data.heterog)
    return model, history


def _seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def fit_supervised(
    records: Sequence[PropertyRecord],
    kind: str,
    config: TrainConfig,
    dropout_rate: float = DROPOUT_RATE,
) -> tuple[ModelCheckpoint, list[float]]:
    """Fit vocabulary, normalizer and a fresh model of ``kind`` on ``records``."""
    if not records:
        raise EmptyDataset("no training records")
    vocab = build_vocabulary(records)
    norm = fit_normalizer(records)
    layout = FeatureLayout.from_vocabularies(vocab)
    data = encode_dataset(records, norm, layout)
    init_rng, train_rng = _seed_streams(config.seed, 2)
    model = build_model(kind, layout.homog_dim, layout.heterog_dim, init_rng, dropout_rate)
    _, history = train(model, data, config, train_rng)
    meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "recalibrate_bn": config.recalibrate_bn,
        "merge_short_batch": config.merge_short_batch,
        "source_city": vocab.city,
        "n_train": len(records),
    }
    return ModelCheckpoint(model, norm, vocab, layout, meta), history


@dataclass
class CVResult:
    mean: MetricsReport
    folds: list[MetricsReport]

    def to_dict(self) -> dict:
        return {"mean": self.mean.to_dict(), "folds": [f.to_dict() for f in self.folds]}


def monte_carlo_cv(
    records: Sequence[PropertyRecord],
    kind: str,
    config: TrainConfig,
    n_folds: int = 10,
    test_fraction: float = TEST_FRACTION,
    dropout_rate: float = DROPOUT_RATE,
) -> CVResult:
    """Average metrics over ``n_folds`` independent random train/test splits.

    Fold ``i`` (1-based) splits with seed ``config.seed + i`` and fits
    everything on its training part only.
    """
    folds = []
    for i in range(1, n_folds + 1):
        train_recs, test_recs = split_train_test(records, test_fraction, config.seed + i)
        ckpt, _ = fit_supervised(train_recs, kind, config.with_seed(config.seed + i), dropout_rate)
        report = evaluate(ckpt, test_recs)
        logger.info("fold %d/%d: %s", i, n_folds, report)
        folds.append(report)
    return CVResult(MetricsReport.mean(folds), folds)


# ----------------------------------------------------------------------------
# transfer


def sample_k_per_residence(
    records: Sequence[PropertyRecord], k: int, rng: np.random.Generator
) -> list[PropertyRecord]:
    """At most ``k`` records from each residence, drawn without replacement.

    Residences are visited in sorted order and each draws one permutation of
    its records, so for a fixed rng state the samples for increasing ``k``
    are nested. The result keeps input order.
    """
    return [records[i] for i in sample_k_indices(records, k, rng)]


def sample_k_indices(records: Sequence[PropertyRecord], k: int, rng: np.random.Generator) -> list[int]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(records):
        groups[rec.residence].append(i)
    chosen = []
    for residence in sorted(groups):
        idx = groups[residence]
        perm = rng.permutation(len(idx))
        chosen.extend(idx[j] for j in perm[:k])
    chosen.sort()
    return chosen


@dataclass
class TransferResult:
    checkpoint: ModelCheckpoint
    report: MetricsReport
    finetune_records: list[PropertyRecord]
    test_records: list[PropertyRecord]
    history: list[float] = field(default_factory=list)
    k: int | None = None

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "finetune_size": len(self.finetune_records),
            "test_size": len(self.test_records),
            "metrics": self.report.to_dict(),
        }


def _pick_test(n_total: int, excluded: set[int], test_fraction: float, rng: np.random.Generator) -> list[int]:
    n_test = int(math.floor(test_fraction * n_total + 0.5))
    picked = [i for i in rng.permutation(n_total).tolist() if i not in excluded][:n_test]
    return sorted(picked)


def finetune_transfer(
    source: ModelCheckpoint,
    target_records: Sequence[PropertyRecord],
    k: int | None,
    config: TrainConfig,
    freeze_backbone: bool = True,
    test_fraction: float = TEST_FRACTION,
) -> TransferResult:
    """Transfer ``source``'s backbone to the target city and fine-tune.

    With an integer ``k`` the fine-tuning set holds at most ``k`` records per
    residence and the test set is ``round(test_fraction * N)`` records drawn
    from the rest. With ``k=None`` the test set is drawn first and every other
    record is used for fine-tuning.
    """
    if source.kind != HFT_HLF:
        raise KindMismatch(f"source checkpoint is {source.kind!r}, expected {HFT_HLF!r}")
    if not target_records:
        raise EmptyDataset("no target records")
    sample_rng, test_rng, init_rng, train_rng = _seed_streams(config.seed, 4)
    n = len(target_records)
    if k is None:
        test_idx = _pick_test(n, set(), test_fraction, test_rng)
        excluded = set(test_idx)
        finetune = [r for i, r in enumerate(target_records) if i not in excluded]
    else:
        ft_idx = sample_k_indices(target_records, k, sample_rng)
        finetune = [target_records[i] for i in ft_idx]
        test_idx = _pick_test(n, set(ft_idx), test_fraction, test_rng)
    if not finetune:
        raise FineTuneSetEmpty("fine-tuning set is empty")
    test = [target_records[i] for i in test_idx]

    vocab = build_vocabulary(finetune)
    layout = source.layout.with_location(vocab)
    model = transfer_backbone(source, layout.heterog_dim, init_rng)
    model.backbone_frozen = freeze_backbone
    # homogeneous statistics stay those of the source; the target scale is the
    # target city's own
    target_stats = fit_normalizer(finetune)
    norm = source.norm.with_target(target_stats.target_mean, target_stats.target_std)
    data = encode_dataset(finetune, norm, layout)
    _, history = train(model, data, config, train_rng)
    meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "recalibrate_bn": config.recalibrate_bn,
        "merge_short_batch": config.merge_short_batch,
        "source_city": source.meta.get("source_city", source.vocab.city),
        "target_city": vocab.city,
        "k": k,
        "finetune_size": len(finetune),
        "backbone_frozen": freeze_backbone,
    }
    ckpt = ModelCheckpoint(model, norm, vocab, layout, meta)
    report = evaluate(ckpt, test)
    return TransferResult(ckpt, report, finetune, test, history, k)


def run_transfer_experiment(
    source_records: Sequence[PropertyRecord],
    target_records: Sequence[PropertyRecord],
    k: int | None,
    source_config: TrainConfig,
    target_config: TrainConfig,
    freeze_backbone: bool = True,
) -> TransferResult:
    """Train HFT+HLF on the whole source city, then :func:`finetune_transfer`."""
    source, _ = fit_supervised(source_records, HFT_HLF, source_config)
    return finetune_transfer(source, target_records, k, target_config, freeze_backbone)


def scratch_baseline(result: TransferResult, config: TrainConfig) -> MetricsReport:
    """Fresh HFT+HLF trained on the same fine-tuning set, scored on the same test set."""
    ckpt, _ = fit_supervised(result.finetune_records, HFT_HLF, config)
    return evaluate(ckpt, result.test_records)
