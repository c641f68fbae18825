"""HFT+HLF network, the plain-ANN baseline, backbone transfer and checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encode import FeatureLayout, NormStats, decode_target, encode_dataset
from .ingest import CityVocabulary, PropertyRecord
from .neural import (
    DROPOUT_RATE,
    LEAKY_SLOPE,
    BatchNormState,
    BatchTooSmall,
    DenseParams,
    Mode,
    ShapeMismatch,
    batchnorm_backward,
    batchnorm_forward,
    dense_backward,
    dense_forward,
    dropout,
    dropout_backward,
    he_init,
    leaky_relu,
    leaky_relu_backward,
)

BACKBONE_WIDTHS = (200, 100, 50, 20, 10)
HEAD_WIDTHS = (100, 50, 20, 10)
TRADITIONAL_WIDTHS = BACKBONE_WIDTHS

CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".hfthlf.json"
HFT_HLF = "hft_hlf"
TRADITIONAL = "traditional"


class BadDim(ValueError):
    pass


class KindMismatch(ValueError):
    pass


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class DenseStack:
    """Hidden blocks (dense -> batch norm -> leaky ReLU -> dropout), optionally
    followed by a linear output layer.

    All trainable parameters are views into one flat ``params`` vector, and
    their gradients into a matching ``grads`` vector, so the optimizer can
    update a whole stack with a handful of array operations.
    """

    def __init__(
        self,
        in_dim: int,
        widths: Sequence[int],
        out_dim: int | None,
        rng: np.random.Generator | None = None,
        dropout_rate: float = DROPOUT_RATE,
        slope: float = LEAKY_SLOPE,
    ):
        if in_dim < 1 or any(w < 1 for w in widths) or (out_dim is not None and out_dim < 1):
            raise BadDim(f"layer dims must be >= 1: in={in_dim} widths={tuple(widths)} out={out_dim}")
        self.in_dim = in_dim
        self.widths = tuple(int(w) for w in widths)
        self.out_dim = out_dim
        self.dropout_rate = dropout_rate
        self.slope = slope

        shapes = []
        prev = in_dim
        for w in self.widths:
            shapes += [(w, prev), (w,), (w,), (w,)]
            prev = w
        if out_dim is not None:
            shapes += [(out_dim, prev), (out_dim,)]
        total = sum(int(np.prod(s)) for s in shapes)
        self.params = np.zeros(total)
        self.grads = np.zeros(total)

        views, grad_views = [], []
        pos = 0
        for s in shapes:
            size = int(np.prod(s))
            views.append(self.params[pos : pos + size].reshape(s))
            grad_views.append(self.grads[pos : pos + size].reshape(s))
            pos += size

        self.dense: list[DenseParams] = []
        self.dense_grads: list[DenseParams] = []
        self.bn: list[BatchNormState] = []
        self._bn_grads: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(len(self.widths)):
            w, b, gamma, beta = views[4 * i : 4 * i + 4]
            gw, gb, ggamma, gbeta = grad_views[4 * i : 4 * i + 4]
            self.dense.append(DenseParams(w, b))
            self.dense_grads.append(DenseParams(gw, gb))
            gamma[...] = 1.0
            width = self.widths[i]
            self.bn.append(BatchNormState(gamma, beta, np.zeros(width), np.ones(width)))
            self._bn_grads.append((ggamma, gbeta))
        self.output: DenseParams | None = None
        self.output_grad: DenseParams | None = None
        if out_dim is not None:
            self.output = DenseParams(views[-2], views[-1])
            self.output_grad = DenseParams(grad_views[-2], grad_views[-1])

        if rng is not None:
            self.initialize(rng)
        self._cache = None

    @property
    def out_width(self) -> int:
        return self.out_dim if self.out_dim is not None else self.widths[-1]

    def dense_layers(self) -> list[DenseParams]:
        return self.dense + ([self.output] if self.output is not None else [])

    def initialize(self, rng: np.random.Generator) -> None:
        """He-initialize every dense layer in order; bias 0, gamma 1, beta 0."""
        for layer in self.dense_layers():
            fresh = he_init(layer.weight.shape[1], layer.weight.shape[0], rng)
            layer.weight[...] = fresh.weight
            layer.bias[...] = fresh.bias
        for bn in self.bn:
            bn.gamma[...] = 1.0
            bn.beta[...] = 0.0

    def n_params(self) -> int:
        return self.params.size

    def forward(
        self,
        x: np.ndarray,
        mode: Mode,
        rng: np.random.Generator | None = None,
        keep_cache: bool = True,
    ) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"stack expects width {self.in_dim}, got array of shape {x.shape}")
        cache = []
        h = x
        for dense, bn in zip(self.dense, self.bn):
            z = dense_forward(dense, h)
            a, bn_cache = batchnorm_forward(bn, z, mode)
            r = leaky_relu(a, self.slope)
            out, mask = dropout(r, self.dropout_rate, mode, rng)
            cache.append((h, bn_cache, a, mask))
            h = out
        if self.output is not None:
            cache.append(h)
            h = dense_forward(self.output, h)
        self._cache = cache if keep_cache else None
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Backpropagate through the last training-mode forward pass.

        Parameter gradients are written into ``self.grads``; the gradient
        with respect to the stack input is returned.
        """
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward() with keep_cache=True")
        cache = list(self._cache)
        g = grad_out
        if self.output is not None:
            h = cache.pop()
            g, pg = dense_backward(self.output, h, g)
            self.output_grad.weight[...] = pg.weight
            self.output_grad.bias[...] = pg.bias
        for i in range(len(self.dense) - 1, -1, -1):
            h, bn_cache, a, mask = cache[i]
            if bn_cache is None:
                raise RuntimeError("backward() through an inference-mode pass")
            g = dropout_backward(g, mask)
            g = leaky_relu_backward(a, g, self.slope)
            g, ggamma, gbeta = batchnorm_backward(self.bn[i], bn_cache, g)
            self._bn_grads[i][0][...] = ggamma
            self._bn_grads[i][1][...] = gbeta
            g, pg = dense_backward(self.dense[i], h, g)
            self.dense_grads[i].weight[...] = pg.weight
            self.dense_grads[i].bias[...] = pg.bias
        return g

    def copy(self) -> "DenseStack":
        other = DenseStack(self.in_dim, self.widths, self.out_dim, None, self.dropout_rate, self.slope)
        other.params[...] = self.params
        for dst, src in zip(other.bn, self.bn):
            dst.running_mean[...] = src.running_mean
            dst.running_var[...] = src.running_var
            dst.momentum, dst.eps = src.momentum, src.eps
        return other

    def bn_running_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(bn.running_mean, bn.running_var) for bn in self.bn]

    def recompute_bn_stats(self, x: np.ndarray) -> np.ndarray:
        """Replace every running mean/variance by the statistics of ``x``
        propagated through the stack without dropout. Returns the stack output.

        During training each batch norm sees inputs thinned by the preceding
        dropout, so its running variance is inflated relative to inference.
        """
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"stack expects width {self.in_dim}, got array of shape {x.shape}")
        if x.shape[0] < 2:
            raise BatchTooSmall("need at least 2 rows to estimate batch-norm statistics")
        h = x
        for dense, bn in zip(self.dense, self.bn):
            z = dense_forward(dense, h)
            bn.running_mean[...] = z.mean(axis=0)
            bn.running_var[...] = z.var(axis=0, ddof=1)
            a, _ = batchnorm_forward(bn, z, Mode.INFER)
            h = leaky_relu(a, self.slope)
        if self.output is not None:
            h = dense_forward(self.output, h)
        return h


def stack_param_count(in_dim: int, widths: Sequence[int], out_dim: int | None) -> int:
    """Closed-form trainable parameter count of a :class:`DenseStack`."""
    total, prev = 0, in_dim
    for w in widths:
        total += w * prev + w + 2 * w  # weights, bias, gamma, beta
        prev = w
    if out_dim is not None:
        total += out_dim * prev + out_dim
    return total


class HftHlfModel:
    """Transferable backbone over homogeneous features, whose 10-wide output is
    concatenated with the heterogeneous location one-hots and fed to a head."""

    kind = HFT_HLF

    def __init__(self, backbone: DenseStack, head: DenseStack, backbone_frozen: bool = False):
        if head.in_dim <= backbone.out_width:
            raise BadDim("head input must be wider than the backbone output")
        self.backbone = backbone
        self.head = head
        self.backbone_frozen = backbone_frozen

    @property
    def homog_dim(self) -> int:
        return self.backbone.in_dim

    @property
    def heterog_dim(self) -> int:
        return self.head.in_dim - self.backbone.out_width

    def forward(
        self, homog: np.ndarray, heterog: np.ndarray, mode: Mode, rng: np.random.Generator | None = None
    ) -> np.ndarray:
        _check_batch(homog, heterog, self.homog_dim, self.heterog_dim)
        if self.backbone_frozen:
            # frozen backbone: running statistics, no dropout, no state change
            rep = self.backbone.forward(homog, Mode.INFER, keep_cache=False)
        else:
            rep = self.backbone.forward(homog, mode, rng)
        return self.head.forward(np.concatenate([rep, heterog], axis=1), mode, rng)

    def backward(self, grad_out: np.ndarray) -> None:
        g = self.head.backward(grad_out)
        if not self.backbone_frozen:
            self.backbone.backward(g[:, : self.backbone.out_width])

    def trainable(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        stacks = [self.head] if self.backbone_frozen else [self.backbone, self.head]
        return [s.params for s in stacks], [s.grads for s in stacks]

    def stacks(self) -> dict[str, DenseStack]:
        return {"backbone": self.backbone, "head": self.head}

    def recompute_bn_stats(self, homog: np.ndarray, heterog: np.ndarray) -> None:
        """See :meth:`DenseStack.recompute_bn_stats`. A frozen backbone keeps its statistics."""
        _check_batch(homog, heterog, self.homog_dim, self.heterog_dim)
        if self.backbone_frozen:
            rep = self.backbone.forward(homog, Mode.INFER, keep_cache=False)
        else:
            rep = self.backbone.recompute_bn_stats(homog)
        self.head.recompute_bn_stats(np.concatenate([rep, heterog], axis=1))

    def n_params(self) -> int:
        return self.backbone.n_params() + self.head.n_params()


class TraditionalModel:
    """One dense stack over the concatenated homogeneous and location features."""

    kind = TRADITIONAL

    def __init__(self, stack: DenseStack, homog_dim: int):
        if not 1 <= homog_dim < stack.in_dim:
            raise BadDim("homogeneous width must leave at least one location column")
        self.stack = stack
        self._homog_dim = homog_dim

    @property
    def homog_dim(self) -> int:
        return self._homog_dim

    @property
    def heterog_dim(self) -> int:
        return self.stack.in_dim - self._homog_dim

    def forward(self, homog, heterog, mode: Mode, rng=None) -> np.ndarray:
        _check_batch(homog, heterog, self.homog_dim, self.heterog_dim)
        return self.stack.forward(np.concatenate([homog, heterog], axis=1), mode, rng)

    def backward(self, grad_out: np.ndarray) -> None:
        self.stack.backward(grad_out)

    def trainable(self):
        return [self.stack.params], [self.stack.grads]

    def stacks(self) -> dict[str, DenseStack]:
        return {"stack": self.stack}

    def recompute_bn_stats(self, homog: np.ndarray, heterog: np.ndarray) -> None:
        _check_batch(homog, heterog, self.homog_dim, self.heterog_dim)
        self.stack.recompute_bn_stats(np.concatenate([homog, heterog], axis=1))

    def n_params(self) -> int:
        return self.stack.n_params()


def _check_batch(homog, heterog, homog_dim, heterog_dim):
    if homog.ndim != 2 or heterog.ndim != 2 or homog.shape[0] != heterog.shape[0]:
        raise ShapeMismatch(f"batch shapes {homog.shape} and {heterog.shape} do not line up")
    if homog.shape[1] != homog_dim or heterog.shape[1] != heterog_dim:
        raise ShapeMismatch(
            f"expected widths {homog_dim}/{heterog_dim}, got {homog.shape[1]}/{heterog.shape[1]}"
        )


def build_hft_hlf(
    homog_dim: int,
    heterog_dim: int,
    rng: np.random.Generator,
    dropout_rate: float = DROPOUT_RATE,
    backbone_widths: Sequence[int] = BACKBONE_WIDTHS,
    head_widths: Sequence[int] = HEAD_WIDTHS,
) -> HftHlfModel:
    if homog_dim < 1 or heterog_dim < 1:
        raise BadDim(f"feature dims must be >= 1, got {homog_dim}/{heterog_dim}")
    backbone = DenseStack(homog_dim, backbone_widths, None, rng, dropout_rate)
    head = DenseStack(backbone.out_width + heterog_dim, head_widths, 1, rng, dropout_rate)
    return HftHlfModel(backbone, head)


def build_traditional(
    homog_dim: int,
    heterog_dim: int,
    rng: np.random.Generator,
    dropout_rate: float = DROPOUT_RATE,
    widths: Sequence[int] = TRADITIONAL_WIDTHS,
) -> TraditionalModel:
    if homog_dim < 1 or heterog_dim < 1:
        raise BadDim(f"feature dims must be >= 1, got {homog_dim}/{heterog_dim}")
    return TraditionalModel(DenseStack(homog_dim + heterog_dim, widths, 1, rng, dropout_rate), homog_dim)


def build_model(kind: str, homog_dim: int, heterog_dim: int, rng, dropout_rate: float = DROPOUT_RATE):
    if kind == HFT_HLF:
        return build_hft_hlf(homog_dim, heterog_dim, rng, dropout_rate)
    if kind == TRADITIONAL:
        return build_traditional(homog_dim, heterog_dim, rng, dropout_rate)
    raise KindMismatch(f"unknown model kind {kind!r}")


def transfer_backbone(source, target_heterog_dim: int, rng: np.random.Generator) -> HftHlfModel:
    """New HFT+HLF model holding an exact copy of the source backbone and a
    freshly initialized head sized for the target city's locations."""
    model = source.model if isinstance(source, ModelCheckpoint) else source
    if not isinstance(model, HftHlfModel):
        raise KindMismatch(f"only {HFT_HLF!r} models can be transferred, got {getattr(model, 'kind', type(model))!r}")
    if target_heterog_dim < 1:
        raise BadDim("target location width must be >= 1")
    backbone = model.backbone.copy()
    old = model.head
    head = DenseStack(backbone.out_width + target_heterog_dim, old.widths, old.out_dim, rng, old.dropout_rate, old.slope)
    return HftHlfModel(backbone, head, backbone_frozen=True)


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    """A trained model plus everything needed to encode records for it."""

    model: HftHlfModel | TraditionalModel
    norm: NormStats
    vocab: CityVocabulary
    layout: FeatureLayout
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model.kind

    def to_dict(self) -> dict:
        m = self.model
        dims = {"homog": m.homog_dim, "heterog": m.heterog_dim}
        if isinstance(m, HftHlfModel):
            dims.update(backbone=list(m.backbone.widths), head=list(m.head.widths), backbone_frozen=m.backbone_frozen)
        else:
            dims.update(hidden=list(m.stack.widths))
        first = next(iter(m.stacks().values()))
        dims.update(dropout=first.dropout_rate, leaky_slope=first.slope)

        layers, batchnorm = [], []
        for name, stack in m.stacks().items():
            for i, layer in enumerate(stack.dense_layers()):
                label = f"{name}.{i}" if i < len(stack.dense) else f"{name}.out"
                layers.append({"name": label, "weight": layer.weight.tolist(), "bias": layer.bias.tolist()})
            for i, bn in enumerate(stack.bn):
                batchnorm.append({
                    "name": f"{name}.{i}",
                    "gamma": bn.gamma.tolist(),
                    "beta": bn.beta.tolist(),
                    "running_mean": bn.running_mean.tolist(),
                    "running_var": bn.running_var.tolist(),
                    "momentum": bn.momentum,
                    "eps": bn.eps,
                })
        return {
            "version": CHECKPOINT_VERSION,
            "kind": m.kind,
            "dims": dims,
            "layers": layers,
            "batchnorm": batchnorm,
            "norm_stats": self.norm.to_dict(),
            "vocab": self.vocab.to_dict(),
            "layout": self.layout.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelCheckpoint":
        if not isinstance(doc, dict) or "version" not in doc:
            raise CorruptCheckpoint("checkpoint has no version field")
        if doc["version"] != CHECKPOINT_VERSION:
            raise VersionMismatch(f"unsupported checkpoint version {doc['version']!r} (expected {CHECKPOINT_VERSION})")
        try:
            return cls._from_dict(doc)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise CorruptCheckpoint(f"malformed checkpoint: {exc!r}") from exc

    @classmethod
    def _from_dict(cls, doc: dict) -> "ModelCheckpoint":
        dims = doc["dims"]
        kind = doc["kind"]
        rate, slope = float(dims["dropout"]), float(dims["leaky_slope"])
        homog, heterog = int(dims["homog"]), int(dims["heterog"])
        if kind == HFT_HLF:
            backbone = DenseStack(homog, dims["backbone"], None, None, rate, slope)
            head = DenseStack(backbone.out_width + heterog, dims["head"], 1, None, rate, slope)
            model = HftHlfModel(backbone, head, bool(dims["backbone_frozen"]))
        elif kind == TRADITIONAL:
            model = TraditionalModel(DenseStack(homog + heterog, dims["hidden"], 1, None, rate, slope), homog)
        else:
            raise KindMismatch(f"unknown model kind {kind!r}")

        layers = {entry["name"]: entry for entry in doc["layers"]}
        bns = {entry["name"]: entry for entry in doc["batchnorm"]}
        for name, stack in model.stacks().items():
            for i, layer in enumerate(stack.dense_layers()):
                entry = layers[f"{name}.{i}" if i < len(stack.dense) else f"{name}.out"]
                _assign(layer.weight, entry["weight"])
                _assign(layer.bias, entry["bias"])
            for i, bn in enumerate(stack.bn):
                entry = bns[f"{name}.{i}"]
                for key in ("gamma", "beta", "running_mean", "running_var"):
                    _assign(getattr(bn, key), entry[key])
                bn.momentum, bn.eps = float(entry["momentum"]), float(entry["eps"])

        layout = FeatureLayout.from_dict(doc["layout"])
        if layout.homog_dim != homog or layout.heterog_dim != heterog:
            raise ValueError("layout does not match model dims")
        return cls(
            model=model,
            norm=NormStats.from_dict(doc["norm_stats"]),
            vocab=CityVocabulary.from_dict(doc["vocab"]),
            layout=layout,
            meta=dict(doc["meta"]),
        )


def _assign(dst: np.ndarray, values) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != dst.shape:
        raise ValueError(f"array of shape {arr.shape} where {dst.shape} was expected")
    dst[...] = arr


def dumps_checkpoint(ckpt: ModelCheckpoint) -> str:
    return json.dumps(ckpt.to_dict(), allow_nan=False) + "\n"


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    text = dumps_checkpoint(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise CorruptCheckpoint(f"checkpoint is not UTF-8 text: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"checkpoint is not valid JSON: {exc}") from None
    return ModelCheckpoint.from_dict(doc)


def predict_standardized(model, homog: np.ndarray, heterog: np.ndarray) -> np.ndarray:
    return model.forward(homog, heterog, Mode.INFER)[:, 0]


def predict_prices(ckpt: ModelCheckpoint, records: Sequence[PropertyRecord]) -> np.ndarray:
    """Price per m² for each record (encode, inference forward, decode)."""
    data = encode_dataset(records, ckpt.norm, ckpt.layout)
    if len(data) == 0:
        return np.zeros(0)
    return decode_target(predict_standardized(ckpt.model, data.homog, data.heterog), ckpt.norm)
