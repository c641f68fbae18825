"""Numeric encoding of property records.

Records are split into two blocks:

* homogeneous features (building and apartment attributes whose categories are
  shared by every city) feed the transferable backbone;
* heterogeneous features (district and residence one-hots, specific to one
  city) are concatenated with the backbone output and feed the head.

The regression target is the standardized natural log of the price per m².
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ingest import BUILDING_TYPES, DECORATIONS, DIRECTIONS, CityVocabulary, EmptyInput, PropertyRecord

NUMERIC_FIELDS = ("year", "area", "bedroom", "livingroom", "kitchen", "bathroom", "floor")
STD_FLOOR = 1e-8


class NonPositivePrice(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    numeric_mean: np.ndarray  # (7,), in NUMERIC_FIELDS order
    numeric_std: np.ndarray
    target_mean: float
    target_std: float

    def to_dict(self) -> dict:
        return {
            "fields": list(NUMERIC_FIELDS),
            "numeric_mean": self.numeric_mean.tolist(),
            "numeric_std": self.numeric_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        if list(d["fields"]) != list(NUMERIC_FIELDS):
            raise ValueError(f"unexpected numeric field order {d['fields']}")
        mean = np.asarray(d["numeric_mean"], dtype=np.float64)
        std = np.asarray(d["numeric_std"], dtype=np.float64)
        if mean.shape != (len(NUMERIC_FIELDS),) or std.shape != mean.shape:
            raise ValueError("numeric stats have the wrong length")
        return cls(mean, std, float(d["target_mean"]), float(d["target_std"]))

    def z_scores(self, values: np.ndarray) -> np.ndarray:
        """Standardize raw numeric values (last axis in NUMERIC_FIELDS order).

        A field that was constant in training (std at the floor) carries no
        learnable signal, so it encodes as 0 for every record instead of
        blowing an unseen value up by 1/STD_FLOOR.
        """
        z = (np.asarray(values, dtype=np.float64) - self.numeric_mean) / self.numeric_std
        return np.where(self.numeric_std > STD_FLOOR, z, 0.0)

    def with_target(self, target_mean: float, target_std: float) -> "NormStats":
        return NormStats(self.numeric_mean, self.numeric_std, target_mean, target_std)


@dataclass(frozen=True)
class FeatureLayout:
    """Slot layout of both feature blocks.

    The homogeneous block is: 7 numeric fields, then one-hot blocks for
    building type (8), decoration (6), direction (10) and structure. The
    heterogeneous block is the district one-hot followed by the residence
    one-hot.
    """

    structures: tuple[str, ...]
    districts: tuple[str, ...]
    residences: tuple[str, ...]

    @classmethod
    def from_vocabularies(cls, source: CityVocabulary, target: CityVocabulary | None = None) -> "FeatureLayout":
        target = source if target is None else target
        return cls(source.structures, target.districts, target.residences)

    def with_location(self, vocab: CityVocabulary) -> "FeatureLayout":
        return FeatureLayout(self.structures, vocab.districts, vocab.residences)

    @property
    def homog_dim(self) -> int:
        return len(NUMERIC_FIELDS) + len(BUILDING_TYPES) + len(DECORATIONS) + len(DIRECTIONS) + len(self.structures)

    @property
    def heterog_dim(self) -> int:
        return len(self.districts) + len(self.residences)

    def block_offsets(self) -> dict[str, int]:
        offsets = {}
        pos = len(NUMERIC_FIELDS)
        for name, labels in self._categorical_blocks():
            offsets[name] = pos
            pos += len(labels)
        return offsets

    def _categorical_blocks(self):
        return (
            ("building_type", BUILDING_TYPES),
            ("decoration", DECORATIONS),
            ("direction", DIRECTIONS),
            ("structure", self.structures),
        )

    def homog_slots(self) -> dict:
        """Map a numeric field name or a ``(field, label)`` pair to its index."""
        slots: dict = {name: i for i, name in enumerate(NUMERIC_FIELDS)}
        pos = len(NUMERIC_FIELDS)
        for name, labels in self._categorical_blocks():
            for label in labels:
                slots[(name, label)] = pos
                pos += 1
        return slots

    def heterog_slots(self) -> dict:
        slots: dict = {}
        for i, d in enumerate(self.districts):
            slots[("district", d)] = i
        for j, r in enumerate(self.residences):
            slots[("residence", r)] = len(self.districts) + j
        return slots

    def to_dict(self) -> dict:
        return {
            "numeric": list(NUMERIC_FIELDS),
            "building_type": list(BUILDING_TYPES),
            "decoration": list(DECORATIONS),
            "direction": list(DIRECTIONS),
            "structures": list(self.structures),
            "districts": list(self.districts),
            "residences": list(self.residences),
            "homog_dim": self.homog_dim,
            "heterog_dim": self.heterog_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        layout = cls(tuple(d["structures"]), tuple(d["districts"]), tuple(d["residences"]))
        for key, labels in (
            ("numeric", NUMERIC_FIELDS),
            ("building_type", BUILDING_TYPES),
            ("decoration", DECORATIONS),
            ("direction", DIRECTIONS),
        ):
            if tuple(d[key]) != tuple(labels):
                raise ValueError(f"layout block {key!r} does not match this version")
        if d["homog_dim"] != layout.homog_dim or d["heterog_dim"] != layout.heterog_dim:
            raise ValueError("layout dimensions are inconsistent")
        return layout


@dataclass
class EncodedDataset:
    homog: np.ndarray  # (N, homog_dim)
    heterog: np.ndarray  # (N, heterog_dim)
    target: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.target.shape[0]

    def subset(self, idx) -> "EncodedDataset":
        return EncodedDataset(self.homog[idx], self.heterog[idx], self.target[idx])


def _numeric_matrix(records: Sequence[PropertyRecord]) -> np.ndarray:
    return np.array([[getattr(r, f) for f in NUMERIC_FIELDS] for r in records], dtype=np.float64).reshape(
        len(records), len(NUMERIC_FIELDS)
    )


def fit_normalizer(train: Sequence[PropertyRecord]) -> NormStats:
    if not train:
        raise EmptyInput("cannot fit normalization statistics on zero records")
    x = _numeric_matrix(train)
    logp = np.log(np.array([r.price for r in train], dtype=np.float64))
    return NormStats(
        numeric_mean=x.mean(axis=0),
        numeric_std=np.maximum(x.std(axis=0), STD_FLOOR),
        target_mean=float(logp.mean()),
        target_std=float(max(logp.std(), STD_FLOOR)),
    )


def encode_homogeneous(rec: PropertyRecord, norm: NormStats, layout: FeatureLayout) -> np.ndarray:
    """Encode one record's city-invariant attributes.

    Numeric fields are z-scored; categorical fields are one-hot. A structure
    label missing from ``layout`` leaves its block all zero.
    """
    out = np.zeros(layout.homog_dim)
    out[: len(NUMERIC_FIELDS)] = norm.z_scores([getattr(rec, name) for name in NUMERIC_FIELDS])
    slots = layout.homog_slots()
    for name in ("building_type", "decoration", "direction", "structure"):
        idx = slots.get((name, getattr(rec, name)))
        if idx is not None:
            out[idx] = 1.0
    return out


def encode_heterogeneous(rec: PropertyRecord, vocab: CityVocabulary) -> np.ndarray:
    out = np.zeros(len(vocab.districts) + len(vocab.residences))
    if rec.district in vocab.districts:
        out[vocab.districts.index(rec.district)] = 1.0
    if rec.residence in vocab.residences:
        out[len(vocab.districts) + vocab.residences.index(rec.residence)] = 1.0
    return out


def encode_target(price: float, norm: NormStats) -> float:
    if not price > 0:
        raise NonPositivePrice(f"price must be positive, got {price}")
    return (math.log(price) - norm.target_mean) / norm.target_std


def decode_target(t, norm: NormStats):
    """Inverse of :func:`encode_target`; accepts scalars or arrays."""
    return np.exp(np.asarray(t, dtype=np.float64) * norm.target_std + norm.target_mean)


def _one_hot_columns(labels: Sequence[str], vocabulary: Sequence[str]) -> np.ndarray:
    lookup = {label: i for i, label in enumerate(vocabulary)}
    return np.array([lookup.get(label, -1) for label in labels], dtype=np.int64)


def encode_dataset(
    records: Sequence[PropertyRecord],
    norm: NormStats,
    layout: FeatureLayout,
    vocab: CityVocabulary | None = None,
) -> EncodedDataset:
    """Vectorized encoding of a record list; row i belongs to ``records[i]``.

    ``vocab`` defaults to the location part of ``layout``; if given it must
    agree with it.
    """
    if vocab is not None and (vocab.districts, vocab.residences) != (layout.districts, layout.residences):
        raise ValueError("vocabulary and layout disagree on location categories")
    n = len(records)
    homog = np.zeros((n, layout.homog_dim))
    heterog = np.zeros((n, layout.heterog_dim))
    if n == 0:
        return EncodedDataset(homog, heterog, np.zeros(0))

    homog[:, : len(NUMERIC_FIELDS)] = norm.z_scores(_numeric_matrix(records))
    rows = np.arange(n)
    offsets = layout.block_offsets()
    for name, labels in layout._categorical_blocks():
        cols = _one_hot_columns([getattr(r, name) for r in records], labels)
        hit = cols >= 0
        homog[rows[hit], offsets[name] + cols[hit]] = 1.0

    cols = _one_hot_columns([r.district for r in records], layout.districts)
    hit = cols >= 0
    heterog[rows[hit], cols[hit]] = 1.0
    cols = _one_hot_columns([r.residence for r in records], layout.residences)
    hit = cols >= 0
    heterog[rows[hit], len(layout.districts) + cols[hit]] = 1.0

    prices = np.array([r.price for r in records], dtype=np.float64)
    if np.any(prices <= 0):
        raise NonPositivePrice("all prices must be positive")
    target = (np.log(prices) - norm.target_mean) / norm.target_std
    return EncodedDataset(homog, heterog, target)
