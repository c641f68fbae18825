"""Synthetic multi-city housing markets with a known pricing function.

Log price per m² is additive:

    ln(price) = city base
              + shared homogeneous effect (identical in every city)
              + district effect + residence effect   (city specific)
              + Normal(0, noise_std)

The shared effect is linear in z-scored ln(area), floor and year, linear in
the decoration level, plus one effect per building type, direction and
structure label.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import AREA_BOUNDS, BUILDING_TYPES, DECORATIONS, DIRECTIONS, PropertyRecord

DEFAULT_STRUCTURES = ("Duplex", "Flat", "Loft", "Split-level")

# Fixed attribute distributions; z-scores in the pricing function use these
# constants, not sample statistics, so the ground truth is exactly linear.
LOG_AREA_MEAN, LOG_AREA_STD = float(np.log(90.0)), 0.4
YEAR_MEAN, YEAR_STD, YEAR_RANGE = 2004.0, 8.0, (1900, 2019)
FLOOR_MEAN, FLOOR_STD, FLOOR_RANGE = 8.0, 6.0, (-2, 40)


class BadSpec(ValueError):
    pass


@dataclass(frozen=True)
class CitySpec:
    name: str
    tier: int
    n_districts: int
    n_residences: int
    n_records: int
    base_log_price: float


@dataclass(frozen=True)
class UniverseSpec:
    cities: tuple[CitySpec, ...] = (
        CitySpec("Source", 1, 10, 50, 5000, 10.6),
        CitySpec("Target", 3, 4, 20, 1000, 9.4),
    )
    area_coef: float = -0.15
    floor_coef: float = 0.05
    year_coef: float = 0.12
    decoration_step: float = 0.06
    categorical_std: float = 0.15
    structures: tuple[str, ...] = DEFAULT_STRUCTURES
    district_std: float = 0.25
    residence_std: float = 0.20
    noise_std: float = 0.10
    seed: int = 7

    def validate(self) -> None:
        if not self.cities:
            raise BadSpec("at least one city is required")
        names = [c.name for c in self.cities]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise BadSpec(f"city names must be unique and non-empty: {names}")
        for c in self.cities:
            if min(c.n_districts, c.n_residences, c.n_records) < 1:
                raise BadSpec(f"{c.name}: counts must be >= 1")
            if c.n_residences < c.n_districts:
                raise BadSpec(f"{c.name}: need at least one residence per district")
            if c.tier not in (1, 2, 3):
                raise BadSpec(f"{c.name}: tier must be 1, 2 or 3")
        for name in ("categorical_std", "district_std", "residence_std", "noise_std"):
            if getattr(self, name) < 0:
                raise BadSpec(f"{name} must be >= 0")
        if not self.structures or len(set(self.structures)) != len(self.structures):
            raise BadSpec("structures must be a non-empty list of distinct labels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cities"] = [asdict(c) for c in self.cities]
        d["structures"] = list(self.structures)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UniverseSpec":
        """Build a spec from a JSON-style mapping; omitted keys take defaults."""
        if not isinstance(d, dict):
            raise BadSpec("spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown spec keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "cities" in kw:
                kw["cities"] = tuple(CitySpec(**c) for c in kw["cities"])
            if "structures" in kw:
                kw["structures"] = tuple(kw["structures"])
            spec = cls(**kw)
        except TypeError as exc:
            raise BadSpec(str(exc)) from None
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, text: str) -> "UniverseSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise BadSpec(f"spec is not valid JSON: {exc}") from None


@dataclass(frozen=True)
class SharedEffects:
    """Ground-truth homogeneous pricing coefficients."""

    area_coef: float
    floor_coef: float
    year_coef: float
    decoration_step: float
    building_type: dict[str, float]
    direction: dict[str, float]
    structure: dict[str, float]


@dataclass(frozen=True)
class CityTruth:
    base_log_price: float
    residence_district: dict[str, str]
    district_effect: dict[str, float]
    residence_effect: dict[str, float]


def draw_shared_effects(spec: UniverseSpec) -> SharedEffects:
    rng = np.random.default_rng([spec.seed, 0])
    s = spec.categorical_std

    def draw(labels):
        return {label: float(e) for label, e in zip(labels, rng.normal(0.0, s, len(labels)))}

    return SharedEffects(
        area_coef=spec.area_coef,
        floor_coef=spec.floor_coef,
        year_coef=spec.year_coef,
        decoration_step=spec.decoration_step,
        building_type=draw(BUILDING_TYPES),
        direction=draw(DIRECTIONS),
        structure=draw(spec.structures),
    )


def homogeneous_log_effect(rec: PropertyRecord, fx: SharedEffects) -> float:
    return (
        fx.area_coef * (np.log(rec.area) - LOG_AREA_MEAN) / LOG_AREA_STD
        + fx.floor_coef * (rec.floor - FLOOR_MEAN) / FLOOR_STD
        + fx.year_coef * (rec.year - YEAR_MEAN) / YEAR_STD
        + fx.decoration_step * DECORATIONS.index(rec.decoration)
        + fx.building_type[rec.building_type]
        + fx.direction[rec.direction]
        + fx.structure[rec.structure]
    )


def city_truth(spec: UniverseSpec, index: int) -> CityTruth:
    city = spec.cities[index]
    rng = np.random.default_rng([spec.seed, 1, index])
    districts = [f"{city.name}-D{d:02d}" for d in range(city.n_districts)]
    residences = [f"{city.name}-R{r:03d}" for r in range(city.n_residences)]
    # round-robin keeps every district populated
    mapping = {r: districts[j % city.n_districts] for j, r in enumerate(residences)}
    d_eff = rng.standard_normal(city.n_districts) * spec.district_std
    r_eff = rng.standard_normal(city.n_residences) * spec.residence_std
    return CityTruth(
        base_log_price=city.base_log_price,
        residence_district=mapping,
        district_effect={d: float(e) for d, e in zip(districts, d_eff)},
        residence_effect={r: float(e) for r, e in zip(residences, r_eff)},
    )


def _city_records(spec: UniverseSpec, index: int, fx: SharedEffects, truth: CityTruth) -> list[PropertyRecord]:
    city = spec.cities[index]
    n = city.n_records
    # attributes and noise use separate streams so zeroing a std leaves the
    # attributes unchanged
    attr = np.random.default_rng([spec.seed, 2, index])
    noise = np.random.default_rng([spec.seed, 3, index]).standard_normal(n) * spec.noise_std

    area = np.round(np.exp(attr.normal(LOG_AREA_MEAN, LOG_AREA_STD, n)), 2)
    area = np.clip(area, *AREA_BOUNDS)
    year = np.clip(np.rint(attr.normal(YEAR_MEAN, YEAR_STD, n)), *YEAR_RANGE).astype(int)
    floor = np.clip(np.rint(attr.normal(FLOOR_MEAN, FLOOR_STD, n)), *FLOOR_RANGE).astype(int)
    bedroom = np.clip(np.rint(area / 35.0), 0, 9).astype(int)
    livingroom = np.clip(1 + (area > 90) + (area > 200), 0, 7).astype(int)
    kitchen = np.clip(1 + (area > 250), 0, 5).astype(int)
    bathroom = np.clip(np.rint(area / 70.0), 1, 9).astype(int)
    btype = attr.integers(len(BUILDING_TYPES), size=n)
    decoration = attr.integers(len(DECORATIONS), size=n)
    direction = attr.integers(len(DIRECTIONS), size=n)
    structure = attr.integers(len(spec.structures), size=n)
    residence_idx = attr.integers(city.n_residences, size=n)

    residences = list(truth.residence_effect)
    records = []
    for i in range(n):
        residence = residences[residence_idx[i]]
        district = truth.residence_district[residence]
        rec = PropertyRecord(
            city=city.name,
            district=district,
            residence=residence,
            year=int(year[i]),
            building_type=BUILDING_TYPES[btype[i]],
            price=1.0,
            area=float(area[i]),
            bedroom=int(bedroom[i]),
            livingroom=int(livingroom[i]),
            kitchen=int(kitchen[i]),
            bathroom=int(bathroom[i]),
            floor=int(floor[i]),
            structure=spec.structures[structure[i]],
            decoration=DECORATIONS[decoration[i]],
            direction=DIRECTIONS[direction[i]],
        )
        log_price = (
            truth.base_log_price
            + homogeneous_log_effect(rec, fx)
            + truth.district_effect[district]
            + truth.residence_effect[residence]
            + noise[i]
        )
        price = max(round(float(np.exp(log_price)), 2), 0.01)
        records.append(_replace_price(rec, price))
    return records


def _replace_price(rec: PropertyRecord, price: float) -> PropertyRecord:
    d = dict(rec.__dict__)
    d["price"] = price
    return PropertyRecord(**d)


def generate_universe(spec: UniverseSpec | None = None) -> dict[str, list[PropertyRecord]]:
    """Generate every city's records. Deterministic in ``spec``."""
    spec = UniverseSpec() if spec is None else spec
    spec.validate()
    fx = draw_shared_effects(spec)
    return {
        city.name: _city_records(spec, i, fx, city_truth(spec, i))
        for i, city in enumerate(spec.cities)
    }
