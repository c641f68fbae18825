import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfthlf.ingest import AREA_BOUNDS, BUILDING_TYPES, DECORATIONS, DIRECTIONS, clean, parse_records, records_to_csv
from hfthlf.synth import (
    FLOOR_MEAN,
    FLOOR_STD,
    LOG_AREA_MEAN,
    LOG_AREA_STD,
    YEAR_MEAN,
    YEAR_STD,
    BadSpec,
    CitySpec,
    UniverseSpec,
    city_truth,
    draw_shared_effects,
    generate_universe,
    homogeneous_log_effect,
)


@pytest.fixture(scope="module")
def default_universe():
    return generate_universe()


def test_default_sizes(default_universe):
    assert {k: len(v) for k, v in default_universe.items()} == {"Source": 5000, "Target": 1000}
    src = default_universe["Source"]
    assert len({r.district for r in src}) == 10
    assert len({r.residence for r in src}) == 50


def test_every_record_survives_clean(default_universe):
    for recs in default_universe.values():
        raws, errors = parse_records(records_to_csv(recs))
        kept, report = clean(raws, max_year=2019)
        assert errors == [] and report.n_dropped == 0
        assert kept == recs


def test_attribute_ranges(default_universe):
    for recs in default_universe.values():
        assert all(AREA_BOUNDS[0] <= r.area <= AREA_BOUNDS[1] for r in recs)
        assert all(1900 <= r.year <= 2019 for r in recs)
        assert all(-2 <= r.floor <= 40 for r in recs)
        assert all(r.price > 0 for r in recs)


def test_residence_maps_to_one_district(default_universe):
    for recs in default_universe.values():
        seen = {}
        for r in recs:
            assert seen.setdefault(r.residence, r.district) == r.district


def test_deterministic():
    spec = UniverseSpec(cities=(CitySpec("A", 2, 2, 4, 50, 9.0),), seed=3)
    assert generate_universe(spec) == generate_universe(spec)
    other = UniverseSpec(cities=spec.cities, seed=4)
    assert generate_universe(other) != generate_universe(spec)


def degenerate(seed=1):
    return UniverseSpec(
        cities=(CitySpec("A", 1, 3, 9, 400, 10.0), CitySpec("B", 3, 2, 5, 400, 10.0)),
        district_std=0.0, residence_std=0.0, noise_std=0.0, seed=seed,
    )


def test_zero_noise_price_depends_on_homogeneous_attributes_only():
    spec = degenerate()
    fx = draw_shared_effects(spec)
    uni = generate_universe(spec)
    by_attrs = {}
    for recs in uni.values():
        for r in recs:
            expected = round(math.exp(10.0 + homogeneous_log_effect(r, fx)), 2)
            assert r.price == expected
            key = (r.year, r.building_type, r.area, r.floor, r.structure, r.decoration, r.direction)
            assert by_attrs.setdefault(key, r.price) == r.price


def test_zero_noise_identical_attributes_identical_prices():
    spec = degenerate()
    uni = generate_universe(spec)
    a = uni["A"][0]
    # same homogeneous attributes, other city's location
    b_loc = uni["B"][0]
    moved = a.__class__(**{**a.__dict__, "city": "B", "district": b_loc.district, "residence": b_loc.residence})
    fx = draw_shared_effects(spec)
    assert homogeneous_log_effect(moved, fx) == homogeneous_log_effect(a, fx)
    assert round(math.exp(10.0 + homogeneous_log_effect(moved, fx)), 2) == a.price


def test_shared_effects_do_not_depend_on_cities():
    a = UniverseSpec(cities=(CitySpec("A", 1, 2, 2, 10, 9.0),), seed=9)
    b = UniverseSpec(cities=(CitySpec("Z", 3, 5, 8, 30, 11.0), CitySpec("Y", 2, 1, 1, 5, 8.0)), seed=9)
    assert draw_shared_effects(a) == draw_shared_effects(b)


def test_location_free_price_ratios_match_across_cities():
    # regenerate with location effects zeroed: within each city the price ratio
    # of two records is exp of the difference of their shared effects
    spec = degenerate(seed=5)
    fx = draw_shared_effects(spec)
    for recs in generate_universe(spec).values():
        p = np.log([r.price for r in recs[:50]])
        h = np.array([homogeneous_log_effect(r, fx) for r in recs[:50]])
        np.testing.assert_allclose(p - p[0], h - h[0], atol=1e-4)


def design_matrix(recs, structures):
    """True regressors: residence one-hots absorb base, district and residence
    effects; categorical blocks drop their first label."""
    residences = sorted({r.residence for r in recs})
    cols = []
    cols.append(np.array([[r.residence == s for s in residences] for r in recs], float))
    cols.append(np.array([
        [(math.log(r.area) - LOG_AREA_MEAN) / LOG_AREA_STD, (r.floor - FLOOR_MEAN) / FLOOR_STD,
         (r.year - YEAR_MEAN) / YEAR_STD, DECORATIONS.index(r.decoration)]
        for r in recs
    ]))
    for labels, attr in ((BUILDING_TYPES, "building_type"), (DIRECTIONS, "direction"), (structures, "structure")):
        cols.append(np.array([[getattr(r, attr) == lab for lab in labels[1:]] for r in recs], float))
    return np.hstack(cols), len(residences)


def test_least_squares_recovers_shared_coefficients(default_universe):
    spec = UniverseSpec()
    fx = draw_shared_effects(spec)
    recs = default_universe["Source"]
    X, n_res = design_matrix(recs, spec.structures)
    y = np.log([r.price for r in recs])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    sigma2 = resid @ resid / (len(y) - X.shape[1])
    se = np.sqrt(np.diag(np.linalg.inv(X.T @ X)) * sigma2)

    truth = [fx.area_coef, fx.floor_coef, fx.year_coef, fx.decoration_step]
    for labels, table in ((BUILDING_TYPES, fx.building_type), (DIRECTIONS, fx.direction), (spec.structures, fx.structure)):
        truth += [table[lab] - table[labels[0]] for lab in labels[1:]]
    est, err = beta[n_res:], se[n_res:]
    z = (est - np.array(truth)) / err
    # the four slopes individually, and all shared coefficients jointly
    assert np.all(np.abs(z[:4]) <= 2.0), z[:4]
    assert abs(math.sqrt(sigma2) - spec.noise_std) <= 0.01
    # sum of squared z-scores ~ chi2(df); 99.9% quantile for df <= 30 is < 60
    assert np.sum(z**2) <= 60.0


def test_residence_effects_recovered_with_district():
    spec = UniverseSpec(cities=(CitySpec("A", 1, 3, 9, 3000, 10.0),), seed=2)
    truth = city_truth(spec, 0)
    recs = generate_universe(spec)["A"]
    fx = draw_shared_effects(spec)
    resid = Counter()
    count = Counter()
    for r in recs:
        resid[r.residence] += math.log(r.price) - homogeneous_log_effect(r, fx)
        count[r.residence] += 1
    for res, total in resid.items():
        expected = truth.base_log_price + truth.district_effect[truth.residence_district[res]] + truth.residence_effect[res]
        assert abs(total / count[res] - expected) <= 4 * spec.noise_std / math.sqrt(count[res])


@settings(max_examples=15, deadline=None)
@given(
    n_d=st.integers(1, 4),
    extra=st.integers(0, 6),
    n=st.integers(1, 60),
    seed=st.integers(0, 10_000),
)
def test_counts_exact_and_clean(n_d, extra, n, seed):
    spec = UniverseSpec(cities=(CitySpec("C", 2, n_d, n_d + extra, n, 9.5),), seed=seed)
    recs = generate_universe(spec)["C"]
    assert len(recs) == n
    assert len({r.district for r in recs}) <= n_d
    assert clean(parse_records(records_to_csv(recs))[0], max_year=2019)[1].n_dropped == 0


@pytest.mark.parametrize(
    "kw",
    [
        {"cities": ()},
        {"cities": (CitySpec("A", 1, 0, 1, 5, 9.0),)},
        {"cities": (CitySpec("A", 1, 3, 2, 5, 9.0),)},
        {"cities": (CitySpec("A", 4, 1, 1, 5, 9.0),)},
        {"cities": (CitySpec("A", 1, 1, 1, 5, 9.0), CitySpec("A", 1, 1, 1, 5, 9.0))},
        {"noise_std": -0.1},
        {"district_std": -1.0},
        {"structures": ()},
    ],
)
def test_bad_spec(kw):
    with pytest.raises(BadSpec):
        generate_universe(UniverseSpec(**kw))


def test_spec_json_round_trip():
    spec = UniverseSpec(noise_std=0.2, seed=3)
    assert UniverseSpec.from_json(json.dumps(spec.to_dict())) == spec
    assert UniverseSpec.from_dict({}) == UniverseSpec()
    with pytest.raises(BadSpec):
        UniverseSpec.from_json("{not json")
    with pytest.raises(BadSpec):
        UniverseSpec.from_dict({"bogus": 1})
    with pytest.raises(BadSpec):
        UniverseSpec.from_dict({"cities": [{"name": "A"}]})
