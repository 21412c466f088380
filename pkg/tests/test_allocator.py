import random
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facejobs.allocator import (
    FRACTIONAL,
    INTEGER,
    CepNotIndexed,
    CompatibilityMatrix,
    aggregate,
    allocate,
    allocate_establishment,
    allocate_fallback,
    allocate_partition,
    build_index,
    round_to_integers,
    weights_for,
)
from facejobs.ingest import build_tallies
from facejobs.model import Allocation, EstablishmentRecord, Geometry, Rule, Sector, Species, StreetFace

from helpers import model_objects, random_instance
from oracles import brute_force_allocation, brute_force_rows, largest_remainder

MUNI = "1721000"
M = CompatibilityMatrix.default()
F = [f"{MUNI}{n:014d}" for n in range(1, 7)]
LINE = Geometry(((0.0, 0.0), (1.0, 0.0)))


def faces(*codes, muni=MUNI):
    return [StreetFace(c, muni, LINE) for c in codes]


def tallies(spec):
    """spec: {face: {(cep, species): n}}"""
    return build_tallies((f, c, Species(s)) for f, t in spec.items() for (c, s), n in t.items() for _ in range(n))


def est(jobs, cep="c1", sector=Sector.OTHER, muni=MUNI, eid="e"):
    return EstablishmentRecord(eid, muni, cep, sector, jobs, 2019)


# -- index ----------------------------------------------------------------


def test_single_cep_municipality_detected():
    t = tallies({F[0]: {("c", 6): 1}, F[1]: {("c", 1): 2}, F[2]: {("c", 7): 1}})
    idx = build_index(faces(*F[:3]), t)
    assert idx.by_cep["c"] == tuple(F[:3])
    assert MUNI in idx.single_cep_municipalities


def test_face_under_two_ceps_appears_under_both():
    t = tallies({F[0]: {("c1", 6): 1, ("c2", 1): 1}})
    idx = build_index(faces(F[0]), t)
    assert idx.by_cep == {"c1": (F[0],), "c2": (F[0],)}
    assert MUNI not in idx.single_cep_municipalities


def test_index_lists_ascending_and_tallyless_faces_in_municipality():
    t = tallies({F[2]: {("c", 6): 1}, F[0]: {("c", 6): 1}})
    idx = build_index(faces(F[2], F[1], F[0]), t)
    assert idx.by_cep["c"] == (F[0], F[2])
    assert idx.by_municipality[MUNI] == (F[0], F[1], F[2])


# -- weights --------------------------------------------------------------


def test_weights_other_sector():
    t = tallies({F[0]: {("c1", 6): 2}, F[1]: {("c1", 6): 1}})
    idx = build_index(faces(F[0], F[1]), t)
    assert weights_for(est(8), idx, M, t) == ((F[0], 2), (F[1], 1))


def test_weights_education_all_zero():
    t = tallies({F[0]: {("c1", 6): 2}, F[1]: {("c1", 5): 1}})
    idx = build_index(faces(F[0], F[1]), t)
    assert weights_for(est(8, sector=Sector.EDUCATION), idx, M, t) == ((F[0], 0), (F[1], 0))


def test_weights_health_ignores_other_species():
    t = tallies({F[0]: {("c1", 5): 3, ("c1", 6): 9}})
    idx = build_index(faces(F[0]), t)
    assert weights_for(est(1, sector=Sector.HEALTH), idx, M, t) == ((F[0], 3),)


def test_weights_unknown_cep():
    t = tallies({F[0]: {("c1", 6): 1}})
    with pytest.raises(CepNotIndexed):
        weights_for(est(1, cep="zz"), build_index(faces(F[0]), t), M, t)


# -- allocate ---------------------------------------------------------------


def amounts(allocs):
    return tuple(a.amount for a in allocs)


def test_allocate_weighted():
    out = allocate(est(10), ((F[0], 1), (F[1], 3)))
    assert amounts(out) == (Fraction(5, 2), Fraction(15, 2))
    assert {a.rule for a in out} == {Rule.WEIGHTED}


def test_allocate_uniform_on_zero_weights():
    out = allocate(est(9), ((F[0], 0), (F[1], 0), (F[2], 0)))
    assert amounts(out) == (3, 3, 3)
    assert {a.rule for a in out} == {Rule.UNIFORM}


def test_allocate_zero_jobs():
    assert amounts(allocate(est(0), ((F[0], 4), (F[1], 1)))) == (0, 0)


def test_allocate_rejects_empty_vector():
    with pytest.raises(ValueError):
        allocate(est(1), ())


def test_fallback_single_cep_spelling_mismatch():
    t = tallies({F[0]: {("77000000", 6): 2}, F[1]: {("77000000", 6): 1}, F[2]: {("77000000", 6): 1}})
    idx = build_index(faces(*F[:3]), t)
    out = allocate_fallback(est(8, cep="77000001"), idx, M, t)
    assert amounts(out) == (4, 2, 2)
    assert {a.rule for a in out} == {Rule.MUNICIPALITY_WIDE}
    assert {a.cep for a in out} == {"77000001"}


def test_fallback_faceless_municipality():
    t = tallies({F[0]: {("c", 6): 1}})
    idx = build_index(faces(F[0]), t)
    (only,) = allocate_fallback(est(7, cep="zz", muni="1100015"), idx, M, t)
    assert (only.face_code, only.amount, only.rule) == (None, 7, Rule.UNALLOCATED)


def test_fallback_zero_weight_uniform():
    idx = build_index(faces(*F[:5]), {})
    out = allocate_fallback(est(5, cep="zz"), idx, M, {})
    assert amounts(out) == (1, 1, 1, 1, 1)


# -- aggregate ----------------------------------------------------------------


def test_aggregate_two_establishments_same_row():
    t = tallies({F[0]: {("c", 6): 2, ("c", 1): 5, ("c", 7): 3, ("c", 3): 1}})
    allocs = [Allocation("a", F[0], "c", 3, Rule.WEIGHTED), Allocation("b", F[0], "c", 5, Rule.WEIGHTED)]
    assert aggregate(allocs, t) == [(F[0], "c", 3, 8)]


def test_aggregate_empty_and_exact_thirds():
    assert aggregate([], {}) == []
    allocs = [
        Allocation("a", F[0], "c", Fraction(10, 3), Rule.WEIGHTED),
        Allocation("b", F[0], "c", Fraction(20, 3), Rule.WEIGHTED),
        Allocation("z", F[1], "c", 0, Rule.WEIGHTED),
        Allocation("u", None, "c", 4, Rule.UNALLOCATED),
    ]
    rows = aggregate(allocs, {})
    assert rows == [(F[0], "c", 0, 10)]
    assert type(rows[0][3]) is int


# -- rounding -------------------------------------------------------------


def fractional(*values):
    return [Allocation("e", F[i], "c", v, Rule.WEIGHTED) for i, v in enumerate(values)]


def test_largest_remainder_examples():
    assert amounts(round_to_integers(fractional(Fraction(5, 2), Fraction(15, 2)), INTEGER)) == (3, 7)
    assert amounts(round_to_integers(fractional(3, 3, 3), INTEGER)) == (3, 3, 3)
    assert amounts(round_to_integers(fractional(Fraction(2, 5), Fraction(2, 5), Fraction(1, 5)), INTEGER)) == (1, 0, 0)


def test_fractional_rounding_is_identity():
    allocs = fractional(Fraction(5, 2), Fraction(15, 2))
    assert round_to_integers(allocs, FRACTIONAL) == allocs


def test_tie_break_uses_face_code_not_input_order():
    allocs = [
        Allocation("e", F[3], "c", Fraction(1, 2), Rule.WEIGHTED),
        Allocation("e", F[1], "c", Fraction(1, 2), Rule.WEIGHTED),
    ]
    assert amounts(round_to_integers(allocs, INTEGER)) == (0, 1)


# -- compatibility overrides ---------------------------------------------------


def test_compatibility_override_round_trip():
    m = CompatibilityMatrix.from_dict({"Health": [5, 6]})
    assert m.compatible[Sector.HEALTH] == {Species.HEALTH, Species.OTHER_PURPOSE}
    assert m.compatible[Sector.EDUCATION] == {Species.EDUCATIONAL}
    assert CompatibilityMatrix.from_dict(m.to_dict()) == m
    with pytest.raises(ValueError):
        CompatibilityMatrix.from_dict({"Health": []})


# -- properties -------------------------------------------------------------

weights = st.lists(st.integers(0, 50), min_size=1, max_size=6)


@given(weights, st.integers(0, 1000))
def test_conservation_and_proportionality(ws, jobs):
    w = tuple(zip(F, ws))
    out = allocate(est(jobs), w)
    assert sum(a.amount for a in out) == jobs
    assert all(a.amount >= 0 for a in out)
    for a, (_, wa) in zip(out, w):
        for b, (_, wb) in zip(out, w):
            if wa and wb:
                assert a.amount * wb == b.amount * wa


@given(weights, st.integers(0, 1000), st.integers(1, 20))
def test_weight_scale_invariance(ws, jobs, k):
    w = tuple(zip(F, ws))
    scaled = tuple((f, x * k) for f, x in w)
    assert amounts(allocate(est(jobs), w)) == amounts(allocate(est(jobs), scaled))


@settings(max_examples=300)
@given(st.randoms(use_true_random=False))
def test_partition_matches_brute_force_oracle(rnd):
    raw_faces, raw_addr, raw_est = random_instance(random.Random(rnd.random()))
    fo, ao, eo = model_objects(raw_faces, raw_addr, raw_est)
    t = build_tallies(ao)
    idx = build_index(fo, t)
    expected = brute_force_allocation(raw_faces, raw_addr, raw_est)
    for e in eo:
        allocs = allocate_establishment(e, idx, M, t)
        rule, shares = expected[e.establishment_id]
        assert {a.rule.value for a in allocs} == {rule}
        if rule != "Unallocated":
            assert {a.face_code: a.amount for a in allocs} == shares
    result = allocate_partition(eo, idx, M, t, FRACTIONAL)
    got = {(f, c): (n, j) for f, c, n, j in result.rows}
    assert got == brute_force_rows(raw_faces, raw_addr, raw_est)
    assert result.rule_histogram == Counter(Rule(r) for r, _ in expected.values())
    assert result.input_jobs == result.allocated_jobs + sum(u.jobs for u in result.unallocated)


@settings(max_examples=300)
@given(st.randoms(use_true_random=False))
def test_integer_partition_matches_largest_remainder_oracle(rnd):
    raw_faces, raw_addr, raw_est = random_instance(random.Random(rnd.random()))
    fo, ao, eo = model_objects(raw_faces, raw_addr, raw_est)
    t = build_tallies(ao)
    idx = build_index(fo, t)
    expected = {}
    for est_id, (rule, shares) in brute_force_allocation(raw_faces, raw_addr, raw_est).items():
        if rule == "Unallocated":
            continue
        pairs = sorted(shares.items())
        jobs = next(j for i, _, _, _, j in raw_est if i == est_id)
        cep = next(c for i, _, c, _, _ in raw_est if i == est_id)
        for (f, _), n in zip(pairs, largest_remainder(pairs, jobs)):
            if n:
                expected[(f, cep)] = expected.get((f, cep), 0) + n
    result = allocate_partition(eo, idx, M, t, INTEGER)
    assert {(f, c): j for f, c, _, j in result.rows} == expected
    assert result.input_jobs == result.allocated_jobs + sum(u.jobs for u in result.unallocated)
