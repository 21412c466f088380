"""Apportion establishment jobs over street faces sharing their CEP.

Each establishment's jobs are split across the faces that carry addresses
under its CEP, in proportion to the number of addresses whose species is
compatible with the establishment's sector. If none of those faces has a
compatible address the split is uniform over them. If the CEP is not
present at all, the split runs over every face of the municipality with the
same weighting; a municipality with no faces leaves the jobs unallocated.

Amounts are exact: ``int`` when the share divides evenly, ``Fraction``
otherwise, so per-establishment totals are conserved with ``==``.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

from .model import (
    NON_RESIDENTIAL_SPECIES,
    Allocation,
    EstablishmentRecord,
    Rational,
    Rule,
    Sector,
    Species,
    StreetFace,
    UnallocatedEntry,
    face_sort_key,
)

WeightVector = Tuple[Tuple[str, int], ...]

FRACTIONAL = "fractional"
INTEGER = "integer"
ROUNDING_MODES = (FRACTIONAL, INTEGER)


class CepNotIndexed(LookupError):
    """The establishment's CEP has no faces; take the fallback path."""


@dataclass(frozen=True)
class CompatibilityMatrix:
    compatible: Mapping[Sector, frozenset]

    def __post_init__(self):
        for sector in Sector:
            if not self.compatible.get(sector):
                raise ValueError(f"compatibility for {sector.value} must be a non-empty species set")

    @classmethod
    def default(cls) -> "CompatibilityMatrix":
        return cls(
            {
                Sector.EDUCATION: frozenset({Species.EDUCATIONAL}),
                Sector.HEALTH: frozenset({Species.HEALTH}),
                Sector.AGRICULTURE: frozenset({Species.AGRICULTURAL}),
                Sector.OTHER: frozenset({Species.OTHER_PURPOSE}),
            }
        )

    @classmethod
    def from_dict(cls, overrides: Mapping) -> "CompatibilityMatrix":
        """Defaults with per-sector overrides, e.g. ``{"Other": [3, 6]}``."""
        table = dict(cls.default().compatible)
        for key, codes in (overrides or {}).items():
            table[Sector.parse(str(key))] = frozenset(Species.parse(c) for c in codes)
        return cls(table)

    def to_dict(self) -> dict:
        return {s.value: sorted(int(x) for x in self.compatible[s]) for s in Sector}

    def species_to_sectors(self) -> Dict[Species, Tuple[Sector, ...]]:
        inv: Dict[Species, list] = defaultdict(list)
        for sector in Sector:
            for sp in self.compatible[sector]:
                inv[sp].append(sector)
        return {sp: tuple(v) for sp, v in inv.items()}


@dataclass(frozen=True)
class CepIndex:
    by_cep: Mapping[str, Tuple[str, ...]]
    by_municipality: Mapping[str, Tuple[str, ...]]
    single_cep_municipalities: frozenset


def build_index(faces: Iterable[StreetFace], tallies: Mapping[str, Mapping]) -> CepIndex:
    """Index faces by every CEP present in their tally and by municipality.

    Faces without a tally still belong to their municipality, which is what
    the municipality-wide fallback spreads over.
    """
    by_cep: Dict[str, list] = defaultdict(list)
    by_muni: Dict[str, list] = defaultdict(list)
    muni_ceps: Dict[str, set] = defaultdict(set)
    for face in faces:
        code = face.face_code
        by_muni[face.municipality].append(code)
        tally = tallies.get(code)
        if not tally:
            continue
        ceps = {cep for (cep, _), n in tally.items() if n > 0}
        for cep in ceps:
            by_cep[cep].append(code)
        muni_ceps[face.municipality].update(ceps)
    return CepIndex(
        by_cep={c: tuple(sorted(v, key=face_sort_key)) for c, v in by_cep.items()},
        by_municipality={g: tuple(sorted(v, key=face_sort_key)) for g, v in by_muni.items()},
        single_cep_municipalities=frozenset(g for g, ceps in muni_ceps.items() if len(ceps) == 1),
    )


def _compatible_count(tally, cep, species_set) -> int:
    if not tally:
        return 0
    return sum(tally.get((cep, s), 0) for s in species_set)


def weights_for(
    e: EstablishmentRecord, index: CepIndex, matrix: CompatibilityMatrix, tallies: Mapping
) -> WeightVector:
    faces = index.by_cep.get(e.cep)
    if not faces:
        raise CepNotIndexed(e.cep)
    compat = matrix.compatible[e.sector]
    return tuple((f, _compatible_count(tallies.get(f), e.cep, compat)) for f in faces)


def municipality_weights(
    municipality: str, sector: Sector, index: CepIndex, matrix: CompatibilityMatrix, tallies: Mapping
) -> WeightVector:
    """Compatible-species counts per face of a municipality, summed over all CEPs."""
    compat = matrix.compatible[sector]
    out = []
    for f in index.by_municipality.get(municipality, ()):
        tally = tallies.get(f)
        w = sum(n for (_, s), n in tally.items() if s in compat) if tally else 0
        out.append((f, w))
    return tuple(out)


def _share(jobs: int, weight: int, total: int) -> Rational:
    n = jobs * weight
    q, r = divmod(n, total)
    return q if r == 0 else Fraction(n, total)


def _split(e: EstablishmentRecord, w: WeightVector, weighted_rule: Rule, uniform_rule: Rule) -> List[Allocation]:
    total = sum(x for _, x in w)
    eid, cep, jobs = e.establishment_id, e.cep, e.jobs
    if total > 0:
        return [Allocation(eid, f, cep, _share(jobs, x, total), weighted_rule) for f, x in w]
    share = _share(jobs, 1, len(w))
    return [Allocation(eid, f, cep, share, uniform_rule) for f, _ in w]


def allocate(e: EstablishmentRecord, w: WeightVector) -> List[Allocation]:
    """Weighted split when any weight is positive, uniform split otherwise."""
    if not w:
        raise ValueError("weight vector is empty")
    return _split(e, w, Rule.WEIGHTED, Rule.UNIFORM)


def allocate_fallback(
    e: EstablishmentRecord, index: CepIndex, matrix: CompatibilityMatrix, tallies: Mapping
) -> List[Allocation]:
    w = municipality_weights(e.municipality, e.sector, index, matrix, tallies)
    if not w:
        return [Allocation(e.establishment_id, None, e.cep, e.jobs, Rule.UNALLOCATED)]
    return _split(e, w, Rule.MUNICIPALITY_WIDE, Rule.MUNICIPALITY_WIDE)


def allocate_establishment(
    e: EstablishmentRecord, index: CepIndex, matrix: CompatibilityMatrix, tallies: Mapping
) -> List[Allocation]:
    try:
        w = weights_for(e, index, matrix, tallies)
    except CepNotIndexed:
        return allocate_fallback(e, index, matrix, tallies)
    return allocate(e, w)


def round_to_integers(allocations: Sequence[Allocation], mode: str = FRACTIONAL) -> List[Allocation]:
    """Integer apportionment of one establishment's allocations.

    Floors every amount, then hands the leftover units one at a time to the
    largest fractional parts; ties go to the lower face code.
    """
    if mode == FRACTIONAL:
        return list(allocations)
    if mode != INTEGER:
        raise ValueError(f"unknown rounding mode {mode!r}")
    if not allocations:
        return []
    floors = [math.floor(a.amount) for a in allocations]
    total = sum(a.amount for a in allocations)
    if total != int(total):
        raise ValueError("establishment total is not integral")
    leftover = int(total) - sum(floors)
    order = sorted(
        range(len(allocations)),
        key=lambda i: (
            -(allocations[i].amount - floors[i]),
            face_sort_key(allocations[i].face_code) if allocations[i].face_code else (-1, ""),
        ),
    )
    for i in order[:leftover]:
        floors[i] += 1
    return [
        Allocation(a.establishment_id, a.face_code, a.cep, n, a.rule) for a, n in zip(allocations, floors)
    ]


def non_residential(tally, cep: str) -> int:
    return _compatible_count(tally, cep, NON_RESIDENTIAL_SPECIES)


def aggregate(allocations: Iterable[Allocation], tallies: Mapping) -> List[tuple]:
    """Sum allocated jobs per ``(face, cep)``.

    Returns ``(face_code, cep, non_residential, jobs)`` rows in ascending face
    code then CEP order, leaving out rows with zero jobs and unallocated
    entries.
    """
    acc: Dict[tuple, Rational] = {}
    for a in allocations:
        if a.face_code is None:
            continue
        key = (a.face_code, a.cep)
        acc[key] = acc.get(key, 0) + a.amount
    for key, v in acc.items():
        if isinstance(v, Fraction) and v.denominator == 1:
            acc[key] = v.numerator
    return _rows(acc, tallies)


def _rows(acc: Mapping[tuple, Rational], tallies: Mapping) -> List[tuple]:
    rows = [
        (face, cep, non_residential(tallies.get(face), cep), jobs)
        for (face, cep), jobs in acc.items()
        if jobs != 0
    ]
    rows.sort(key=lambda r: (face_sort_key(r[0]), r[1]))
    return rows


@dataclass
class PartitionResult:
    rows: List[tuple]
    rule_histogram: Counter
    unallocated: List[UnallocatedEntry]
    input_jobs: int
    allocated_jobs: Rational


def allocate_partition(
    establishments: Sequence[EstablishmentRecord],
    index: CepIndex,
    matrix: CompatibilityMatrix,
    tallies: Mapping,
    mode: str = FRACTIONAL,
) -> PartitionResult:
    """Allocate and aggregate every establishment of one partition.

    In fractional mode establishments sharing a ``(cep, sector)`` pair share
    one weight vector, so their jobs are pooled and split once; the split is
    linear in the job count, so the per-face sums are identical to splitting
    each establishment separately. Integer mode rounds per establishment and
    therefore splits each one individually.
    """
    hist: Counter = Counter()
    unallocated: List[UnallocatedEntry] = []
    acc: Dict[tuple, Rational] = {}
    input_jobs = sum(e.jobs for e in establishments)

    if mode == INTEGER:
        for e in establishments:
            allocs = allocate_establishment(e, index, matrix, tallies)
            hist[allocs[0].rule] += 1
            if allocs[0].rule is Rule.UNALLOCATED:
                unallocated.append(_unallocated(e))
                continue
            for a in round_to_integers(allocs, INTEGER):
                if a.amount:
                    key = (a.face_code, a.cep)
                    acc[key] = acc.get(key, 0) + a.amount
    elif mode == FRACTIONAL:
        groups: Dict[tuple, list] = defaultdict(list)
        for e in establishments:
            groups[(e.municipality, e.cep, e.sector)].append(e)
        # (face, cep) -> [numerator, denominator], reduced once at the end
        pairs: Dict[tuple, list] = {}
        for (muni, cep, sector), members in groups.items():
            pooled = sum(e.jobs for e in members)
            rep = EstablishmentRecord(members[0].establishment_id, muni, cep, sector, pooled, members[0].year)
            try:
                w = weights_for(rep, index, matrix, tallies)
                rule = Rule.WEIGHTED
            except CepNotIndexed:
                w = municipality_weights(muni, sector, index, matrix, tallies)
                rule = Rule.MUNICIPALITY_WIDE
            total = sum(x for _, x in w)
            if not w:
                rule = Rule.UNALLOCATED
            elif total == 0:
                if rule is Rule.WEIGHTED:
                    rule = Rule.UNIFORM
                w = tuple((f, 1) for f, _ in w)
                total = len(w)
            hist[rule] += len(members)
            if rule is Rule.UNALLOCATED:
                unallocated.extend(_unallocated(e) for e in members)
                continue
            if pooled == 0:
                continue
            for f, x in w:
                if not x:
                    continue
                key = (f, cep)
                p = pairs.get(key)
                if p is None:
                    pairs[key] = [pooled * x, total]
                elif p[1] == total:
                    p[0] += pooled * x
                else:
                    p[0] = p[0] * total + pooled * x * p[1]
                    p[1] *= total
        for key, (num, den) in pairs.items():
            q, r = divmod(num, den)
            acc[key] = q if r == 0 else Fraction(num, den)
    else:
        raise ValueError(f"unknown rounding mode {mode!r}")

    rows = _rows(acc, tallies)
    allocated = exact_sum(r[3] for r in rows)
    return PartitionResult(rows, hist, unallocated, input_jobs, allocated)


def exact_sum(values: Iterable[Rational]) -> Rational:
    """Exact sum that adds numerators per denominator before touching Fractions."""
    by_den: Dict[int, int] = {}
    for v in values:
        if isinstance(v, int):
            by_den[1] = by_den.get(1, 0) + v
        else:
            d = v.denominator
            by_den[d] = by_den.get(d, 0) + v.numerator
    total = Fraction(by_den.pop(1, 0))
    for d, n in by_den.items():
        total += Fraction(n, d)
    return total.numerator if total.denominator == 1 else total


def _unallocated(e: EstablishmentRecord) -> UnallocatedEntry:
    return UnallocatedEntry(e.establishment_id, e.municipality, e.cep, e.jobs, "MunicipalityHasNoFaces")
