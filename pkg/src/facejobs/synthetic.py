"""Seeded synthetic inputs plus a ground-truth ledger.

The generator writes faces, address species and establishments in the
normalized layouts (``mappings/normalized.yaml``), one municipality at a
time, so memory stays flat however many municipalities are requested.
The ground truth is computed here by a deliberately plain, per-establishment
implementation that shares no code with :mod:`facejobs.allocator`.
"""

from __future__ import annotations

import csv
import os
import random
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Tuple

import yaml

RESIDENTIAL = (1, 2)
DEFAULT_COMPATIBLE = {"Education": (4,), "Health": (5,), "Agriculture": (3,), "Other": (6,)}
ACTIVITY_CODES = {
    "Education": ("8513900", "8520100", "8531700"),
    "Health": ("8610101", "8630501", "8640202"),
    "Agriculture": ("0111301", "0151201", "0210101"),
    "Other": ("4711302", "1091101", "6201501", "4930202", "5611201"),
}


@dataclass
class SyntheticSpec:
    municipalities: int = 10
    faces_per_municipality: Tuple[int, int] = (50, 150)
    single_cep_fraction: float = 0.2
    faces_per_cep: Tuple[int, int] = (1, 8)
    # per species: probability that a face carries it, and max count when it does
    species_presence: Mapping[int, float] = field(
        default_factory=lambda: {1: 0.8, 2: 0.02, 3: 0.03, 4: 0.05, 5: 0.05, 6: 0.5, 7: 0.03}
    )
    species_max: Mapping[int, int] = field(
        default_factory=lambda: {1: 3, 2: 1, 3: 2, 4: 1, 5: 2, 6: 4, 7: 1}
    )
    second_cep_probability: float = 0.05
    establishments_per_municipality: Tuple[int, int] = (20, 80)
    sector_weights: Mapping[str, float] = field(
        default_factory=lambda: {"Other": 0.8, "Education": 0.08, "Health": 0.08, "Agriculture": 0.04}
    )
    jobs_max: int = 200
    zero_jobs_probability: float = 0.05
    orphan_cep_probability: float = 0.03
    faceless_municipalities: int = 0
    year: int = 2019
    seed: int = 0

    def validate(self) -> None:
        if self.municipalities < 0 or self.faceless_municipalities < 0:
            raise ValueError("municipality counts must be non-negative")
        if not 0.0 <= self.single_cep_fraction <= 1.0:
            raise ValueError("single_cep_fraction must lie in [0, 1]")
        for name in ("faces_per_municipality", "faces_per_cep", "establishments_per_municipality"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ascending non-negative range")
        if self.faces_per_cep[0] < 1:
            raise ValueError("faces_per_cep must start at 1 or more")
        if self.municipalities + self.faceless_municipalities > 690_000:
            raise ValueError("too many municipalities for the 7-digit geocode space used")
        if self.faces_per_municipality[1] > 900:
            raise ValueError("at most 900 faces per municipality (CEP block size)")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticSpec":
        data = dict(data)
        for key in ("faces_per_municipality", "faces_per_cep", "establishments_per_municipality"):
            if key in data:
                data[key] = tuple(data[key])
        for key in ("species_presence", "species_max"):
            if key in data:
                data[key] = {int(k): v for k, v in data[key].items()}
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("faces_per_municipality", "faces_per_cep", "establishments_per_municipality"):
            d[key] = list(d[key])
        d["species_presence"] = {int(k): v for k, v in sorted(d["species_presence"].items())}
        d["species_max"] = {int(k): v for k, v in sorted(d["species_max"].items())}
        d["sector_weights"] = dict(sorted(d["sector_weights"].items()))
        return d


def geocode_for(i: int) -> str:
    return f"{1100000 + 7 * i:07d}"


def single_cep_count(spec: SyntheticSpec) -> int:
    return int(round(spec.single_cep_fraction * spec.municipalities))


@dataclass
class _Municipality:
    geocode: str
    faces: List[Tuple[str, str]]  # (face code, WKT)
    addresses: List[Tuple[str, str, int]]  # (face code, cep, species)
    establishments: List[Tuple[str, str, str, str, int]]  # (id, cep, sector, activity, jobs)
    single_cep: bool


def _fmt(x: float) -> str:
    return f"{x:.6f}".rstrip("0").rstrip(".")


def _municipality(rng: random.Random, spec: SyntheticSpec, i: int, single: bool, faceless: bool) -> _Municipality:
    geocode = geocode_for(i)
    cep_base = 10_000_000 + 1000 * i
    n_faces = 0 if faceless else rng.randint(*spec.faces_per_municipality)
    lon0 = rng.uniform(-70.0, -36.0)
    lat0 = rng.uniform(-32.0, 2.0)

    faces: List[Tuple[str, str]] = []
    addresses: List[Tuple[str, str, int]] = []
    cep_of_face: List[str] = []
    block, left = 0, 0
    for j in range(n_faces):
        if single:
            cep = f"{cep_base:08d}"
        else:
            if left == 0:
                block += 1
                left = rng.randint(*spec.faces_per_cep)
            left -= 1
            cep = f"{cep_base + block:08d}"
        cep_of_face.append(cep)
        code = f"{geocode}{j + 1:014d}"
        x, y = lon0 + rng.uniform(-0.05, 0.05), lat0 + rng.uniform(-0.05, 0.05)
        n_vertices = rng.choice((2, 2, 2, 3, 4))
        verts = [(x, y)]
        for _ in range(n_vertices - 1):
            x += rng.uniform(-0.001, 0.001)
            y += rng.uniform(-0.001, 0.001)
            verts.append((x, y))
        wkt = "LINESTRING (" + ", ".join(f"{_fmt(a)} {_fmt(b)}" for a, b in verts) + ")"
        faces.append((code, wkt))
        for sp in sorted(spec.species_presence):
            if rng.random() < spec.species_presence[sp]:
                for _ in range(rng.randint(1, spec.species_max.get(sp, 1))):
                    addresses.append((code, cep, sp))
        if not single and rng.random() < spec.second_cep_probability:
            other = f"{cep_base + block + 1:08d}"
            addresses.append((code, other, 6 if rng.random() < 0.7 else 1))

    used_ceps = sorted({cep for _, cep, _ in addresses})
    sectors = sorted(spec.sector_weights)
    weights = [spec.sector_weights[s] for s in sectors]
    establishments = []
    for k in range(rng.randint(*spec.establishments_per_municipality)):
        sector = rng.choices(sectors, weights)[0]
        if not used_ceps or rng.random() < spec.orphan_cep_probability:
            cep = f"{cep_base + 999:08d}"
        else:
            cep = rng.choice(used_ceps)
        if rng.random() < spec.zero_jobs_probability:
            jobs = 0
        else:
            jobs = min(spec.jobs_max, int(rng.paretovariate(1.2)))
        activity = rng.choice(ACTIVITY_CODES[sector])
        establishments.append((f"{geocode}-{k + 1:06d}", cep, sector, activity, jobs))
    return _Municipality(geocode, faces, addresses, establishments, single)


def reference_allocation(
    faces: List[str],
    addresses: List[Tuple[str, str, int]],
    establishments: List[Tuple[str, str, str, str, int]],
    compatible: Mapping[str, Tuple[int, ...]] = DEFAULT_COMPATIBLE,
):
    """Plain per-establishment split within one municipality.

    Returns ``(per_row, unallocated)`` where ``per_row`` maps
    ``(face, cep) -> [exact jobs, contributing establishments]``.
    """
    per_row: Dict[Tuple[str, str], list] = {}
    unallocated = []
    for est_id, cep, sector, _, jobs in establishments:
        ok = compatible[sector]
        targets = sorted({f for f, c, _ in addresses if c == cep}, key=lambda f: (int(f), f))
        if targets:
            weight = {f: sum(1 for g, c, s in addresses if g == f and c == cep and s in ok) for f in targets}
        else:
            targets = sorted(faces, key=lambda f: (int(f), f))
            if not targets:
                unallocated.append((est_id, cep, jobs))
                continue
            weight = {f: sum(1 for g, _, s in addresses if g == f and s in ok) for f in targets}
        total = sum(weight.values())
        for f in targets:
            share = Fraction(jobs * weight[f], total) if total else Fraction(jobs, len(targets))
            if share:
                row = per_row.setdefault((f, cep), [Fraction(0), 0])
                row[0] += share
                row[1] += 1
    return per_row, unallocated


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def generate_synthetic(spec: SyntheticSpec, out_dir: str, ground_truth: bool = True) -> Dict[str, str]:
    """Write the three input files (and optionally the truth ledger) to ``out_dir``."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    rng = random.Random(spec.seed)
    total = spec.municipalities + spec.faceless_municipalities
    single = set(rng.sample(range(spec.municipalities), single_cep_count(spec)))
    paths = {
        "faces": os.path.join(out_dir, "faces.csv"),
        "species": os.path.join(out_dir, "species.csv"),
        "establishments": os.path.join(out_dir, "establishments.csv"),
        "spec": os.path.join(out_dir, "synthetic_spec.yaml"),
    }
    with open(paths["spec"], "w", encoding="utf-8") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=True)

    truth_dir = os.path.join(out_dir, "truth")
    files = [
        open(paths["faces"], "w", encoding="utf-8", newline=""),
        open(paths["species"], "w", encoding="utf-8", newline=""),
        open(paths["establishments"], "w", encoding="utf-8", newline=""),
    ]
    truth_files = []
    if ground_truth:
        os.makedirs(truth_dir, exist_ok=True)
        paths["truth"] = os.path.join(truth_dir, "jobs_truth.csv")
        paths["truth_unallocated"] = os.path.join(truth_dir, "unallocated.csv")
        paths["truth_municipalities"] = os.path.join(truth_dir, "municipalities.csv")
        truth_files = [
            open(paths["truth"], "w", encoding="utf-8", newline=""),
            open(paths["truth_unallocated"], "w", encoding="utf-8", newline=""),
            open(paths["truth_municipalities"], "w", encoding="utf-8", newline=""),
        ]
    try:
        wf, ws, we = (csv.writer(f, lineterminator="\n") for f in files)
        wf.writerow(("face_code", "municipality", "geometry"))
        ws.writerow(("face_code", "municipality", "cep", "species"))
        we.writerow(("establishment_id", "municipality", "cep", "activity", "jobs", "year"))
        if truth_files:
            wt, wu, wm = (csv.writer(f, lineterminator="\n") for f in truth_files)
            wt.writerow(("cod_face", "CEP", "municipality", "jobs", "establishments"))
            wu.writerow(("establishment_id", "municipality", "cep", "jobs"))
            wm.writerow(("municipality", "single_cep", "input_jobs", "allocated_jobs"))
        for i in range(total):
            m = _municipality(rng, spec, i, i in single, faceless=i >= spec.municipalities)
            g = m.geocode
            wf.writerows((code, g, wkt) for code, wkt in m.faces)
            ws.writerows((f, g, c, s) for f, c, s in m.addresses)
            we.writerows((eid, g, cep, act, jobs, spec.year) for eid, cep, _, act, jobs in m.establishments)
            if truth_files:
                per_row, unalloc = reference_allocation([f for f, _ in m.faces], m.addresses, m.establishments)
                for (f, c) in sorted(per_row, key=lambda k: ((int(k[0]), k[0]), k[1])):
                    jobs, n = per_row[(f, c)]
                    wt.writerow((f, c, g, str(jobs), n))
                wu.writerows((eid, g, cep, jobs) for eid, cep, jobs in unalloc)
                wm.writerow(
                    (g, int(m.single_cep), sum(e[4] for e in m.establishments), str(sum(v[0] for v in per_row.values())))
                )
    finally:
        for f in files + truth_files:
            f.close()
    return paths


def load_spec(path: Optional[str], **overrides) -> SyntheticSpec:
    data = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return SyntheticSpec.from_dict(data)
