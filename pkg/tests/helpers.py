"""Fixture builders shared by the test modules."""

import csv
import os
import random

from facejobs.model import EstablishmentRecord, Geometry, Sector, Species, StreetFace

ACTIVITY = {"Other": "4711302", "Education": "8513900", "Health": "8610101", "Agriculture": "0111301"}


def write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_inputs(directory, faces, species, establishments):
    """Write normalized-layout inputs.

    faces: (face_code, municipality, wkt)
    species: (face_code, municipality, cep, species)
    establishments: (id, municipality, cep, sector name or activity code, jobs, year)
    """
    os.makedirs(directory, exist_ok=True)
    est_rows = [(i, m, c, ACTIVITY.get(a, a), j, y) for i, m, c, a, j, y in establishments]
    return {
        "faces": write_rows(os.path.join(directory, "faces.csv"), ("face_code", "municipality", "geometry"), faces),
        "species": write_rows(
            os.path.join(directory, "species.csv"), ("face_code", "municipality", "cep", "species"), species
        ),
        "establishments": write_rows(
            os.path.join(directory, "establishments.csv"),
            ("establishment_id", "municipality", "cep", "activity", "jobs", "year"),
            est_rows,
        ),
    }


def random_instance(rng: random.Random):
    """A small allocation problem: <=6 faces, <=5 establishments, jobs <= 20.

    Returns raw tuples for the oracle plus the matching model objects.
    """
    muni = "1721000"
    n_faces = rng.randint(0, 6)
    codes = sorted(rng.sample(range(1, 40), n_faces))
    faces = [(f"{muni}{c:014d}", muni) for c in codes]
    cep_pool = ["77001422", "77001440", "77001390"]
    addresses = []
    for code, _ in faces:
        for _ in range(rng.randint(0, 6)):
            addresses.append((code, rng.choice(cep_pool), rng.randint(1, 7)))
    establishments = []
    for k in range(rng.randint(1, 5)):
        # a fourth CEP no face carries, and sometimes a municipality without faces
        est_muni = muni if rng.random() < 0.85 else "1100015"
        cep = rng.choice(cep_pool + ["77009999"])
        sector = rng.choice(["Other", "Education", "Health", "Agriculture"])
        establishments.append((f"e{k}", est_muni, cep, sector, rng.randint(0, 20)))
    return faces, addresses, establishments


def model_objects(faces, addresses, establishments):
    face_objs = [StreetFace(code, muni, Geometry(((0.0, 0.0), (1.0, 0.0)))) for code, muni in faces]
    addr_objs = [(f, c, Species(s)) for f, c, s in addresses]
    est_objs = [
        EstablishmentRecord(i, m, c, Sector(sector), jobs, 2019) for i, m, c, sector, jobs in establishments
    ]
    return face_objs, addr_objs, est_objs
