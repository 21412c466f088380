"""Compare pipeline output against a generator ground-truth ledger."""

from __future__ import annotations

import csv
import glob
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List

from .export import format_jobs, parse_exact, read_csv


@dataclass
class VerifyResult:
    mode: str
    rows_compared: int = 0
    diffs: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diffs


def _output_csvs(output_dir: str) -> List[str]:
    combined = os.path.join(output_dir, "jobs.csv")
    if os.path.exists(combined):
        return [combined]
    return sorted(glob.glob(os.path.join(output_dir, "*", "jobs.csv")))


def load_truth(truth_dir: str):
    rows: Dict[tuple, tuple] = {}
    with open(os.path.join(truth_dir, "jobs_truth.csv"), encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh):
            rows[(r["cod_face"], r["CEP"])] = (r["municipality"], parse_exact(r["jobs"]), int(r["establishments"]))
    unalloc = set()
    path = os.path.join(truth_dir, "unallocated.csv")
    if os.path.exists(path):
        with open(path, encoding="utf-8", newline="") as fh:
            unalloc = {r["establishment_id"] for r in csv.DictReader(fh)}
    return rows, unalloc


def verify(output_dir: str, truth_dir: str, max_diffs: int = 50) -> VerifyResult:
    """Per-face comparison of an output directory with a truth ledger.

    Fractional runs must match the truth exactly at the CSV's 6-decimal
    precision. Integer runs must keep every municipality total and may move
    each face by less than one job per contributing establishment.
    """
    report_path = os.path.join(output_dir, "report.json")
    with open(report_path, encoding="utf-8") as fh:
        report = json.load(fh)
    mode = report.get("rounding", "fractional")
    result = VerifyResult(mode)

    def diff(msg: str) -> None:
        if len(result.diffs) < max_diffs:
            result.diffs.append(msg)
        elif len(result.diffs) == max_diffs:
            result.diffs.append("... further differences suppressed")

    truth, truth_unalloc = load_truth(truth_dir)
    seen = set()
    out_muni_totals: Dict[str, Fraction] = {}
    for path in _output_csvs(output_dir):
        with open(path, "rb") as fh:
            for p in read_csv(fh):
                key = (p.face_code, p.cep)
                seen.add(key)
                result.rows_compared += 1
                expect = truth.get(key)
                if expect is None:
                    diff(f"face {p.face_code} CEP {p.cep}: output has {format_jobs(p.jobs)} jobs, truth has none")
                    continue
                muni, jobs, n = expect
                out_muni_totals[muni] = out_muni_totals.get(muni, 0) + p.jobs
                if mode == "integer":
                    if not abs(p.jobs - jobs) < n:
                        diff(f"face {p.face_code} CEP {p.cep}: integer {p.jobs} vs exact {jobs} exceeds bound {n}")
                elif format_jobs(p.jobs) != format_jobs(jobs):
                    diff(f"face {p.face_code} CEP {p.cep}: output {format_jobs(p.jobs)} != truth {format_jobs(jobs)}")
    truth_muni_totals: Dict[str, Fraction] = {}
    for key, (muni, jobs, n) in truth.items():
        truth_muni_totals[muni] = truth_muni_totals.get(muni, 0) + jobs
        if key in seen:
            continue
        if mode == "integer" and n > 0 and jobs < n:
            # every contributor may have rounded this face down to zero
            continue
        if format_jobs(jobs) != "0":
            diff(f"face {key[0]} CEP {key[1]}: missing from output (truth {format_jobs(jobs)})")
    if mode == "integer":
        for muni in sorted(truth_muni_totals):
            if out_muni_totals.get(muni, 0) != truth_muni_totals[muni]:
                diff(f"municipality {muni}: integer total {out_muni_totals.get(muni, 0)} != {truth_muni_totals[muni]}")
    out_unalloc = {u["establishment_id"] for u in report.get("unallocated", [])}
    for eid in sorted(truth_unalloc ^ out_unalloc):
        side = "truth" if eid in truth_unalloc else "output"
        diff(f"establishment {eid}: unallocated only in {side}")
    return result
