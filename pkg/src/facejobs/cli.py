"""Command line entry point: ``facejobs {run,generate,verify,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .ingest import MappingError, StrictModeError
from .pipeline import ConfigError, InputError, RunConfig, inspect, run
from .synthetic import generate_synthetic, load_spec
from .verify import verify

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INPUT = 2
EXIT_MISMATCH = 3
EXIT_STRICT = 4

log = logging.getLogger("facejobs")


def _csv_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _add_inputs(p):
    p.add_argument("--config", help="YAML run config; flags override its values")
    p.add_argument("--faces", help="face geometry file")
    p.add_argument("--species", help="address species file")
    p.add_argument("--establishments", help="establishments file")
    p.add_argument(
        "--mapping", action="append", dest="mappings",
        help="column mapping YAML (repeatable; later files override sections)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facejobs", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="allocate jobs to street faces and export")
    _add_inputs(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--year", type=int, help="keep only establishments of this year")
    p.add_argument("--municipalities", type=_csv_list, help="comma-separated geocodes to process")
    p.add_argument("--rounding", choices=("fractional", "integer"))
    p.add_argument("--strict", action="store_true", default=None, help="abort on the first rejected row")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--combined", action="store_true", default=None, help="one national CSV/GeoJSON")
    p.add_argument("--bucket-bytes", type=int, dest="bucket_bytes", help="partition bucket size")

    p = sub.add_parser("generate", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="YAML synthetic spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--municipalities", type=int)
    p.add_argument("--faceless", type=int, dest="faceless_municipalities")
    p.add_argument("--single-cep-fraction", type=float, dest="single_cep_fraction")
    p.add_argument("--no-truth", action="store_true", help="skip the ground-truth ledger")

    p = sub.add_parser("verify", help="compare an output directory with a truth ledger")
    p.add_argument("--out", required=True, help="output directory of a run")
    p.add_argument("--truth", required=True, help="truth directory written by generate")

    p = sub.add_parser("inspect", help="print ingest statistics without allocating")
    _add_inputs(p)
    return parser


def _config(args, **extra) -> RunConfig:
    overrides = {
        "faces": args.faces,
        "species": args.species,
        "establishments": args.establishments,
        "mappings": tuple(args.mappings) if args.mappings else None,
        **extra,
    }
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def cmd_run(args) -> int:
    cfg = _config(
        args,
        out=args.out,
        year=args.year,
        municipalities=args.municipalities,
        rounding=args.rounding,
        strict=args.strict,
        jobs=args.jobs,
        combined=args.combined,
        bucket_bytes=args.bucket_bytes,
    )
    t0 = time.perf_counter()
    report = run(cfg)
    log.info("run finished in %.1f s with %d worker(s)", time.perf_counter() - t0, cfg.jobs)
    status = "conserved" if report.conserved else "NOT CONSERVED"
    print(
        f"input jobs {report.input_jobs_total}, allocated {report.allocated_jobs_total}, "
        f"unallocated {report.unallocated_jobs_total} ({status}); outputs in {cfg.out}"
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    spec = load_spec(
        args.spec,
        seed=args.seed,
        municipalities=args.municipalities,
        faceless_municipalities=args.faceless_municipalities,
        single_cep_fraction=args.single_cep_fraction,
    )
    paths = generate_synthetic(spec, args.out, ground_truth=not args.no_truth)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    result = verify(args.out, args.truth)
    for line in result.diffs:
        print(line)
    verdict = "PASS" if result.ok else "FAIL"
    print(f"{verdict}: {result.rows_compared} rows compared ({result.mode} mode), {len(result.diffs)} differences")
    return EXIT_OK if result.ok else EXIT_MISMATCH


def cmd_inspect(args) -> int:
    cfg = _config(args, out=".")
    stats = inspect(cfg)
    print(json.dumps({k: v.to_dict() for k, v in stats.items()}, indent=2))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "generate": cmd_generate, "verify": cmd_verify, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except StrictModeError as exc:
        print(f"strict mode: rejected row: {exc}", file=sys.stderr)
        return EXIT_STRICT
    except (ConfigError, MappingError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
