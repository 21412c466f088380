import filecmp
import json
import os

import pytest
import yaml

from facejobs.cli import main
from facejobs.ingest import default_mapping_path
from facejobs.pipeline import ConfigError, InputError, RunConfig, run
from facejobs.synthetic import SyntheticSpec, generate_synthetic

from helpers import write_inputs

MUNI_A, MUNI_B = "1721000", "3548906"
FA = [f"{MUNI_A}{n:014d}" for n in range(1, 4)]
FB = [f"{MUNI_B}{n:014d}" for n in range(1, 3)]
LINE = "LINESTRING (-48.354 -10.1651, -48.3526 -10.1651)"


def read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def config(paths, out, **kw):
    return RunConfig(faces=paths["faces"], species=paths["species"], establishments=paths["establishments"], out=str(out), **kw)


def two_municipalities(tmp_path):
    return write_inputs(
        tmp_path / "in",
        [(FA[0], MUNI_A, LINE), (FA[1], MUNI_A, "POINT (-48.35 -10.16)"), (FB[0], MUNI_B, "POINT (-47.89 -22.01)"),
         (FB[1], MUNI_B, "LINESTRING (-47.9 -22, -47.9 -22)")],
        [(FA[0], MUNI_A, "77001422", 6), (FA[0], MUNI_A, "77001422", 6), (FA[1], MUNI_A, "77001422", 6),
         (FA[1], MUNI_A, "77001440", 1), (FB[0], MUNI_B, "13560000", 6), (FB[1], MUNI_B, "13560000", 4)],
        [("a1", MUNI_A, "77001422", "Other", 9, 2019), ("a2", MUNI_A, "77001440", "Education", 5, 2019),
         ("a3", MUNI_A, "77009999", "Other", 4, 2019), ("b1", MUNI_B, "13560000", "Education", 3, 2019),
         ("b2", MUNI_B, "13560000", "Other", 2, 2018), ("z1", "1100015", "76800000", "Health", 7, 2019)],
    )


def test_single_face_single_establishment(tmp_path):
    paths = write_inputs(
        tmp_path / "in",
        [(FA[0], MUNI_A, LINE)],
        [(FA[0], MUNI_A, "77001390", 6)],
        [("e1", MUNI_A, "77001390", "Other", 4, 2019)],
    )
    report = run(config(paths, tmp_path / "out"))
    assert read(tmp_path / "out" / MUNI_A / "jobs.csv") == (
        "cod_face,CEP,non residencial,jobs,lon,lat\n" f"{FA[0]},77001390,1,4,-48.3533,-10.1651\n"
    )
    assert report.conserved and report.input_jobs_total == 4


def test_empty_establishments(tmp_path):
    paths = write_inputs(tmp_path / "in", [(FA[0], MUNI_A, LINE)], [(FA[0], MUNI_A, "77001390", 6)], [])
    report = run(config(paths, tmp_path / "out"))
    assert read(tmp_path / "out" / MUNI_A / "jobs.csv") == "cod_face,CEP,non residencial,jobs,lon,lat\n"
    d = json.loads(read(tmp_path / "out" / "report.json"))
    assert (d["conservation"]["input_jobs"], d["conservation"]["allocated_jobs"]) == (0, "0")
    assert report.conserved


def test_municipality_filter(tmp_path):
    paths = two_municipalities(tmp_path)
    run(config(paths, tmp_path / "out", municipalities=(MUNI_B,)))
    outputs = sorted(d for d in os.listdir(tmp_path / "out") if os.path.isdir(tmp_path / "out" / d))
    assert outputs == [MUNI_B]


def test_full_run_accounting(tmp_path):
    paths = two_municipalities(tmp_path)
    report = run(config(paths, tmp_path / "out", year=2019))
    assert report.conserved
    assert report.input_jobs_total == 9 + 5 + 4 + 3 + 7
    assert [u.establishment_id for u in report.unallocated] == ["z1"]
    assert report.filtered_establishments == 1
    assert report.degenerate_faces == [FB[1]]
    d = json.loads(read(tmp_path / "out" / "report.json"))
    assert d["rule_histogram"] == {
        "WeightedBySpecies": 2, "UniformOverCepFaces": 1, "MunicipalityWide": 1, "Unallocated": 1
    }
    b = read(tmp_path / "out" / MUNI_B / "jobs.csv").splitlines()
    # the education establishment's only species-4 address sits on the degenerate face
    assert b[1:] == [f"{FB[1]},13560000,1,3,-47.9,-22"]


def test_partition_independence(tmp_path):
    paths = two_municipalities(tmp_path)
    run(config(paths, tmp_path / "one", combined=True))
    run(config(paths, tmp_path / "many", combined=True, bucket_bytes=64))
    assert read(tmp_path / "one" / "jobs.csv") == read(tmp_path / "many" / "jobs.csv")
    assert read(tmp_path / "one" / "jobs.geojson") == read(tmp_path / "many" / "jobs.geojson")
    run(config(paths, tmp_path / "split"))
    pieces = []
    for g in sorted([MUNI_A, MUNI_B]):
        pieces += read(tmp_path / "split" / g / "jobs.csv").splitlines()[1:]
    assert read(tmp_path / "one" / "jobs.csv").splitlines()[1:] == sorted(pieces, key=lambda r: int(r.split(",")[0]))
    for g in (MUNI_A, MUNI_B):
        alone = config(paths, tmp_path / f"only{g}", municipalities=(g,))
        run(alone)
        assert filecmp.cmp(tmp_path / f"only{g}" / g / "jobs.csv", tmp_path / "split" / g / "jobs.csv", shallow=False)


def test_orphan_species_and_geometry_only_faces(tmp_path):
    ghost = f"{MUNI_A}{99:014d}"
    paths = write_inputs(
        tmp_path / "in",
        [(FA[0], MUNI_A, LINE), (FA[1], MUNI_A, LINE)],
        [(FA[0], MUNI_A, "77001390", 6), (ghost, MUNI_A, "77001390", 6), (ghost, MUNI_A, "77001390", 6)],
        [("e1", MUNI_A, "77001390", "Other", 4, 2019), ("e2", MUNI_A, "70000000", "Other", 2, 2019)],
    )
    report = run(config(paths, tmp_path / "out"))
    assert (report.orphan_species_faces, report.orphan_species_rows) == (1, 2)
    assert read(tmp_path / "out" / MUNI_A / "jobs.csv").splitlines()[1:] == [
        f"{FA[0]},70000000,0,2,-48.3533,-10.1651",
        f"{FA[0]},77001390,1,4,-48.3533,-10.1651",
    ]


def test_bbox_warning(tmp_path):
    paths = write_inputs(
        tmp_path / "in", [(FA[0], MUNI_A, LINE)], [(FA[0], MUNI_A, "77001390", 6)],
        [("e1", MUNI_A, "77001390", "Other", 4, 2019)],
    )
    report = run(config(paths, tmp_path / "out", bboxes={MUNI_A: [0, 0, 1, 1]}))
    assert report.coordinate_warnings == [(FA[0], "Warn")]


def test_config_validation(tmp_path):
    paths = two_municipalities(tmp_path)
    with pytest.raises(ConfigError):
        run(config(paths, tmp_path / "out", jobs=0))
    with pytest.raises(ConfigError):
        run(config(paths, tmp_path / "out", rounding="banker"))
    with pytest.raises(InputError):
        run(RunConfig(faces=str(tmp_path / "nope.csv"), species=paths["species"],
                      establishments=paths["establishments"], out=str(tmp_path / "out")))


def test_config_file_relative_paths_and_overrides(tmp_path):
    paths = two_municipalities(tmp_path)
    cfg_path = tmp_path / "in" / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(
        {"faces": "faces.csv", "species": "species.csv", "establishments": "establishments.csv",
         "out": "../out", "rounding": "integer", "mappings": [default_mapping_path()]}
    ))
    cfg = RunConfig.from_file(str(cfg_path), rounding="fractional", municipalities=[MUNI_A])
    assert cfg.faces == paths["faces"]
    assert cfg.rounding == "fractional" and cfg.municipalities == (MUNI_A,)
    run(cfg)
    assert os.path.exists(tmp_path / "out" / MUNI_A / "jobs.csv")


def test_sample_layout_mappings_end_to_end(tmp_path):
    base = default_mapping_path()
    maps = [base.replace("normalized.yaml", n) for n in ("cnefe2019_like.yaml", "rais2014_like.yaml")]
    d = tmp_path / "in"
    d.mkdir()
    (d / "faces.csv").write_bytes(f'CD_FACE;CD_MUN;WKT\n{FA[0]};{MUNI_A};{LINE}\n'.encode("latin-1"))
    (d / "species.txt").write_bytes(f"{MUNI_A}{FA[0]}7700142206\n{MUNI_A}{FA[0]}7700142206\n".encode("latin-1"))
    (d / "rais.csv").write_bytes(
        "Id Estab;Município;CEP Estab;CNAE 2.0 Subclasse;Qtd Vínculos Ativos\nx;1721000;77001-422;4711302;8\n".encode("latin-1")
    )
    run(RunConfig(faces=str(d / "faces.csv"), species=str(d / "species.txt"), establishments=str(d / "rais.csv"),
                  out=str(tmp_path / "out"), mappings=tuple(maps)))
    assert read(tmp_path / "out" / MUNI_A / "jobs.csv").splitlines()[1] == f"{FA[0]},77001422,2,8,-48.3533,-10.1651"


# -- CLI ------------------------------------------------------------------


def cli(*args):
    return main([str(a) for a in args])


def test_cli_exit_codes(tmp_path, capsys):
    paths = two_municipalities(tmp_path)
    common = ["--faces", paths["faces"], "--species", paths["species"], "--establishments", paths["establishments"]]
    assert cli("run", *common, "--out", tmp_path / "ok") == 0
    assert "conserved" in capsys.readouterr().out
    assert cli("run", *common, "--out", tmp_path / "x", "--jobs", "0") == 1
    assert cli("run", "--faces", tmp_path / "missing.csv", "--species", paths["species"],
               "--establishments", paths["establishments"], "--out", tmp_path / "x") == 2
    with open(paths["species"], "a") as fh:
        fh.write(f"{FA[0]},{MUNI_A},77001422,0\n")
    assert cli("run", *common, "--out", tmp_path / "x", "--strict") == 4
    assert "UnknownSpecies" in capsys.readouterr().err


def test_cli_inspect(tmp_path, capsys):
    paths = two_municipalities(tmp_path)
    assert cli("inspect", "--faces", paths["faces"], "--species", paths["species"],
               "--establishments", paths["establishments"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["establishments"]["rows_read"] == 6
    assert stats["faces"]["rows_accepted"] == 4


# -- generator and verify ---------------------------------------------------


def small_spec(**kw):
    base = dict(municipalities=10, faces_per_municipality=(100, 100), establishments_per_municipality=(30, 60),
                faceless_municipalities=1, seed=11)
    base.update(kw)
    return SyntheticSpec(**base)


def test_generate_is_deterministic(tmp_path):
    generate_synthetic(small_spec(), str(tmp_path / "a"))
    generate_synthetic(small_spec(), str(tmp_path / "b"))
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_only == cmp.right_only == cmp.diff_files == []
    assert filecmp.dircmp(tmp_path / "a" / "truth", tmp_path / "b" / "truth").diff_files == []


def test_generate_single_cep_fraction_one(tmp_path):
    generate_synthetic(small_spec(single_cep_fraction=1.0, second_cep_probability=0.5), str(tmp_path / "g"))
    ceps = {}
    for line in read(tmp_path / "g" / "species.csv").splitlines()[1:]:
        face, muni, cep, _ = line.split(",")
        ceps.setdefault(muni, set()).add(cep)
    assert len(ceps) == 10 and all(len(c) == 1 for c in ceps.values())


@pytest.mark.parametrize("rounding", ["fractional", "integer"])
def test_pipeline_matches_ground_truth(tmp_path, rounding, capsys):
    g = tmp_path / "g"
    generate_synthetic(small_spec(), str(g))
    out = tmp_path / "out"
    assert cli("run", "--faces", g / "faces.csv", "--species", g / "species.csv",
               "--establishments", g / "establishments.csv", "--out", out, "--rounding", rounding) == 0
    assert cli("verify", "--out", out, "--truth", g / "truth") == 0
    assert "PASS" in capsys.readouterr().out


def test_verify_flags_perturbed_value(tmp_path, capsys):
    g = tmp_path / "g"
    generate_synthetic(small_spec(), str(g))
    out = tmp_path / "out"
    cli("run", "--faces", g / "faces.csv", "--species", g / "species.csv",
        "--establishments", g / "establishments.csv", "--out", out)
    muni = sorted(d for d in os.listdir(out) if d.isdigit())[0]
    csv_path = out / muni / "jobs.csv"
    lines = read(csv_path).splitlines()
    face, cep, nonres, jobs, lon, lat = lines[1].split(",")
    lines[1] = ",".join([face, cep, nonres, str(float(jobs) + 1), lon, lat])
    csv_path.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert cli("verify", "--out", out, "--truth", g / "truth") == 3
    assert face in capsys.readouterr().out


def test_cli_generate(tmp_path, capsys):
    assert cli("generate", "--out", tmp_path / "g", "--municipalities", 3, "--seed", 5) == 0
    assert os.path.exists(tmp_path / "g" / "truth" / "jobs_truth.csv")
