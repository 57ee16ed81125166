import csv
import math

import numpy as np
import pytest

from fairdiff.audit import save_kappa
from fairdiff.cli import main
from fairdiff.diffusion import save_model
from fairdiff.world import ConceptSpec, WorldSpec, build_world, write_dataset


@pytest.fixture(scope="module")
def files(tmp_path_factory, trained):
    d = tmp_path_factory.mktemp("cli")
    save_model(trained.model, d / "model.ckpt")
    save_kappa(trained.kappa, d / "kappa.ckpt")
    write_dataset(trained.world, d / "world.csv")
    return d


def rows(path):
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh) if r and not r[0].startswith("#")]


def test_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "train", "train-kappa", "generate", "audit", "ieat", "report", "repro"):
        assert cmd in out


def test_synth_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a.csv"), "--seed", "4"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b.csv"), "--seed", "4"]) == 0
    assert len(rows(tmp_path / "a.csv")) == 1 + 2000
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    main(["synth", "--out", str(tmp_path / "c.csv"), "--seed", "5"])
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_missing_file_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["train-kappa", "--data", str(missing), "--out", str(tmp_path / "k")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_train_kappa_exit_codes(tmp_path):
    spec = WorldSpec([ConceptSpec("a", 1.0, 40), ConceptSpec("b", 1.0, 40)])
    write_dataset(build_world(spec, 0), tmp_path / "one.csv")
    assert main(["train-kappa", "--data", str(tmp_path / "one.csv"), "--out", str(tmp_path / "k")]) == 2
    main(["synth", "--out", str(tmp_path / "w.csv")])
    assert main(["train-kappa", "--data", str(tmp_path / "w.csv"), "--out", str(tmp_path / "k"),
                 "--epochs", "0"]) == 3
    assert not (tmp_path / "k").exists()


def test_generate_unknown_concept(files, tmp_path):
    assert main(["generate", "--model", str(files / "model.ckpt"), "--concept", "astronaut",
                 "--out", str(tmp_path / "g.csv")]) == 2


def test_generate_unmatched_table_equals_plain(files, tmp_path):
    (tmp_path / "t.tsv").write_text("pilot\tq=0.5;side1=+female:2;side2=+male:2\n")
    base = ["generate", "--model", str(files / "model.ckpt"), "--concept", "nurse", "--n", "40"]
    assert main(base + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(base + ["--table", str(tmp_path / "t.tsv"), "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert not (tmp_path / "b.csv.directions.csv").exists()


def test_generate_q1_logs_side_one(files, tmp_path):
    out = tmp_path / "g.csv"
    assert main(["generate", "--model", str(files / "model.ckpt"), "--concept", "engineer", "--n", "250",
                 "--preset", "paired", "--q-override", "1", "--out", str(out)]) == 0
    assert len(rows(out)) == 251
    log = rows(str(out) + ".directions.csv")
    assert log[0] == ["id", "side", "u"] and len(log) == 251
    assert all(r[1] == "1" for r in log[1:])


def test_bad_q_override(files, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--model", str(files / "model.ckpt"), "--concept", "nurse",
              "--q-override", "1.5", "--out", str(tmp_path / "g.csv")])
    assert exc.value.code == 2


def _write_set(path, vecs):
    with open(path, "w") as fh:
        fh.write("id," + ",".join(f"x{i}" for i in range(len(vecs[0]))) + "\n")
        for i, v in enumerate(vecs):
            fh.write(f"v{i}," + ",".join(str(x) for x in v) + "\n")


def test_ieat_toy(tmp_path, capsys):
    _write_set(tmp_path / "x.csv", [[1, 0]])
    _write_set(tmp_path / "y.csv", [[0, 1]])
    _write_set(tmp_path / "a.csv", [[1, 0]])
    _write_set(tmp_path / "b.csv", [[0, 1]])
    args = ["ieat"] + sum([[f"--{k}", str(tmp_path / f"{k}.csv")] for k in "xyab"], [])
    assert main(args + ["--out", str(tmp_path / "r.csv")]) == 0
    header, row = rows(tmp_path / "r.csv")
    assert header == ["S", "p", "d", "method", "partitions", "se"]
    assert float(row[0]) == 2.0 and float(row[1]) == 0.0
    assert math.isclose(float(row[2]), math.sqrt(2), rel_tol=1e-12)
    assert row[3] == "exact" and row[4] == "2"


def test_audit(files, tmp_path):
    adir = tmp_path / "audit"
    assert main(["audit", "--data", str(files / "world.csv"), "--kappa", str(files / "kappa.ckpt"),
                 "--out", str(adir)]) == 0
    audit_rows = rows(adir / "audit.csv")
    assert audit_rows[0][:4] == ["concept", "threshold", "relevant", "rate"]
    assert len(audit_rows) == 9
    assert (adir / "audit.txt").read_text().startswith("fairdiff ")


def test_report_identical_is_reflected(files, trained, tmp_path):
    # generated vectors are the training samples; the reference holds their own kappa rates
    world = rows(files / "world.csv")
    with open(tmp_path / "gen.csv", "w") as fh:
        fh.write("id,concept," + ",".join(world[0][3:]) + "\n")
        for r in world[1:]:
            fh.write(",".join([r[0], r[1]] + r[3:]) + "\n")
    with open(tmp_path / "ref.csv", "w") as fh:
        fh.write("concept,rate\n")
        for c in trained.world.concepts:
            x = np.array([s.features for s in trained.world.samples if s.concept == c])
            fh.write(f"{c},{float(np.mean(trained.kappa.label(x) == 1))!r}\n")
    rdir = tmp_path / "rep"
    assert main(["report", "--reference", str(tmp_path / "ref.csv"), "--kappa", str(files / "kappa.ckpt"),
                 "--generated", str(tmp_path / "gen.csv"), "--out", str(rdir)]) == 0
    verdicts = rows(rdir / "verdicts.csv")
    out = dict(zip(verdicts[0], verdicts[1]))
    assert sum(float(out[k]) for k in ("Amplified", "Reflected", "Mitigated")) == pytest.approx(100)
    assert float(out["Reflected"]) == 100.0
    for name in ("outcome.csv", "box.csv", "box.dat"):
        assert (rdir / name).read_text().startswith("# fairdiff ")
    assert (rdir / "summary.txt").read_text().startswith("fairdiff ")


def test_config_file(files, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"model = {files / 'model.ckpt'}\nconcept = nurse\nn = 7\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a.csv")]) == 0
    assert len(rows(tmp_path / "a.csv")) == 8
    assert main(["generate", "--config", str(cfg), "--n", "3", "--out", str(tmp_path / "b.csv")]) == 0
    assert len(rows(tmp_path / "b.csv")) == 4
    cfg.write_text("colour = blue\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "c.csv")]) == 2
