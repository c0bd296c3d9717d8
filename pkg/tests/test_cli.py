import csv
import json

import pytest

from conftest import small_synthetic
from lasermon import cli, pipeline as pl
from test_pipeline import tiny_config


def write_config(path, **kw):
    path.write_text(json.dumps(tiny_config(**kw).to_dict()))
    return str(path)


def test_generate_and_extract(tmp_path, capsys):
    data = tmp_path / "data"
    code = cli.main(["generate", "--out", str(data), "--seed", "5", "--experiments-per-technique", "1",
                     "--samples", "5", "--trace-length", "64"])
    assert code == 0
    assert (data / "manifest.json").is_file()
    assert json.loads((data / "synthetic_config.json").read_text())["seed"] == 5
    assert "25 samples" in capsys.readouterr().out
    feats = tmp_path / "f.csv"
    assert cli.main(["extract", "--dataset", str(data), "--output", str(feats)]) == 0
    rows = list(csv.reader(open(feats)))
    assert len(rows) == 26 and len(rows[0]) == 1562


def test_extract_synthetic_from_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", synthetic=small_synthetic(samples_per_experiment=5))
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "o"), "extract"]) == 0
    assert len((tmp_path / "o" / "features.csv").read_text().splitlines()) == 26


def test_run_all_report_and_ablate(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", settings=("polishing", "combined"))
    out = tmp_path / "out"
    assert cli.main(["run", "all", "--config", cfg, "--out", str(out), "--svg"]) == 0
    text = capsys.readouterr().out
    assert "Polishing (c)" in text and "Combined (f)" in text
    assert (out / "params_only" / "scatter_combined.svg").read_text().startswith("<svg")
    assert (out / "ablation.csv").is_file()
    (out / "table_reduced.md").unlink()
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "table_reduced.md").is_file()
    assert cli.main(["ablate", "--config", cfg, "--out", str(out), "--k", "1,3", "--model", "et"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert "k,technique,test_r2" in lines
    ks = {row[0] for row in csv.reader(open(out / "ablation.csv"))}
    assert ks == {"k", "1", "3", "1556"}


def test_reduced_reuses_saved_models(tmp_path):
    cfg = write_config(tmp_path / "c.json", settings=("wire_edm",))
    out = tmp_path / "out"
    assert cli.main(["run", "full", "--config", cfg, "--out", str(out)]) == 0
    stamp = (out / "models" / "params_plus_sensors_wire_edm.json").stat().st_mtime_ns
    assert cli.main(["run", "reduced", "--config", cfg, "--out", str(out), "--top-k", "3"]) == 0
    assert (out / "models" / "params_plus_sensors_wire_edm.json").stat().st_mtime_ns >= stamp
    doc = json.loads((out / "results.json").read_text())
    assert len(doc["reduced"]["wire_edm"]["top"]) == 3


def test_manifest_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json", settings=("milling", "combined"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "all", "--config", cfg, "--out", str(a)]) == 0
    manifest = str(a / "run_manifest.json")
    assert cli.main(["run", "all", "--config", manifest, "--out", str(b), "--threads", "3"]) == 0
    for path in sorted(a.rglob("*.csv")):
        assert (b / path.relative_to(a)).read_bytes() == path.read_bytes()


def test_seed_flag_sets_both_seeds(tmp_path):
    args = cli.build_parser().parse_args(["run", "params-only", "--seed", "11"])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 11 and cfg.synthetic.seed == 11
    args = cli.build_parser().parse_args(["--seed", "12", "ablate", "--k", "5,10"])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 12 and cfg.ablation_k == (5, 10)


def test_validation_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"top_k": 0}))
    assert cli.main(["--config", str(bad), "run", "reduced"]) == 2
    bad.write_text("{not json")
    assert cli.main(["--config", str(bad), "run", "reduced"]) == 2
    bad.write_text(json.dumps({"colour": "red"}))
    assert cli.main(["--config", str(bad), "run", "reduced"]) == 2
    assert cli.main(["run", "full", "--settings", "lapping"]) == 2
    assert "error:" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path):
    spec = pl.ModelSpec((), "relu", pl.mlp.TrainConfig(learning_rate=1e200, batch_size=4, optimizer="sgd",
                                                       max_epochs=20))
    cfg = write_config(tmp_path / "c.json", settings=("milling",), params_only_model=spec)
    assert cli.main(["run", "params-only", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_io_exit_code(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path / "missing")]) == 4
    assert cli.main(["--config", str(tmp_path / "nope.json"), "run", "full"]) == 4
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["generate", "--out", str(blocker / "sub"), "--samples", "5",
                     "--experiments-per-technique", "1", "--trace-length", "64"]) == 4


def test_bad_arguments_exit_by_argparse():
    with pytest.raises(SystemExit) as err:
        cli.main(["ablate", "--k", "a,b"])
    assert err.value.code == 2
