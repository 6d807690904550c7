import csv
import hashlib
import json
from pathlib import Path

import pytest

from feedbackcode import pretrained
from feedbackcode.cli import COMMANDS, OUT_ENV, main
from feedbackcode.config import SCHEMA, ConfigError, load, resolve, schema_markdown
from feedbackcode.params import load_params

TINY_TRAIN = {"K": 10, "steps": 3, "batch_blocks": 20, "calibration_blocks": 500}


def write_cfg(path: Path, cfg: dict) -> str:
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    cfg = write_cfg(d / "cfg.json", {"seed": 1, "train": TINY_TRAIN})
    assert main(["train", "--config", cfg, "--out", str(d / "run"), "-q"]) == 0
    return d / "run"


def test_train_writes_params_loss_and_manifest(trained):
    params = load_params(trained / "params.json")
    assert params.K == 10 and params.norm_consts is not None
    rows = read_csv(trained / "loss.csv")
    assert len(rows) == 3 and list(rows[0]) == ["step", "loss", "lr"]
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 1
    assert set(manifest["versions"]) >= {"feedbackcode", "numpy", "python"}
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((trained / name).read_bytes()).hexdigest() == digest


def test_train_reproducible_from_manifest(trained, tmp_path):
    manifest = json.loads((trained / "manifest.json").read_text())
    cfg = write_cfg(tmp_path / "again.json", manifest["config"])
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "again"), "-q"]) == 0
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert again["outputs"] == manifest["outputs"]
    assert again["config_hash"] == manifest["config_hash"]


def test_shipped_default_config_is_usable(tmp_path):
    cfg = load("default")
    assert cfg["train"]["K"] == 50
    cfg["train"].update(TINY_TRAIN)
    path = write_cfg(tmp_path / "c.json", cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "r"), "-q"]) == 0


def test_missing_params_exits_2_and_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "p.json"
    code = main(["eval-ber", "--params", str(missing), "--out", str(tmp_path / "r"), "-q"])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"train": {"stepz": 3}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    assert "train.stepz" in capsys.readouterr().err


def test_bad_json_reports_line(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n  "seed": 1,\n  oops\n}')
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "r")]) == 2
    assert f"{p}:3:" in capsys.readouterr().err


def test_wrong_type_names_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"ber": {"min_errors": "many"}})
    assert main(["eval-ber", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    assert "ber.min_errors" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, trained, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"ber": {"max_bits": 3}})
    code = main(["eval-ber", "--config", cfg, "--params", str(trained / "params.json"),
                 "--out", str(tmp_path / "r"), "-q"])
    assert code == 1 and "max_bits" in capsys.readouterr().err


def test_eval_ber_and_workers(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"ber": {"min_errors": 50, "chunk_blocks": 100}})
    outs = []
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        assert main(["eval-ber", "--config", cfg, "--params", str(trained / "params.json"),
                     "--workers", str(w), "--out", str(out), "-q"]) == 0
        outs.append((out / "ber.csv").read_bytes())
    assert outs[0] == outs[1]
    row = read_csv(tmp_path / "w1" / "ber.csv")[0]
    assert int(row["errors"]) >= 50


def test_analysis_commands(trained, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {
        "influence": {"samples": 50, "targets": ["bit", "phase2_noise_1"], "deltas": [1.0]},
        "outliers": {"blocks": 50},
        "scatter": {"samples": 10},
        "pwl": {"penalty": 0.1},
    })
    p = str(trained / "params.json")
    for cmd, files in [
        ("influence", ["influence.csv", "influence_length.csv"]),
        ("outliers", ["outliers.csv", "outlier_histogram.csv"]),
        ("scatter", ["scatter.csv"]),
        ("pwl-fit", ["pwl.csv", "knee.csv"]),
        ("calibrate", ["params.json"]),
    ]:
        out = tmp_path / cmd
        assert main([cmd, "--config", cfg, "--params", p, "--out", str(out), "-q"]) == 0, cmd
        manifest = json.loads((out / "manifest.json").read_text())
        assert sorted(manifest["outputs"]) == sorted(files)
    assert len(read_csv(tmp_path / "scatter" / "scatter.csv")) == 100
    lengths = read_csv(tmp_path / "influence" / "influence_length.csv")
    assert [r["target"] for r in lengths] == ["bit", "phase2_noise_1"]


def test_pwl_fit_reads_scatter_csv(trained, tmp_path):
    p = str(trained / "params.json")
    assert main(["scatter", "--params", p, "--out", str(tmp_path / "s"), "-q"]) == 0
    cfg = write_cfg(tmp_path / "c.json", {"pwl": {"input": str(tmp_path / "s" / "scatter.csv")}})
    assert main(["pwl-fit", "--config", cfg, "--out", str(tmp_path / "f"), "-q"]) == 0
    knees = read_csv(tmp_path / "f" / "knee.csv")
    assert [k["steep_side"] for k in knees] == ["right", "left"]


def test_sweep_command(trained, tmp_path):
    p = str(trained / "params.json")
    cfg = write_cfg(tmp_path / "c.json", {"sweep": {"snr_f_db": [0, 1], "params_by_snr_f": {"0": p, "1": p}},
                                          "ber": {"min_errors": 20}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s"), "-q"]) == 0
    rows = read_csv(tmp_path / "s" / "sweep.csv")
    assert [r["snr_f_db"] for r in rows] == ["0.0", "1.0"]
    cfg = write_cfg(tmp_path / "d.json", {"sweep": {"snr_f_db": [2], "params_by_snr_f": {"0": p}}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "t"), "-q"]) == 2


def test_variants_command(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"train": TINY_TRAIN, "ber": {"min_errors": 1, "max_bits": 1000}})
    assert main(["variants", "--config", cfg, "--out", str(tmp_path / "v"), "-q"]) == 0
    rows = read_csv(tmp_path / "v" / "variants.csv")
    assert len(rows) == 8 and len({r["variant"] for r in rows}) == 8
    assert len(list((tmp_path / "v" / "params").glob("*.json"))) == 8


def test_default_out_dir_uses_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "root"))
    cfg = write_cfg(tmp_path / "c.json", {"train": TINY_TRAIN})
    assert main(["train", "--config", cfg, "-q"]) == 0
    out = Path(capsys.readouterr().out.strip())
    assert out.parent == tmp_path / "root" and out.name.startswith("train-")
    assert (out / "manifest.json").exists()


def test_seed_override(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"train": TINY_TRAIN})
    main(["train", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "r"), "-q"])
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["seed"] == 5


def test_schema_covers_every_key(capsys):
    assert main(["schema"]) == 0
    text = capsys.readouterr().out
    for section, fields in SCHEMA.items():
        for name in fields:
            assert f"`{section + '.' if section else ''}{name}`" in text
    assert text.strip() == schema_markdown()


def test_resolve_rejects_bad_variant_and_top_key():
    with pytest.raises(ConfigError, match="train.variant"):
        resolve({"train": {"variant": {"sign_type": 3}}})
    with pytest.raises(ConfigError, match="surprise"):
        resolve({"surprise": 1})


def test_every_command_has_a_parser():
    for cmd in COMMANDS:
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0


def test_shipped_configs_resolve():
    for name in pretrained.config_names():
        load(name)
