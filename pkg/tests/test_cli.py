import json
import struct
from pathlib import Path

import numpy as np
import pytest

from dsgreplay.cli import main
from dsgreplay.config import ConfigError, load_config
from dsgreplay.data import load_dataset

TINY = """\
[run]
method = {method}
seeds = {seeds}
classes_per_task = 2

[synthetic]
num_classes = 4
length = 16
train_per_class = 30
test_per_class = 10

[protocol]
channels = 8, 16
max_epochs = 4
patience = 3

[method]
lambda = {lam}

[generator]
epochs = 2
batch_size = 32
base_channels = 4

[diffusion]
T = 10
"""


def write_cfg(tmp_path, method="dsg", seeds="0, 1, 2", lam="1.0", name="cfg.ini"):
    path = tmp_path / name
    path.write_text(TINY.format(method=method, seeds=seeds, lam=lam))
    return path


def test_negative_lambda_is_config_error(tmp_path, capsys):
    assert main(["run", str(write_cfg(tmp_path, lam="-1")), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "lambda" in err and "line 18" in err


def test_unknown_key_reports_line(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nmethod = sft\nsedes = 1\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.line == 3 and "sedes" in str(exc.value)
    assert main(["run", str(path)]) == 2


@pytest.mark.parametrize("text, field", [
    ("[run]\nmethod = ewc\n", "method"),
    ("[run]\nseeds =\n", "seeds"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[protocol]\nmax_epochs = many\n", "max_epochs"),
    ("[data]\nsource = file\npath = nowhere.rfds\n", "path"),
])
def test_config_errors(tmp_path, text, field):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ConfigError, match=field):
        load_config(path)


def test_missing_config_and_bad_args(tmp_path):
    assert main(["run", str(tmp_path / "nope.ini")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["gen-synth"]) == 2  # --out required


def test_gen_synth_file(tmp_path, capsys):
    out = tmp_path / "s.rfds"
    assert main(["gen-synth", "--classes", "6", "--channels", "2", "--length", "64", "--train-per-class", "20",
                 "--test-per-class", "5", "--out", str(out)]) == 0
    assert "150 samples" in capsys.readouterr().out
    count = 6 * 25
    header = struct.calcsize("<4sIIIIIB")  # magic, version, count, C, L, K, has_labels
    assert out.stat().st_size == header + 4 * count * 2 * 64 + 2 * count
    ds = load_dataset(out)
    assert (len(ds), ds.channels, ds.length, ds.num_classes) == (150, 2, 64, 6)
    other = tmp_path / "t.rfds"
    assert main(["gen-synth", "--seed", "1", "--out", str(other), "--quiet"]) == 0
    main(["gen-synth", "--seed", "0", "--out", str(tmp_path / "u.rfds"), "--quiet"])
    assert other.read_bytes() != (tmp_path / "u.rfds").read_bytes()


def test_gen_synth_bad_spec(tmp_path):
    assert main(["gen-synth", "--classes", "5", "--classes-per-task", "2", "--out", str(tmp_path / "x")]) == 2


def test_gen_synth_unwritable(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "missing" / "dir" / "x.rfds"), "--quiet"]) == 1


@pytest.fixture(scope="module")
def dsg_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = write_cfg(root, "dsg")
    out = root / "dsg"
    assert main(["run", str(cfg), "--out", str(out), "--quiet"]) == 0
    return out


def test_run_writes_report(dsg_run):
    report = json.loads((dsg_run / "report.json").read_text())
    assert report["method"] == "dsg" and len(report["seeds"]) == 3
    assert {"A_N_mean", "A_N_std", "F_N_mean", "F_N_std"} <= set(report["summary"])
    for entry in report["seeds"]:
        assert [len(r) for r in entry["accuracy_matrix"]["rows"]] == [1, 2]
    assert len((dsg_run / "metrics.csv").read_text().splitlines()) == 1 + 3 * 2
    manifest = json.loads((dsg_run / "manifest.json").read_text())
    assert manifest["lambda"] == 1.0 and manifest["schedule"]["T"] == 10 and manifest["seeds"] == [0, 1, 2]
    assert (dsg_run / "checkpoints" / "seed_0" / "generator_task2.rftn").exists()


def test_run_reproducible_from_manifest(dsg_run, tmp_path):
    again = tmp_path / "again"
    assert main(["run", str(dsg_run / "manifest.json"), "--out", str(again), "--quiet"]) == 0
    assert (again / "matrices.json").read_bytes() == (dsg_run / "matrices.json").read_bytes()


def test_sample_command(dsg_run, tmp_path):
    ckpt = dsg_run / "checkpoints" / "seed_0" / "generator_task2.rftn"
    out = tmp_path / "gen.rfds"
    assert main(["sample", str(ckpt), "--count", "4", "--seed", "3", "--out", str(out), "--quiet"]) == 0
    ds = load_dataset(out)
    assert ds.samples.shape == (4, 2, 16) and ds.labels is None
    preview = (tmp_path / "gen.rfds.preview.txt").read_text().split()
    # the signal is only 16 long, so the preview is truncated to what exists
    assert len(preview) == 16
    np.testing.assert_array_equal(np.array(preview, float), ds.samples[0, 0].astype(np.float32))
    out2 = tmp_path / "gen2.rfds"
    main(["sample", str(ckpt), "--count", "4", "--seed", "3", "--out", str(out2), "--quiet"])
    assert out2.read_bytes() == out.read_bytes()


def test_sample_preview_has_fifty_points(dsg_run, tmp_path):
    ckpt = dsg_run / "checkpoints" / "seed_0" / "generator_task1.rftn"
    out = tmp_path / "long.rfds"
    assert main(["sample", str(ckpt), "--count", "4", "--length", "64", "--out", str(out), "--quiet"]) == 0
    assert len(load_dataset(out)) == 4
    assert len((tmp_path / "long.rfds.preview.txt").read_text().split()) == 50


def test_sample_missing_checkpoint(tmp_path):
    assert main(["sample", str(tmp_path / "none.rftn"), "--out", str(tmp_path / "o.rfds")]) == 1


def test_report_single_and_duplicate(dsg_run, tmp_path, capsys):
    report = json.loads((dsg_run / "report.json").read_text())
    assert main(["report", str(dsg_run), "--out", str(tmp_path / "c1")]) == 0
    table = capsys.readouterr().out
    s = report["summary"]
    assert f"{100 * s['A_N_mean']:.1f} ± {100 * s['A_N_std']:.1f}" in table
    assert len((tmp_path / "c1" / "curve_dsg.csv").read_text().splitlines()) == 1 + 2

    single = tmp_path / "single"
    assert main(["run", str(write_cfg(tmp_path, seeds="0")), "--out", str(single), "--quiet"]) == 0
    copy = tmp_path / "copy"
    assert main(["run", str(write_cfg(tmp_path, seeds="0", name="c2.ini")), "--out", str(copy), "--quiet"]) == 0
    capsys.readouterr()
    assert main(["report", str(single), str(copy), "--out", str(tmp_path / "c2")]) == 0
    assert "± 0.0" in capsys.readouterr().out
    rows = (tmp_path / "c2" / "curve_dsg.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[3] == "0.0" for r in rows)


def test_report_order_invariant(dsg_run, tmp_path, capsys):
    sft = tmp_path / "sft"
    assert main(["run", str(write_cfg(tmp_path, "sft", seeds="0, 1")), "--out", str(sft), "--quiet"]) == 0
    capsys.readouterr()
    main(["report", str(dsg_run), str(sft), "--out", str(tmp_path / "a"), "--quiet"])
    first = capsys.readouterr().out
    main(["report", str(sft), str(dsg_run), "--out", str(tmp_path / "b"), "--quiet"])
    assert capsys.readouterr().out == first
    assert (tmp_path / "a" / "curve_sft.csv").read_bytes() == (tmp_path / "b" / "curve_sft.csv").read_bytes()


def test_report_missing_file(tmp_path):
    assert main(["report", str(tmp_path)]) == 1


def test_seed_override(tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(write_cfg(tmp_path, "sft")), "--seed", "7", "--out", str(out), "--quiet"]) == 0
    assert [e["seed"] for e in json.loads((out / "report.json").read_text())["seeds"]] == [7]


def test_inline_comments_and_line_numbers(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]   ; the run\nmethod = sft  ; baseline\n\n[synthetic]   ; or [data]\nnoise = 0.07\n"
                    "[method]\nlambda = -2   # bad\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.line == 7 and exc.value.field == "lambda"
    path.write_text("[run]   ; the run\nmethod = sft  ; baseline\n[synthetic]   ; or [data]\nnoise = 0.07\n")
    cfg = load_config(path)
    assert cfg.method_kind == "sft" and cfg.values["synthetic"]["noise"] == 0.07


def test_readme_example_config_loads(tmp_path):
    readme = (Path(__file__).parents[1] / "README.md").read_text()
    block = readme.split("with `dsg.ini`:\n\n")[1].split("\n\nAll sections")[0]
    path = tmp_path / "dsg.ini"
    path.write_text("\n".join(line[4:] for line in block.splitlines()))
    cfg = load_config(path)
    assert cfg.method_kind == "dsg" and cfg.seeds == [0, 1, 2]
    assert cfg.values["protocol"]["channels"] == [16, 32, 64, 32] and cfg.values["diffusion"]["T"] == 100
