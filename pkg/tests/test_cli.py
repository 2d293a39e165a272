import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from padnet import cli, harness
from padnet.analysis import import_mask

from conftest import moe_raw


@pytest.fixture
def cfg_path(tmp_path):
    raw = moe_raw(epochs=2, sweep={"kappas": [0.25, 0.5], "seeds": 2},
                  compare={"methods": ["imp", "random"], "seeds": 2})
    raw["pad"]["timing"] = "epoch-1"
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(raw))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_missing_kappa_names_field(tmp_path, capsys):
    raw = moe_raw()
    del raw["pad"]["kappa"]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(raw))
    assert run("train", "--config", p, "--out", tmp_path / "o") == 2
    assert "pad.kappa" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_train_seeds_and_manifest(tmp_path, cfg_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run("train", "--config", cfg_path, "--out", a, "--seed", 0) == 0
    assert run("train", "--config", cfg_path, "--out", b, "--seed", 1) == 0
    assert run("train", "--config", cfg_path, "--out", c, "--seed", 0) == 0
    assert manifest(a)["seed"] == 0 and manifest(b)["seed"] == 1
    assert (a / "report.csv").read_text() != (b / "report.csv").read_text()
    assert (a / "summary.json").read_bytes() == (c / "summary.json").read_bytes()
    m = manifest(a)
    on_disk = sorted(str(p.relative_to(a)) for p in a.rglob("*") if p.name != "manifest.json")
    assert m["status"] == "ok" and m["files"] == on_disk
    assert {"report.csv", "summary.json", "checkpoint.padck", "partition.jsonl"} <= set(m["files"])
    assert m["config"]["seed"] == 0 and "numpy" in m["versions"]


def test_manifest_written_before_failure(tmp_path, cfg_path):
    raw = json.loads(cfg_path.read_text())
    raw["data"] = {"kind": "idx", "train_images": "nope.gz", "train_labels": "nope.gz",
                   "test_images": "nope.gz", "test_labels": "nope.gz"}
    raw["model"] = {"input_shape": [1, 28, 28], "num_classes": 10,
                    "layers": [{"type": "dyconv", "out_channels": 2}]}
    cfg_path.write_text(json.dumps(raw))
    assert run("train", "--config", cfg_path, "--out", tmp_path / "o") == 2
    assert manifest(tmp_path / "o")["status"] == "failed"


def test_method_and_kappa_overrides(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("train", "--config", cfg_path, "--out", out, "--method", "mp", "--kappa", 0.25) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["method"] == "mp" and s["kappa"] == 0.25


def test_sweep_table(tmp_path, cfg_path):
    out = tmp_path / "sweep"
    assert run("sweep", "--config", cfg_path, "--out", out) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [float(r["kappa"]) for r in rows] == [0.25, 0.5]
    assert abs(sum(float(r["normalized"]) for r in rows)) <= 1e-12
    body = json.loads((out / "sweep.json").read_text())
    for r in body["table"]:
        accs = [c["summary"]["test_accuracy"] for c in body["cells"] if c["kappa"] == r["kappa"]]
        assert r["std"] == pytest.approx(np.std(accs, ddof=1))
    files = set(manifest(out)["files"])
    assert "kappa-0.25/seed-0/summary.json" in files and "sweep.csv" in files


def test_single_cell_sweep_matches_train(tmp_path, cfg_path):
    raw = json.loads(cfg_path.read_text())
    raw["sweep"] = {"kappas": [0.5], "seeds": 1}
    cfg_path.write_text(json.dumps(raw))
    assert run("sweep", "--config", cfg_path, "--out", tmp_path / "s") == 0
    assert run("train", "--config", cfg_path, "--out", tmp_path / "t") == 0
    assert ((tmp_path / "s" / "kappa-0.5" / "seed-0" / "summary.json").read_bytes()
            == (tmp_path / "t" / "summary.json").read_bytes())


def test_failed_cell_is_marked_and_sweep_continues(tmp_path, cfg_path, monkeypatch):
    real = harness.train

    def flaky(cfg, out=None, *a, **k):
        if cfg.pad.kappa == 0.25 and cfg.seed == 1:
            raise RuntimeError("boom")
        return real(cfg, out, *a, **k)
    monkeypatch.setattr(harness, "train", flaky)
    out = tmp_path / "sw"
    assert run("sweep", "--config", cfg_path, "--out", out) == 1
    table = {r["kappa"]: r for r in json.loads((out / "sweep.json").read_text())["table"]}
    assert table[0.25]["failed"] == 1 and table[0.25]["n"] == 1 and table[0.5]["n"] == 2
    assert (out / "kappa-0.25" / "seed-1" / "error.txt").exists()
    assert manifest(out)["status"] == "failed"


def test_compare(tmp_path, cfg_path):
    out = tmp_path / "cmp"
    assert run("compare", "--config", cfg_path, "--out", out) == 0
    rows = list(csv.DictReader(open(out / "compare.csv")))
    assert [r["method"] for r in rows] == ["imp", "random"]
    assert sorted(int(r["rank"]) for r in rows) == [1, 2]
    m0 = [json.loads(l) for l in open(out / "random" / "seed-0" / "partition.jsonl")]
    assert m0[0]["method"] == "random"
    masks = [harness.load_checkpoint(out / "random" / f"seed-{s}" / "checkpoint.padck")[0].pad_layers()[0][1].mask.bits
             for s in (0, 1)]
    assert not np.array_equal(*masks)


def test_compare_single_method(tmp_path, cfg_path):
    out = tmp_path / "one"
    assert run("compare", "--config", cfg_path, "--out", out, "--method", "full-dynamic") == 0
    assert len(list(csv.DictReader(open(out / "compare.csv")))) == 1


def test_imp_t1_and_mp_agree(tmp_path, cfg_path):
    raw = json.loads(cfg_path.read_text())
    raw["pad"]["steps"] = 1
    raw["compare"] = {"methods": ["imp", "mp"], "seeds": 1}
    cfg_path.write_text(json.dumps(raw))
    out = tmp_path / "eq"
    assert run("compare", "--config", cfg_path, "--out", out) == 0
    a, b = (json.loads((out / m / "seed-0" / "summary.json").read_text()) for m in ("imp", "mp"))
    assert a["test_accuracy"] == b["test_accuracy"] and a["dynamic_ratios"] == b["dynamic_ratios"]


def test_partition_evaluate_analyze_export(tmp_path, cfg_path):
    part, run_dir = tmp_path / "p", tmp_path / "r"
    assert run("partition", "--config", cfg_path, "--out", part) == 0
    assert (part / "partition.jsonl").exists() and (part / "ratios.csv").exists()
    assert run("train", "--config", cfg_path, "--out", run_dir) == 0
    ck = run_dir / "checkpoint.padck"
    assert run("evaluate", "--checkpoint", ck, "--out", tmp_path / "e") == 0
    ev = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert ev["accuracy"] == json.loads((run_dir / "summary.json").read_text())["test_accuracy"]
    assert run("analyze", "--checkpoint", ck, "--out", tmp_path / "a", "--samples", 8) == 0
    acc_rows = list(csv.DictReader(open(tmp_path / "a" / "accounting.csv")))
    summary = json.loads((run_dir / "summary.json").read_text())
    assert int(acc_rows[-1]["params"]) == summary["stored_scalars"]
    assert run("export-mask", "--checkpoint", ck, "--out", tmp_path / "m") == 0
    model, _, _ = harness.load_checkpoint(ck)
    assert import_mask(tmp_path / "m" / "body.0.pgm").bits.tolist() == model.pad_layers()[0][1].mask.bits.tolist()
    assert run("export-mask", "--checkpoint", ck, "--out", tmp_path / "m2", "--layer", "body.0") == 0
    with pytest.raises(SystemExit):
        run("export-mask", "--checkpoint", ck, "--out", tmp_path / "m3", "--layer", "body.9")


def test_threads_env(tmp_path, cfg_path, monkeypatch):
    monkeypatch.setenv("PADNET_THREADS", "zero")
    with pytest.raises(SystemExit):
        run("train", "--config", cfg_path, "--out", tmp_path / "o")


def test_schema_and_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "padnet", "schema"], capture_output=True, text=True, check=True)
    assert "ExperimentConfig" in json.loads(proc.stdout)["title"]
