import json
import subprocess
import sys
from pathlib import Path

import pytest

from fewshot_nbnn.cli import main

TOY = Path(__file__).parent / "fixtures" / "toy"
SMALL = ["--ways", "3", "--queries", "3", "--episodes", "12"]


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    rc = main(["gen-synth", "--out", str(d), "--classes", "6", "--images-per-class", "8",
               "--descriptors", "16", "--dim", "8", "--distractors", "2", "--seed", "3", "--ways", "3"])
    assert rc == 0
    return d


def test_gen_synth_writes_manifest(synth_dir):
    doc = json.loads((synth_dir / "manifest.json").read_text())
    assert doc["protocol"] == {"ways": 3}
    assert len(doc["items"]) == 6 * 8 + 2 * 8
    assert sum(1 for it in doc["items"] if it["class"] == "UNLABELED") == 16


def test_eval_is_deterministic(capsys, synth_dir):
    argv = ["eval", "--manifest", str(synth_dir / "manifest.json"), "--method", "mn4", *SMALL, "--seed", "7", "--no-timing"]
    rc1, out1, _ = run(capsys, *argv)
    rc2, out2, _ = run(capsys, *argv)
    assert rc1 == rc2 == 0 and out1 == out2
    rep = json.loads(out1)
    assert rep["config"]["n_ways"] == 3 and rep["episodes"] == 12
    assert "mean_episode_seconds" not in json.dumps(rep)


def test_eval_workers_do_not_change_report(capsys, synth_dir):
    base = ["eval", "--manifest", str(synth_dir / "manifest.json"), *SMALL, "--semi", "2", "--distractors", "1", "--no-timing"]
    _, one, _ = run(capsys, *base, "--workers", "1")
    _, two, _ = run(capsys, *base, "--workers", "2")
    assert one == two


def test_eval_repeats_and_out(capsys, synth_dir, tmp_path):
    out = tmp_path / "r.json"
    rc, stdout, _ = run(capsys, "eval", "--manifest", str(synth_dir / "manifest.json"), *SMALL,
                        "--repeats", "2", "--no-timing", "--out", str(out))
    assert rc == 0 and stdout == ""
    doc = json.loads(out.read_text())
    assert doc["repeats"] == 2 and [r["seed"] for r in doc["runs"]] == [0, 1]


def test_classify_toy_predicts_a(capsys):
    rc, out, _ = run(capsys, "classify", str(TOY / "descriptors" / "query.dsc"), "--manifest", str(TOY / "manifest.json"))
    assert rc == 0
    doc = json.loads(out)
    assert doc["predicted"] == "A" and doc["method"] == "mn4"
    for method in ("dn4", "dmn4", "odm"):
        rc, out, _ = run(capsys, "classify", str(TOY / "descriptors" / "query.dsc"), "--manifest",
                         str(TOY / "manifest.json"), "--method", method, "--k-percent", "50")
        assert rc == 0 and json.loads(out)["predicted"] == "A"


def test_trace(capsys):
    rc, out, _ = run(capsys, "trace", str(TOY / "descriptors" / "query.dsc"), "--manifest", str(TOY / "manifest.json"))
    assert rc == 0
    doc = json.loads(out)
    assert doc["predicted"] == "A" and doc["pairs"]
    assert {"query_index", "class", "within_class_index", "cosine", "tau"} <= set(doc["pairs"][0])


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["eval", "--method", "knn"],
        ["eval", "--ways", "x"],
        ["eval", "--method", "odm", "--episodes", "1"],
        ["eval", "--method", "odm", "--k-percent", "0", "--episodes", "1"],
        ["eval", "--workers", "0"],
        ["gen-synth", "--out", "/tmp/never", "--signal-fraction", "2"],
    ],
)
def test_usage_errors_exit_1(capsys, argv):
    rc, _, err = run(capsys, *argv)
    assert rc == 1 and err


def test_data_errors_exit_2(capsys, tmp_path):
    rc, _, _ = run(capsys, "eval", "--manifest", str(tmp_path / "missing.json"))
    assert rc == 2
    bad = tmp_path / "bad.dsc"
    bad.write_bytes(b"NOPE" + bytes(20))
    rc, _, err = run(capsys, "classify", str(bad), "--manifest", str(TOY / "manifest.json"))
    assert rc == 2 and "magic" in err
    rc, _, _ = run(capsys, "eval", "--manifest", str(TOY / "manifest.json"), "--ways", "3", "--episodes", "1")
    assert rc == 2  # only two classes


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fewshot_nbnn", "classify", str(TOY / "descriptors" / "query.dsc"),
                           "--manifest", str(TOY / "manifest.json")], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["predicted"] == "A"
