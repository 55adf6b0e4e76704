import hashlib
import json
from pathlib import Path

import pytest

from crossmod import cli
from crossmod.errors import NonFinite
from crossmod.ingest import read_pgm

SMALL = {
    "toy": {"n_volumes": 8, "slices_per_volume": 12},
    "train": {"stage1_epochs": 1, "stage2_steps": 20},
}


def run(argv, capsys):
    """Run the CLI in-process; returns (exit code, stdout JSON or None, stderr JSON or None)."""
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    parse = lambda s: json.loads(s.strip().splitlines()[-1]) if s.strip() else None  # noqa: E731
    return code, parse(out), parse(err)


def tree_digest(root: Path) -> dict[str, str]:
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(SMALL))
    assert cli.main(["toygen", "--config", str(config), "--out", str(root / "corpus")]) == 0
    return root, config


# ---------------------------------------------------------------- config handling


def test_effective_config_precedence(monkeypatch):
    doc = {"seed": 4, "forge": {"k_window": 3}}
    monkeypatch.setenv(cli.SEED_ENV, "9")
    eff = cli.effective_config(doc, {"forge": {"cts_options": 3}}, None, ["forge", "train"])
    assert eff["forge"]["k_window"] == 3 and eff["forge"]["cts_options"] == 3
    assert eff["forge"]["seed"] == 4 and eff["train"]["seed"] == 4
    assert cli.effective_config(doc, {}, 7, ["forge"])["forge"]["seed"] == 7
    assert cli.effective_config({}, {}, None, ["forge"])["forge"]["seed"] == 9


def test_env_seed_must_be_integer(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    with pytest.raises(cli.ConfigError):
        cli.effective_config({}, {}, None, ["forge"])


def test_config_hash_is_order_independent():
    assert cli.config_hash({"a": 1, "b": [1, 2]}) == cli.config_hash({"b": [1, 2], "a": 1})


@pytest.mark.parametrize(
    "doc, fragment",
    [
        ({"bogus": {}}, "unknown config keys"),
        ({"forge": {"k_windw": 5}}, "unknown keys in 'forge'"),
        ({"forge": {"k_window": "five"}}, "forge.k_window"),
        ({"forge": []}, "must be an object"),
    ],
)
def test_bad_config_exits_1(tmp_path, capsys, workspace, doc, fragment):
    root, _ = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    code, _, err = run(["forge", "--manifest", root / "corpus/manifest.json", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert err["exit_code"] == 1 and fragment in err["message"]
    assert not (tmp_path / "o").exists()


def test_usage_error_exits_1(capsys):
    code, _, err = run(["forge", "--out", "x"], capsys)
    assert code == 1 and err["error"] == "ConfigError"


def test_invalid_field_value_exits_1(tmp_path, capsys, workspace):
    root, _ = workspace
    code, _, err = run(
        ["forge", "--manifest", root / "corpus/manifest.json", "--forge-cts-options", "1", "--out", tmp_path / "o"], capsys
    )
    assert code == 1 and "cts_options" in err["message"]


def test_missing_input_exits_2(tmp_path, capsys):
    code, _, err = run(["forge", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "o"], capsys)
    assert code == 2 and err["exit_code"] == 2


def test_nonfinite_exits_3(tmp_path, capsys, workspace, monkeypatch):
    root, config = workspace

    def explode(*args, **kwargs):
        raise NonFinite("stage II loss became non-finite", step=11)

    monkeypatch.setattr(cli, "train_stage2", explode)
    code, _, err = run(["train", "--stage", "2", "--corpus", root / "corpus", "--config", config, "--out", tmp_path / "ck"], capsys)
    assert code == 3
    assert err == {"error": "NonFinite", "exit_code": 3, "message": "stage II loss became non-finite (step 11)", "step": 11}


# ---------------------------------------------------------------- subcommands


def test_toygen_deterministic(tmp_path, capsys, workspace):
    root, config = workspace
    code, out, _ = run(["toygen", "--config", config, "--out", tmp_path / "again"], capsys)
    assert code == 0 and out["volumes"] == 24
    assert tree_digest(tmp_path / "again") == tree_digest(root / "corpus")
    manifest = json.loads((tmp_path / "again/manifest.json").read_text())
    assert manifest["provenance"]["config_hash"] == cli.config_hash(manifest["provenance"]["config"])


def test_forge_outputs_and_determinism(tmp_path, capsys, workspace):
    root, config = workspace
    manifest = root / "corpus/manifest.json"
    for name, jobs in (("a", 1), ("b", 1), ("c", 8)):
        code, out, _ = run(["forge", "--manifest", manifest, "--config", config, "--jobs", jobs, "--out", tmp_path / name], capsys)
        assert code == 0
    a = tree_digest(tmp_path / "a")
    assert set(a) == {"cts.jsonl", "mi.jsonl", "tia.jsonl", "forge_summary.json"}
    assert a == tree_digest(tmp_path / "b") == tree_digest(tmp_path / "c")
    summary = json.loads((tmp_path / "a/forge_summary.json").read_text())
    assert summary["provenance"]["inputs"]["manifest"] == cli.file_sha256(manifest)
    assert summary["files"]["cts.jsonl"] == a["cts.jsonl"]


def test_score_round_trip(tmp_path, capsys, workspace):
    root, config = workspace
    run(["forge", "--manifest", root / "corpus/manifest.json", "--config", config, "--out", tmp_path / "f"], capsys)
    rows = [json.loads(line) for line in (tmp_path / "f/mi.jsonl").read_text().splitlines()]
    preds = tmp_path / "pred.jsonl"
    preds.write_text("".join(json.dumps({"instance_id": r["instance_id"], "answer": r["answer_letter"]}) + "\n" for r in rows))
    code, out, _ = run(["score", "--instances", tmp_path / "f/mi.jsonl", "--predictions", preds, "--out", tmp_path / "r.json"], capsys)
    assert code == 0 and out["average_accuracy"] == 1.0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["tasks"]["MI"]["n"] == len(rows) and "provenance" in report


def test_eval_identical_directories(tmp_path, capsys, workspace):
    root, _ = workspace
    corpus = root / "corpus"
    code, _, _ = run(["eval", "--pred", corpus, "--gt", corpus, "--out", tmp_path / "e"], capsys)
    assert code == 0
    (route,) = json.loads((tmp_path / "e/metrics.json").read_text())["routes"]
    assert route["ssim_x100"]["mean"] == 100.0 and route["mae_255"]["mean"] == 0.0
    assert route["psnr_db"]["mean"] == "inf"
    csv_lines = (tmp_path / "e/metrics.csv").read_text().splitlines()
    assert csv_lines[0].startswith("# crossmod ") and csv_lines[2].split(",")[2] == "100.00"


def test_eval_missing_reference_exits_2(tmp_path, capsys, workspace):
    root, _ = workspace
    (tmp_path / "pred").mkdir()
    (tmp_path / "pred/zz.pgm").write_bytes((root / "corpus").rglob("*.pgm").__next__().read_bytes())
    code, _, err = run(["eval", "--pred", tmp_path / "pred", "--gt", root / "corpus", "--out", tmp_path / "e"], capsys)
    assert code == 2 and "no reference" in err["message"]


def test_train_sample_pipeline(tmp_path, capsys, workspace):
    root, config = workspace
    corpus = root / "corpus"
    for name, jobs in (("a", 1), ("b", 8)):
        code, out, _ = run(["train", "--corpus", corpus, "--config", config, "--jobs", jobs, "--out", tmp_path / name], capsys)
        assert code == 0 and set(out) == {"stage1", "stage2"}
    a = tree_digest(tmp_path / "a")
    assert a == tree_digest(tmp_path / "b")
    assert {"curves.csv", "train_summary.json", "stage1/model.json", "stage2/model.json", "stage2/vnet.0.W.tns"} <= set(a)
    curves = (tmp_path / "a/curves.csv").read_text().splitlines()
    assert curves[0].startswith("# crossmod ") and curves[1] == "stage,unit,index,loss"
    assert sum(line.startswith("stage1,epoch,") for line in curves) == 1

    src = next(corpus.rglob("*.pgm"))
    code, _, _ = run(["sample", "--ckpt", tmp_path / "a", "--src", src, "--route", "synthrad_brain/cbct_to_ct", "--seed", 3, "--out", tmp_path / "s1.pgm"], capsys)
    assert code == 0
    run(["sample", "--ckpt", tmp_path / "a", "--src", src, "--route", "synthrad_brain/cbct_to_ct", "--seed", 3, "--out", tmp_path / "s2.pgm"], capsys)
    assert (tmp_path / "s1.pgm").read_bytes() == (tmp_path / "s2.pgm").read_bytes()
    assert read_pgm(tmp_path / "s1.pgm").shape == (32, 32)
    assert b"# crossmod " in (tmp_path / "s1.pgm").read_bytes()[:200]

    code, _, err = run(["sample", "--ckpt", tmp_path / "a", "--src", src, "--route", "nowhere/x_to_y", "--out", tmp_path / "s3.pgm"], capsys)
    assert code == 2 and err["error"] == "UnknownRoute"


def test_sample_needs_a_mode(tmp_path, capsys):
    code, _, err = run(["sample", "--ckpt", tmp_path, "--out", tmp_path / "x.pgm"], capsys)
    assert code in (1, 2) and err is not None


def test_ablate_and_ksweep(tmp_path, capsys, workspace):
    root, config = workspace
    corpus = root / "corpus"
    args = ["ablate", "--corpus", corpus, "--config", config, "--seeds", "0,1,2"]
    assert run(args + ["--jobs", 1, "--out", tmp_path / "a"], capsys)[0] == 0
    assert run(args + ["--jobs", 8, "--out", tmp_path / "b"], capsys)[0] == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    report = json.loads((tmp_path / "a/report.json").read_text())
    assert report["provenance"]["config"]["ablate"]["seeds"] == [0, 1, 2]
    assert (tmp_path / "a/report.csv").read_text().startswith("# crossmod ")

    code, out, _ = run(["ksweep", "--corpus", corpus, "--config", config, "--k", "2,5", "--out", tmp_path / "k"], capsys)
    assert code == 0 and out == {"rows": 2}
    doc = json.loads((tmp_path / "k/ksweep.json").read_text())
    assert [r["k_window"] for r in doc["rows"]] == [2, 5]
    assert doc["reference"]["asserted"] is False
    # 12 slices cannot host a K=10 window
    code, _, err = run(["ksweep", "--corpus", corpus, "--config", config, "--k", "10", "--out", tmp_path / "k10"], capsys)
    assert code == 1 and not (tmp_path / "k10").exists()


def test_ablate_needs_three_seeds(tmp_path, capsys, workspace):
    root, config = workspace
    code, _, _ = run(["ablate", "--corpus", root / "corpus", "--config", config, "--seeds", "0,1", "--out", tmp_path / "a"], capsys)
    assert code == 1


def test_nothing_written_outside_out(tmp_path, capsys, workspace, monkeypatch):
    root, config = workspace
    corpus = root / "corpus"
    before = tree_digest(root)
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "out"
    steps = [
        ["forge", "--manifest", corpus / "manifest.json", "--config", config, "--out", out / "forge"],
        ["eval", "--pred", corpus, "--gt", corpus, "--out", out / "eval"],
        ["train", "--corpus", corpus, "--config", config, "--out", out / "ck"],
        ["sample", "--ckpt", out / "ck", "--corpus", corpus, "--pair", _first_pair(corpus), "--out", out / "samples"],
    ]
    for argv in steps:
        assert run(argv, capsys)[0] == 0
    assert tree_digest(root) == before
    assert all(p == out or out in p.parents for p in tmp_path.rglob("*"))


def _first_pair(corpus: Path) -> str:
    return json.loads((corpus / "manifest.json").read_text())["pairs"][0]["pair_id"]
