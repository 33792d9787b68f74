import csv
import json

import pytest

from omac.cli import EXIT_FAILED, EXIT_INPUT, EXIT_OK, EXIT_USAGE, check_manifest, main, sha256_file

FAST = ["--iters-value", "60", "--iters-policy", "40", "--log-interval", "20"]


@pytest.fixture(scope="module")
def matrix_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "m"
    assert main(["gen-data", "--env", "matrix", "--tier", "poor", "--episodes", "200",
                 "--seed", "0", "--out", str(out)]) == EXIT_OK
    return out.with_name("m.omd.jsonl")


def test_gen_data_counts_and_manifest(matrix_data):
    assert len(matrix_data.read_text().splitlines()) == 201
    manifest = json.loads(matrix_data.with_name("m.manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 0
    assert manifest["artifacts"]["m.omd.jsonl"]["sha256"] == sha256_file(matrix_data)


def test_gen_data_is_reproducible(tmp_path, matrix_data):
    main(["gen-data", "--env", "matrix", "--tier", "poor", "--episodes", "200", "--seed", "0",
          "--out", str(tmp_path / "again")])
    assert sha256_file(tmp_path / "again.omd.jsonl") == sha256_file(matrix_data)


def test_gen_data_zero_episodes(tmp_path):
    assert main(["gen-data", "--env", "grid", "--tier", "good", "--episodes", "0",
                 "--out", str(tmp_path / "e")]) == EXIT_OK
    assert len((tmp_path / "e.omd.jsonl").read_text().splitlines()) == 1


@pytest.mark.parametrize("argv", [
    ["gen-data", "--env", "smac", "--tier", "poor", "--episodes", "1", "--out", "x"],
    ["gen-data", "--env", "matrix", "--tier", "poor", "--episodes", "-1", "--out", "x"],
    ["gen-data", "--env", "matrix", "--tier", "poor", "--episodes", "1", "--out", "x",
     "--env-config", '{"kind": "grid", "width": 3, "height": 3, "n_agents": 2, '
                     '"n_landmarks": 2, "horizon": 6}'],
    [],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_train_writes_artifacts(tmp_path, matrix_data):
    out = tmp_path / "run"
    code = main(["train", "--data", str(matrix_data), "--variant", "cvf", "--tau", "0.7",
                 "--beta", "1.0", "--seed", "1", "--out", str(out), *FAST])
    assert code == EXIT_OK
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [(r["phase"], r["iter"]) for r in rows] == [
        ("value", "20"), ("value", "40"), ("value", "60"), ("policy", "20"), ("policy", "40")]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["tau"] == 0.7 and manifest["config"]["seed"] == 1
    assert check_manifest(out / "manifest.json") == []


def test_train_is_bit_identical(tmp_path, matrix_data):
    for name in ("a", "b"):
        assert main(["train", "--data", str(matrix_data), "--seed", "2",
                     "--out", str(tmp_path / name), *FAST]) == EXIT_OK
    for f in ("checkpoint.json", "metrics.csv"):
        assert sha256_file(tmp_path / "a" / f) == sha256_file(tmp_path / "b" / f)


def test_train_ratio_records_lineage(tmp_path, matrix_data):
    out = tmp_path / "half"
    assert main(["train", "--data", str(matrix_data), "--ratio", "0.5", "--out", str(out),
                 *FAST]) == EXIT_OK
    lineage = json.loads((out / "manifest.json").read_text())["lineage"]
    assert lineage[-1]["ratio"] == 0.5 and lineage[-1]["parent_episodes"] == 200


def test_train_bad_tau_is_usage_error(tmp_path, matrix_data):
    assert main(["train", "--data", str(matrix_data), "--tau", "1.5",
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_train_fingerprint_mismatch_exit_3(tmp_path, matrix_data):
    code = main(["train", "--data", str(matrix_data), "--out", str(tmp_path / "x"),
                 "--env-config", '{"kind": "matrix", "payoff": [[2, 0], [0, 1]]}', *FAST])
    assert code == EXIT_INPUT


def test_train_missing_or_corrupt_data_exit_3(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.omd.jsonl"),
                 "--out", str(tmp_path / "x")]) == EXIT_INPUT
    bad = tmp_path / "bad.omd.jsonl"
    bad.write_text("{not json\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "x")]) == EXIT_INPUT


def test_eval_contract(tmp_path, matrix_data, capsys):
    out = tmp_path / "run"
    main(["train", "--data", str(matrix_data), "--out", str(out), "--iters-value", "1000",
          "--iters-policy", "400", "--log-interval", "400"])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--seed", "3"]) == EXIT_OK
    first = capsys.readouterr().out
    result = json.loads(first)
    assert result["episodes"] == 32 and len(result["returns"]) == 32
    assert result["mean"] == 2.0 and result["std"] == 0.0
    main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--seed", "3"])
    assert capsys.readouterr().out == first


def test_eval_missing_checkpoint_exit_3(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.json")]) == EXIT_INPUT


def test_verify_suite_and_report(tmp_path):
    report = tmp_path / "r.json"
    assert main(["verify", "--suite", "expectile", "--out", str(report)]) == EXIT_OK
    payload = json.loads(report.read_text())
    assert payload["passed"] and payload["suites"][0]["suite"] == "expectile"


def test_verify_detects_tampered_artifact(tmp_path, matrix_data):
    out = tmp_path / "run"
    main(["train", "--data", str(matrix_data), "--out", str(out), *FAST])
    manifest = str(out / "manifest.json")
    assert main(["verify", "--suite", "expectile", "--manifest", manifest]) == EXIT_OK
    (out / "metrics.csv").write_text("tampered\n")
    assert main(["verify", "--suite", "expectile", "--manifest", manifest]) == EXIT_FAILED
    assert main(["verify", "--suite", "expectile", "--manifest",
                 str(tmp_path / "missing.json")]) == EXIT_INPUT


def test_ablate_rows_and_correlation(tmp_path, matrix_data):
    out = tmp_path / "abl"
    code = main(["ablate", "--data", str(matrix_data), "--seeds", "2",
                 "--variants", "cvf,no-cca,linear", "--taus", "0.5,0.7", "--out", str(out),
                 "--heldout-episodes", "20", *FAST])
    assert code == EXIT_OK
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert len(rows) == 3 * 2 * 2
    corr = list(csv.DictReader((out / "weight_correlation.csv").open()))
    assert {r["variant"] for r in corr} == {"cvf", "no-cca"}
    for r in corr:
        c = float(r["correlation"])
        assert c != c or -1.0 <= c <= 1.0  # nan when a weight head is constant
        assert int(r["n_samples"]) > 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["summary"]) == 6
    assert check_manifest(out / "manifest.json") == []
