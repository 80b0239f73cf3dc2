import json

import pytest

from fleetalign.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main

# a tiny synthetic fleet keeps every command to a second or two
TINY = ["--set", "fleet.n_units=4", "--set", "fleet.rows=1200", "--set", "fleet.fault_lead=40",
        "--set", "fleet.faulty_rows=80", "--set", "epochs=1", "--set", "batch_size=128", "--set", "elm_hidden=20"]


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path), *TINY])


def test_unknown_kind_exits_with_config_error(tmp_path, capsys):
    assert run(tmp_path, "train", "--set", "kind=HAFA") == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "HAFAs" in err and "BetaVaeDw" in err


def test_unknown_key_exits_with_config_error(tmp_path):
    assert run(tmp_path, "train", "--set", "epoch=3") == EXIT_CONFIG


def test_delta_w_on_softmax_kind_is_a_config_error(tmp_path):
    assert run(tmp_path, "train", "--set", "kind=HAFAs", "--set", "delta_w=2") == EXIT_CONFIG


def test_train_writes_model_result_and_config(tmp_path):
    assert run(tmp_path, "train", "--set", "kind=HAFAs", "--seed", "2") == EXIT_OK
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["kind"] == "HAFAs" and 0.0 <= result["fpr"] <= 100.0
    assert (tmp_path / "model.json").exists()
    assert "seed = 2" in (tmp_path / "config.txt").read_text()


def test_config_file_reproduces_a_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "train", "--set", "kind=HFA") == EXIT_OK
    assert main(["train", "--config", str(a / "config.txt"), "--out", str(b)]) == EXIT_OK
    ra, rb = (json.loads((d / "result.json").read_text()) for d in (a, b))
    ra.pop("runtime"), rb.pop("runtime")
    assert ra == rb


def test_unknown_unit_is_a_data_error(tmp_path):
    assert run(tmp_path, "train", "--set", "source=U99") == EXIT_DATA


def test_sweep_and_report(tmp_path):
    sweep_dir, report_dir = tmp_path / "sweep", tmp_path / "report"
    assert run(sweep_dir, "sweep", "--set", "kinds=HFA,HELM") == EXIT_OK
    lines = (sweep_dir / "results.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 2 * 2
    assert "runtime" in (sweep_dir / "runs.jsonl").read_text()
    assert (sweep_dir / "aligned_pairs.csv").exists()
    assert run(tmp_path / "sel", "select-source") == EXIT_OK
    sel = tmp_path / "sel" / "selection.json"
    assert main(["report", "--set", f"results={sweep_dir / 'results.jsonl'}", "--set", f"selection={sel}",
                 "--out", str(report_dir)]) == EXIT_OK
    assert (report_dir / "mmd_selected_fpr.csv").exists()


def test_report_needs_results(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["report", "--set", "results=/nope.jsonl", "--out", str(tmp_path)]) == EXIT_DATA


def test_generate_then_prepare_from_manifest(tmp_path):
    assert run(tmp_path / "fleet", "generate-fleet") == EXIT_OK
    manifest = tmp_path / "fleet" / "manifest.csv"
    assert main(["prepare", "--set", f"manifest={manifest}", "--out", str(tmp_path / "prep")]) == EXIT_OK
    assert len(list((tmp_path / "prep").glob("*.params.csv"))) == 4
    assert len(list((tmp_path / "prep").glob("*.faulty_test.csv"))) == 2


def test_csv_input_requires_windows(tmp_path):
    assert main(["train", "--set", "source_csv=a.csv", "--set", "target_csv=b.csv",
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("prepare", "train", "sweep", "select-source", "generate-fleet", "report"):
        assert cmd in out
