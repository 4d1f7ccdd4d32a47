"""End-to-end CLI flow on a miniature dataset."""

import json

import pytest

from attrsearch.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliflow")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--n", "140",
                 "--n-query", "12", "--n-gallery", "48", "--seed", "13"]) == 0
    ckpt = root / "model.ckpt"
    assert main(["train", "--variant", "RankL", "--seed", "1",
                 "--data", str(data), "--out", str(ckpt),
                 "--epochs-stage1", "1", "--epochs-stage2", "1",
                 "--epochs-stage3", "1",
                 "--report", str(root / "report.json")]) == 0
    index = root / "gallery.idx"
    assert main(["index", "--data", str(data), "--checkpoint", str(ckpt),
                 "--out", str(index)]) == 0
    return root, data, ckpt, index


def test_gen_data_writes_layout(workspace):
    root, data, _, _ = workspace
    assert (data / "schema.json").exists()
    assert (data / "manifest.jsonl").exists()
    assert (data / "splits.json").exists()
    lines = (data / "manifest.jsonl").read_text().strip().splitlines()
    assert len(lines) == 140
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "labels", "file"}
    assert (data / rec["file"]).exists()


def test_train_report_written(workspace):
    root, _, ckpt, _ = workspace
    assert ckpt.exists()
    assert ckpt.with_suffix(".ckpt.json").exists()
    report = json.loads((root / "report.json").read_text())
    assert report["variant"] == "RankL"
    assert "curves" in report and "stage2" in report["curves"]
    assert "evaluation" in report


def test_query_command(workspace, capsys):
    root, data, ckpt, index = workspace
    manifest = (data / "manifest.jsonl").read_text().strip().splitlines()
    splits = json.loads((data / "splits.json").read_text())
    qid = splits["query"][0]
    labels = {json.loads(l)["id"]: json.loads(l)["labels"] for l in manifest}
    schema = json.loads((data / "schema.json").read_text())
    attr = schema["attributes"][0]
    current = labels[qid][0]
    target = (current + 1) % len(attr["values"])
    assert main(["query", "--data", str(data), "--checkpoint", str(ckpt),
                 "--index", str(index), "--image", qid,
                 "--set", f"{attr['name']}={attr['values'][target]}",
                 "-k", "5"]) == 0
    out = capsys.readouterr().out
    assert "target labels" in out
    assert len([l for l in out.splitlines() if l.strip() and l[0:3].strip().isdigit()]) == 5


def test_eval_command_writes_tables(workspace):
    root, data, ckpt, index = workspace
    csv_path = root / "eval.csv"
    json_path = root / "eval.json"
    assert main(["eval", "--data", str(data), "--checkpoint", str(ckpt),
                 "--index", str(index), "-k", "5,10",
                 "--out-csv", str(csv_path), "--out-json", str(json_path)]) == 0
    header = csv_path.read_text().splitlines()[0].split(",")
    assert header[0] == "k" and header[-1] == "avg"
    doc = json.loads(json_path.read_text())
    assert doc["ks"] == [5, 10]


def test_explain_command(workspace):
    root, data, ckpt, _ = workspace
    splits = json.loads((data / "splits.json").read_text())
    qid = splits["query"][1]
    out_dir = root / "aams"
    assert main(["explain", "--data", str(data), "--checkpoint", str(ckpt),
                 "--image", qid, "--out", str(out_dir)]) == 0
    pngs = list(out_dir.glob("*.png"))
    assert len(pngs) == 4
    boxes = json.loads((out_dir / f"{qid}_boxes.json").read_text())
    assert len(boxes) == 4
    for rec in boxes:
        assert set(rec) == {"attribute", "class", "box"}


def test_config_file_overridden_by_flags(tmp_path):
    from attrsearch.cli import train_config_from_sources
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"batch_size": 8, "epochs_stage1": 3}))
    cfg = train_config_from_sources(cfg_file, {"batch_size": 4,
                                               "epochs_stage1": None})
    assert cfg.batch_size == 4          # flag wins
    assert cfg.epochs_stage1 == 3       # config wins over default
    assert cfg.epochs_stage2 == 12      # untouched default


def test_unknown_command_prints_help(capsys):
    assert main([]) == 2
