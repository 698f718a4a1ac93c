import json
import subprocess
import sys

import pytest

from dialogxl.cli import main
from dialogxl.data import dump_conversations, synth_generate


@pytest.fixture()
def files(tmp_path):
    tr, _, labels = synth_generate(0, 30)
    va, _, _ = synth_generate(1, 8, id_prefix="val")
    dump_conversations(tr, labels, tmp_path / "train.json")
    dump_conversations(va, labels, tmp_path / "val.json")
    cfg = {"train": "train.json", "val": "val.json", "epochs": 1, "metric": "weighted_f1",
           "model": {"d": 8, "n_layers": 1, "alloc": [1, 1, 1, 1], "dropout": 0.0}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def test_train_eval_cycle(files, capsys):
    ck, log = files / "ck.json", files / "log.csv"
    assert main(["train", "--config", str(files / "cfg.json"), "--seed", "2", "--runs", "1",
                 "--out", str(ck), "--log", str(log)]) == 0
    assert log.read_text().startswith("seed,epoch,")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ck), "--data", str(files / "val.json"),
                 "--metric", "micro_f1", "--exclude-label", "calm"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["metric"] == "micro_f1" and out["excluded_label"] == "calm"
    assert main(["dump-masks", "--checkpoint", str(ck), "--data", str(files / "val.json"),
                 "--conversation", "val-00000", "--t", "2", "--out", str(files / "m.json")]) == 0
    assert set(json.loads((files / "m.json").read_text())["masks"]) == {"global", "local", "speaker", "listener"}


def test_synth_analyze_ablate(files, capsys):
    out = files / "s.json"
    assert main(["synth", "--seed", "3", "--n", "12", "--out", str(out), "--mix", "0.2,0.4,0.4"]) == 0
    assert len(json.loads(out.read_text())) == 12
    capsys.readouterr()
    assert main(["analyze-memory", "--data", str(out), "--sweep", "100:300:100", "--batch", "4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("max_len,") and len(lines) == 4
    assert main(["ablate", "--config", str(files / "cfg.json"), "--remove", "speaker&listener",
                 "--out", str(files / "abl.csv")]) == 0
    assert (files / "abl.csv").read_text().splitlines()[2].startswith("speaker&listener,")


def test_exit_codes(files, capsys):
    assert main(["dump-masks", "--data", str(files / "val.json"), "--conversation", "val-00000",
                 "--t", "99", "--out", str(files / "x.json")]) == 1
    assert main(["synth", "--out", str(files / "x.json"), "--mix", "0.5,0.5,0.5"]) == 1
    assert main(["ablate", "--config", str(files / "cfg.json"), "--remove", "everything"]) == 1
    assert main(["ablate", "--config", str(files / "cfg.json"), "--remove", "speaker", "--seeds", "0"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == 1
    (files / "bad.json").write_text("[{\"conversation_id\": \"c\"}]")
    assert main(["analyze-memory", "--data", str(files / "bad.json")]) == 2
    assert main(["eval", "--checkpoint", str(files / "missing.json"), "--data", str(files / "val.json")]) == 2
    cfg = json.loads((files / "cfg.json").read_text())
    cfg["lr"] = 1e300
    (files / "hot.json").write_text(json.dumps(cfg))
    import numpy as np
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(files / "hot.json")]) == 3


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "dialogxl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "analyze-memory" in res.stdout
