import json

import numpy as np
import pytest

from deepfool.cli import main
from deepfool.models import AffineClassifier, load_model, save_model
from deepfool.robustness import RobustnessReport

BLOBS = "blobs:n=20,c=4,per_class=150,spread=0.2,informative=8"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = root / "m.bin"
    assert run("train", "--arch", "fc:16,4", "--data", BLOBS, "--epochs", "8",
               "--lr", "0.05", "--out", model) == 0
    return root, model


def read_csv_body(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    return json.loads(lines[0][2:]), lines[1:]


def test_train_writes_loadable_model_and_trace(trained):
    root, model = trained
    f = load_model(model)
    assert f.n_inputs == 20 and f.n_classes == 4
    head, rows = read_csv_body(root / "m.bin.trace.csv")
    assert head["experiment"]["arch"] == "fc:16,4"
    assert head["model_hash"] == f.content_hash()
    assert rows[0] == "epoch,loss,train_acc,test_acc,rho_adv" and len(rows) == 9
    assert f.metadata["experiment"]["command"] == "train"


def test_train_rerun_is_byte_identical(tmp_path, monkeypatch):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        assert run("train", "--arch", "fc:6,4", "--data", BLOBS, "--epochs", "2",
                   "--seed", "7", "--out", "model.bin") == 0
        outs.append(((d / "model.bin").read_bytes(), (d / "model.bin.trace.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_missing_dataset_is_usage_error(tmp_path):
    assert run("train", "--arch", "fc:4,2", "--data", f"csv:{tmp_path}/nope.csv",
               "--out", tmp_path / "m.bin") == 2
    assert run("train", "--arch", "fc:4,2", "--data", "mnist", "--data-dir", tmp_path,
               "--out", tmp_path / "m.bin") == 2
    with pytest.raises(SystemExit) as info:
        run("train", "--data", BLOBS, "--out", tmp_path / "m.bin")
    assert info.value.code == 2


def test_attack_record(trained, tmp_path):
    _, model = trained
    assert run("attack", "--model", model, "--data", BLOBS, "--index", 3,
               "--out-dir", tmp_path / "a") == 0
    rec = json.loads((tmp_path / "a" / "attack.json").read_text())
    assert rec["fooled"] and rec["adversarial_label"] != rec["original_label"]
    r = np.load(tmp_path / "a" / "perturbation.npy")
    assert np.linalg.norm(r) == pytest.approx(rec["norm2_raw"], rel=1e-15)
    assert rec["model_hash"] == load_model(model).content_hash()
    assert rec["experiment"]["index"] == 3


def test_attack_linf_flag(trained, tmp_path):
    _, model = trained
    assert run("attack", "--model", model, "--data", BLOBS, "--p", "inf",
               "--out-dir", tmp_path) == 0
    rec = json.loads((tmp_path / "attack.json").read_text())
    assert rec["p"] == "inf" and rec["experiment"]["p"] == "inf"


def test_attack_eta_zero_lands_on_boundary(tmp_path):
    rng = np.random.default_rng(0)
    f = AffineClassifier(rng.normal(size=(3, 3)), rng.normal(size=3))
    save_model(f, tmp_path / "aff.bin")
    x = rng.normal(size=3)
    np.save(tmp_path / "x.npy", x)
    assert run("attack", "--model", tmp_path / "aff.bin", "--input", tmp_path / "x.npy",
               "--eta", "0", "--out-dir", tmp_path / "o") == 0
    rec = json.loads((tmp_path / "o" / "attack.json").read_text())
    adv = np.load(tmp_path / "o" / "adversarial.npy")
    s = f.logits(adv)
    # on the boundary two top scores tie up to rounding; fooled may go either way
    top = np.sort(s)[-2:]
    assert abs(top[1] - top[0]) < 1e-12
    assert rec["overshoot"] == 0.0 and isinstance(rec["fooled"], bool)


def test_attack_degenerate_exit_code(tmp_path):
    save_model(AffineClassifier(np.ones((3, 3)), np.array([1.0, 0.0, 0.0])), tmp_path / "d.bin")
    np.save(tmp_path / "x.npy", np.zeros(3))
    assert run("attack", "--model", tmp_path / "d.bin", "--input", tmp_path / "x.npy",
               "--out-dir", tmp_path / "o") == 4


def test_corrupt_model_exit_code(trained, tmp_path):
    _, model = trained
    bad = tmp_path / "bad.bin"
    bad.write_bytes(model.read_bytes()[:-10])
    assert run("attack", "--model", bad, "--data", BLOBS, "--out-dir", tmp_path) == 3


def test_bench_outputs_and_limit(trained, tmp_path):
    _, model = trained
    out = tmp_path / "b"
    assert run("bench", "--model", model, "--data", BLOBS, "--attack", "deepfool",
               "--attack", "fgs", "--limit", 100, "--out-dir", out) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["comparison.json", "report_deepfool.csv", "report_deepfool.json",
                     "report_fgs.csv", "report_fgs.json", "summary.csv"]
    rep = RobustnessReport.from_json((out / "report_deepfool.json").read_text())
    assert rep.n_samples == 100
    head, rows = read_csv_body(out / "summary.csv")
    assert "mean_ratio" in rows[0].split(",")
    fgs_row = dict(zip(rows[0].split(","), rows[2].split(",")))
    assert float(fgs_row["mean_ratio"]) > 1.0
    comp = json.loads((out / "comparison.json").read_text())
    assert comp["experiment"]["limit"] == 100


def test_bench_thread_count_does_not_change_files(trained, tmp_path, monkeypatch):
    _, model = trained
    monkeypatch.chdir(tmp_path)
    for threads, d in ((1, "one"), (3, "three")):
        assert run("bench", "--model", model, "--data", BLOBS, "--attack", "deepfool",
                   "--attack", "oracle", "--limit", 30, "--threads", threads,
                   "--out-dir", "out") == 0
        (tmp_path / "out").rename(tmp_path / d)
    for p in (tmp_path / "one").iterdir():
        assert p.read_bytes() == (tmp_path / "three" / p.name).read_bytes()


def test_report_subcommand(trained, tmp_path, capsys):
    _, model = trained
    run("bench", "--model", model, "--data", BLOBS, "--limit", 40, "--out-dir", tmp_path)
    capsys.readouterr()
    assert run("report", tmp_path / "report_deepfool.json", tmp_path / "report_fgs.csv",
               "--out", tmp_path / "s.json") == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].startswith("attack,") and "fgs" in text
    assert len(json.loads((tmp_path / "s.json").read_text())["comparisons"]) == 1
    (tmp_path / "junk.json").write_text("{}")
    assert run("report", tmp_path / "junk.json") == 3


def test_finetune_trace_rows_and_control(trained, tmp_path):
    _, model = trained
    assert run("finetune", "--model", model, "--data", BLOBS, "--attack", "deepfool",
               "--alpha", 1, "--eval-size", 50, "--out", tmp_path / "ft.bin") == 0
    head, rows = read_csv_body(tmp_path / "ft.bin.trace.csv")
    assert len(rows) == 6 and head["experiment"]["finetune"]["alpha"] == 1.0
    assert head["experiment"]["train"]["learning_rate"] == 0.05
    load_model(tmp_path / "ft.bin")
    assert run("finetune", "--model", model, "--data", BLOBS, "--attack", "none",
               "--eval-size", 50, "--out", tmp_path / "ctl.bin") == 0
    head, rows = read_csv_body(tmp_path / "ctl.bin.trace.csv")
    assert head["adversarial_set"] == {"attack": "none"} and len(rows) == 6


def test_finetune_alpha_trend_on_desk_model(desk_model, tmp_path):
    save_model(desk_model, tmp_path / "desk.bin")
    finals = {}
    for alpha in (1, 3):
        out = tmp_path / f"ft{alpha}.bin"
        assert run("finetune", "--model", tmp_path / "desk.bin", "--data", "blobs",
                   "--alpha", alpha, "--eval-size", 200, "--out", out) == 0
        _, rows = read_csv_body(tmp_path / f"ft{alpha}.bin.trace.csv")
        finals[alpha] = float(rows[-1].split(",")[-1])
    assert finals[3] <= finals[1]
