import json

import pytest

from fundusfuse.cli import EXIT_CONFIG, EXIT_DATA, main
from fundusfuse.config import RunConfig
from fundusfuse.training import read_history


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n-patients", "20", "--seed", "5"]) == 0
    cfg = RunConfig.load(root / "data" / "config.txt")
    cfg.train.max_epochs = 2
    cfg.train.batch_size = 8
    cfg.save(root / "data" / "config.txt")
    assert main(["train", "--config", str(root / "data" / "config.txt"), "--out", str(root / "run")]) == 0
    return root


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--n-patients", "6", "--seed", "9"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 3
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("checkpoint.bin", "history.csv", "resolved_config.txt", "vocab.txt", "parameters.json"):
        assert (run / name).stat().st_size > 0, name
    assert len(read_history(run / "history.csv")) <= 2
    resolved = RunConfig.load(run / "resolved_config.txt")
    assert resolved.train.max_epochs == 2 and resolved.encoder.vocab_size > 0
    params = json.loads((run / "parameters.json").read_text())
    assert params


@pytest.mark.parametrize("protocol", ["paired", "isolated"])
def test_eval_protocols(workspace, protocol):
    out = workspace / f"eval_{protocol}"
    code = main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--manifest", str(workspace / "data" / "manifest.csv"), "--out", str(out),
                 "--protocol", protocol, "--split", "all"])
    assert code == 0
    report = json.loads((out / "retrieval.json").read_text())
    assert report["protocol"] == protocol and report["zero_shot"] is False
    assert json.loads((out / "classification.json").read_text())["sdrg_accuracy"] >= 0


def test_eval_zero_shot(workspace):
    main(["synth", "--out", str(workspace / "other"), "--n-patients", "8", "--seed", "77"])
    out = workspace / "zs"
    assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--manifest", str(workspace / "other" / "manifest.csv"), "--out", str(out), "--zero-shot"]) == 0
    assert json.loads((out / "retrieval.json").read_text())["zero_shot"] is True


def test_eval_rejects_incompatible_config(workspace, tmp_path):
    cfg = RunConfig.load(workspace / "run" / "resolved_config.txt")
    cfg.encoder.model_dim = cfg.fusion.model_dim = 16
    cfg.save(tmp_path / "other.txt")
    code = main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--config", str(tmp_path / "other.txt"), "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


def test_plot(workspace):
    main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"), "--out", str(workspace / "ev"),
          "--manifest", str(workspace / "data" / "manifest.csv"), "--split", "all"])
    out = workspace / "figs"
    assert main(["plot", "--history", str(workspace / "run" / "history.csv"),
                 "--report", str(workspace / "ev" / "retrieval.json"),
                 "--report", str(workspace / "ev" / "classification.json"), "--out", str(out)]) == 0
    figures = list(out.iterdir())
    assert len(figures) >= 3 and all(f.stat().st_size > 0 for f in figures)


def test_ablate_modality(workspace):
    cfg = RunConfig.load(workspace / "data" / "config.txt")
    cfg.train.max_epochs = 1
    cfg.train.max_steps = 2
    cfg.paths.manifest = str(workspace / "data" / "manifest.csv")
    cfg.paths.templates = str(workspace / "data" / "templates.csv")
    cfg.save(workspace / "ablate.txt")
    assert main(["ablate", "--config", str(workspace / "ablate.txt"), "--axis", "modality",
                 "--out", str(workspace / "abl")]) == 0
    lines = (workspace / "abl" / "ablation_modality.csv").read_text().splitlines()
    assert len(lines) == 5
    assert (workspace / "abl" / "ablation_modality.json").exists()


def test_exit_codes(tmp_path):
    cfg = RunConfig.toy()
    cfg.paths.manifest = str(tmp_path / "missing.csv")
    cfg.paths.templates = str(tmp_path / "missing_templates.csv")
    cfg.save(tmp_path / "c.txt")
    assert main(["train", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    (tmp_path / "bad.txt").write_text("encoder.model_dim = banana\n")
    assert main(["train", "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    (tmp_path / "ck.bin").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "ck.bin"), "--out", str(tmp_path)]) == EXIT_DATA
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2
