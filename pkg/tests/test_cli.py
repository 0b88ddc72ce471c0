import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from shcenhance.cli import main
from shcenhance.wavio import write_wav

pytestmark = pytest.mark.slow

TINY = {
    "seed": 3,
    "scene": {"duration": 1.0, "snr_db": [0, 10], "rt60": [0.2, 0.3], "scenes_per_cell": 1},
    "train": {"epochs": 2, "lr": 0.01},
    "eval": {"figures": False},
    "analyze": {"trials": 3, "figures": False},
}


def write_cfg(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def tree_hashes(root: Path):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_cfg(root / "cfg.yaml", TINY)
    assert main(["synth", "--config", cfg, "--out-dir", str(root / "out")]) == 0
    return root, cfg


def test_synth_grid(synth_run):
    root, _ = synth_run
    man = json.loads((root / "out" / "synth" / "manifest.json").read_text())
    assert len(man["entries"]) == 4
    assert sorted({(e["rt60"], e["snr_db"]) for e in man["entries"]}) == [
        (0.2, 0.0), (0.2, 10.0), (0.3, 0.0), (0.3, 10.0)]
    # every output file is listed exactly once
    listed = sorted(man["outputs"])
    on_disk = sorted(str(p.relative_to(root / "out" / "synth"))
                     for p in (root / "out" / "synth").rglob("*.wav"))
    assert listed == on_disk
    assert man["config"]["array"]["radius"] == 0.035


def test_default_grid():
    from shcenhance.config import resolve
    from shcenhance.runs import scene_grid
    cells = scene_grid(resolve({}))
    assert len(cells) == 45
    assert sorted({c["snr_db"] for c in cells}) == [-10, -5, 0, 5, 10]
    assert sorted({round(c["rt60"], 1) for c in cells}) == [round(0.2 + 0.1 * i, 1) for i in range(9)]


def test_synth_deterministic(synth_run, tmp_path):
    root, cfg = synth_run
    assert main(["synth", "--config", cfg, "--out-dir", str(tmp_path), "--jobs", "2"]) == 0
    assert tree_hashes(tmp_path / "synth") == tree_hashes(root / "out" / "synth")


def test_oracle_sub_enhance_eval(synth_run):
    root, cfg = synth_run
    out = str(root / "out")
    assert main(["enhance", "--config", cfg, "--out-dir", out, "--estimator", "oracle-sub"]) == 0
    assert main(["eval", "--config", cfg, "--out-dir", out, "--estimator", "oracle-sub"]) == 0
    agg = json.loads((root / "out" / "eval" / "oracle-sub" / "aggregate.json").read_text())
    for cell in agg["cells"]:
        # the clean path scores itself as 100
        assert cell["stoi_enhanced"] >= 0.999 * 100.0
    with open(root / "out" / "eval" / "oracle-sub" / "table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert set(rows[0]) == {"rt60", "snr_db", "n", "stoi_unprocessed", "stoi_enhanced",
                            "si_sdr_unprocessed", "si_sdr_enhanced"}


def test_eval_reports_reproducible(synth_run, tmp_path):
    root, cfg = synth_run
    out = root / "out"
    for jobs in ("1", "2"):
        assert main(["enhance", "--config", cfg, "--out-dir", str(out), "--estimator", "wiener",
                     "--jobs", jobs]) == 0
        assert main(["eval", "--config", cfg, "--out-dir", str(out), "--estimator", "wiener",
                     "--jobs", jobs]) == 0
        snap = tree_hashes(out / "eval" / "wiener")
        if jobs == "1":
            first = snap
    assert snap == first
    agg = json.loads((out / "eval" / "wiener" / "aggregate.json").read_text())
    assert agg["overall"]["enhanced"]["si_sdr_db_mean"] > agg["overall"]["unprocessed"]["si_sdr_db_mean"]


def test_train_then_linear(synth_run):
    root, cfg = synth_run
    out = str(root / "out")
    assert main(["train", "--config", cfg, "--out-dir", out]) == 0
    tr = root / "out" / "train"
    assert (tr / "model.shcm").exists() and (tr / "loss.png").exists()
    assert main(["enhance", "--config", cfg, "--out-dir", out, "--estimator", "linear"]) == 0
    man = json.loads((root / "out" / "enhance" / "linear" / "manifest.json").read_text())
    assert len(man["entries"]) == 4


def test_figures(synth_run):
    root, _ = synth_run
    cfg = write_cfg(root / "fig.yaml", {**TINY, "eval": {"figures": True}})
    out = str(root / "out")
    assert main(["enhance", "--config", cfg, "--out-dir", out, "--estimator", "oracle-mag"]) == 0
    assert main(["eval", "--config", cfg, "--out-dir", out, "--estimator", "oracle-mag"]) == 0
    pngs = sorted(p.name for p in (root / "out" / "eval" / "oracle-mag").glob("*.png"))
    assert pngs == ["shc_order_mse.png", "si_sdr_vs_snr.png", "stoi_gain.png", "stoi_vs_snr.png"]
    assert all((root / "out" / "eval" / "oracle-mag" / p).read_bytes()[:4] == b"\x89PNG" for p in pngs)


def test_analyze_reference_config(tmp_path):
    assert main(["analyze", "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "analyze" / "report.json").read_text())
    assert rep["group_sizes"] == [4, 5, 7, 9]
    assert rep["n_coefficients"] == 25
    assert rep["per_mic_group_shapes"] == [[4, 16], [5, 16], [7, 16], [9, 16]]
    assert rep["far_field"]["threshold_m"] == pytest.approx(0.22857, abs=1e-5)
    assert rep["far_field"]["source_distance_m"] == 1.0 and rep["far_field"]["ok"]
    assert rep["stft_bins"] == 201
    assert rep["all_checks_ok"]
    assert (tmp_path / "analyze" / "array_layout.png").exists()


def test_exit_config_error(tmp_path, capsys):
    bad = write_cfg(tmp_path / "bad.yaml", {"sht": {"order": "four"}})
    assert main(["analyze", "--config", bad, "--out-dir", str(tmp_path)]) == 2
    assert "sht/order" in capsys.readouterr().err


def test_exit_missing_model(synth_run, tmp_path):
    root, _ = synth_run
    cfg = write_cfg(tmp_path / "c.yaml", {**TINY, "enhance": {"model": str(tmp_path / "none.shcm")}})
    assert main(["enhance", "--config", cfg, "--out-dir", str(root / "out"), "--estimator", "linear"]) == 2


def test_exit_io_error(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "missing.yaml")]) == 3
    cfg = write_cfg(tmp_path / "c.yaml", {**TINY, "scene": {**TINY["scene"],
                                                              "speech_wavs": [str(tmp_path / "nope.wav")]}})
    assert main(["synth", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 3
    assert "nope.wav" in capsys.readouterr().err
    assert main(["eval", "--out-dir", str(tmp_path / "empty")]) == 3


def test_exit_numerical_failure(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"analyze": {"roundtrip_tol": 1e-30, "figures": False}})
    assert main(["analyze", "--config", cfg, "--out-dir", str(tmp_path)]) == 4


def test_external_speech(tmp_path):
    from shcenhance.scene import speech_like
    wav = write_wav(tmp_path / "s.wav", speech_like(1.0, seed=8), 16000, "pcm16")
    cfg = write_cfg(tmp_path / "c.yaml", {**TINY, "scene": {**TINY["scene"], "snr_db": [5], "rt60": [0.2],
                                                              "speech_wavs": [str(wav)]}})
    assert main(["synth", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "synth" / "manifest.json").read_text())
    assert man["inputs"] == [str(wav)]


def test_config_subcommand(capsys):
    assert main(["config"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["sht"]["order"] == 4
