import json
import struct

import numpy as np
import pytest
import yaml

from dscodec.audio import Waveform, load_wav, save_wav
from dscodec.cli import main
from dscodec.config import ConfigError, RunConfig
from dscodec.synth import utterance

TINY = {
    "seed": 3,
    "data": {"synthetic_minutes": 0.1, "crop_length": 1600},
    "codec": {"preset": "toy", "overrides": {
        "base_width": 2, "latent_dim": 16, "dilations": [1], "lstm_layers": 1,
        "quantizer": {"codebook_size": 64, "code_dim": 4},
        "transformer_layers": [{"model_dim": 16, "n_heads": 2, "head_dim": 8, "ffn_hidden": 32}],
    }},
    "stage1": {"total_steps": 3, "batch_size": 2},
    "stage2": {"total_steps": 2, "batch_size": 2},
    "stage2t": {"total_steps": 2, "batch_size": 2},
    "joint": {"total_steps": 3, "batch_size": 2},
    "train": {"mpd": {"base_channels": 2}, "msstft": {"base_channels": 2, "fft_sizes": [512, 256, 128]},
              "codebook_warmup_batches": 0},
    "compare": {"seeds": [0, 1], "steps": 3, "batch_size": 2, "window": 2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY | {"output_dir": str(tmp_path / "out")}))
    return path


@pytest.fixture
def trained(config, tmp_path):
    assert main(["train", "--config", str(config), "--stage", "stage1"]) == 0
    return tmp_path / "out" / "stage1.ckpt"


def test_dump_config(capsys):
    assert main(["train", "--dump-config"]) == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped == RunConfig().to_dict()
    assert dumped["stage1"]["batch_size"] == 10 and dumped["train"]["optim"]["beta1"] == 0.8


def test_unknown_keys_rejected(tmp_path):
    for bad in ({"seed": 0, "sed": 1}, {"seed": 0, "data": {"manifets": "x"}},
                {"seed": 0, "codec": {"overrides": {"widht": 3}}}, {"seed": 0, "train": {"weights": {"mell": 1}}}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    (tmp_path / "bad.yaml").write_text("seed: 0\nbogus: 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml")]) == 1


def test_seed_is_mandatory():
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({"output_dir": "x"})


def test_stage2_without_checkpoint(config, caplog):
    assert main(["train", "--config", str(config), "--stage", "stage2"]) == 1
    assert "stage1.ckpt" in caplog.text and "--init-from" in caplog.text


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as exc:
        main(["encode"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_train_stages_and_curves(config, trained, tmp_path):
    curves = [json.loads(line) for line in open(tmp_path / "out" / "curves_stage1.ndjson")]
    lr0 = [r for r in curves if r["loss_name"] == "lr" and r["step"] == 0]
    assert lr0 and lr0[0]["value"] == 1e-4
    assert main(["train", "--config", str(config), "--stage", "stage2", "--init-from", str(trained)]) == 0
    assert (tmp_path / "out" / "stage2.ckpt").exists()
    assert main(["train", "--config", str(config), "--stage", "stage2t", "--init-from", str(trained)]) == 0
    assert (tmp_path / "out" / "stage2t.ckpt").exists()


def test_full_dual_stage_run(config, tmp_path):
    assert main(["train", "--config", str(config)]) == 0
    for name in ("stage1.ckpt", "stage2.ckpt", "curves.ndjson"):
        assert (tmp_path / "out" / name).exists()


def test_encode_decode_round_trip(trained, tmp_path):
    save_wav(tmp_path / "in.wav", Waveform(utterance(1.0, np.random.default_rng(0))))
    assert main(["encode", str(trained), str(tmp_path / "in.wav"), str(tmp_path / "t.dsct")]) == 0
    data = (tmp_path / "t.dsct").read_bytes()
    n_groups = data[8]
    assert struct.unpack_from("<Q", data, 9 + 2 * n_groups + 16)[0] == 80
    assert main(["decode", str(trained), str(tmp_path / "t.dsct"), str(tmp_path / "out.wav")]) == 0
    assert len(load_wav(tmp_path / "out.wav")) == 16000


def test_decode_mismatch(trained, config, tmp_path, caplog):
    other = yaml.safe_load(config.read_text())
    other["codec"]["overrides"]["quantizer"]["commitment_beta"] = 0.5
    other["output_dir"] = str(tmp_path / "other")
    (tmp_path / "other.yaml").write_text(yaml.safe_dump(other))
    assert main(["train", "--config", str(tmp_path / "other.yaml"), "--stage", "stage1", "--steps", "1"]) == 0
    save_wav(tmp_path / "in.wav", Waveform(np.zeros(1234)))
    assert main(["encode", str(trained), str(tmp_path / "in.wav"), str(tmp_path / "t.dsct")]) == 0
    caplog.clear()
    wrong = tmp_path / "other" / "stage1.ckpt"
    assert main(["decode", str(wrong), str(tmp_path / "t.dsct"), str(tmp_path / "o.wav")]) == 2
    from dscodec.checkpoint import load_checkpoint

    ids = [f"{load_checkpoint(p).config_hash:#018x}" for p in (trained, wrong)]
    assert all(i in caplog.text for i in ids)
    assert main(["decode", str(wrong), str(tmp_path / "t.dsct"), str(tmp_path / "o.wav"), "--force"]) == 0
    assert len(load_wav(tmp_path / "o.wav")) == 1234


def test_eval_bypass(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(2):
        save_wav(tmp_path / f"{i}.wav", Waveform(utterance(1.5, rng)))
    (tmp_path / "m.txt").write_text("0.wav\n1.wav\n")
    out = tmp_path / "ev"
    assert main(["eval", "--manifest", str(tmp_path / "m.txt"), "--out-dir", str(out), "--bypass", "--no-pesq"]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "file,pesq,stoi,f1_vuv"
    assert all(r.split(",")[1] == "NA" and float(r.split(",")[2]) == pytest.approx(1.0, abs=1e-6) for r in rows[1:])
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["means"]) == {"stoi", "f1_vuv"}


def test_eval_with_checkpoint(trained, tmp_path):
    save_wav(tmp_path / "a.wav", Waveform(utterance(1.0, np.random.default_rng(2))))
    (tmp_path / "m.txt").write_text("a.wav\n")
    assert main(["eval", "--checkpoint", str(trained), "--manifest", str(tmp_path / "m.txt"),
                 "--out-dir", str(tmp_path / "ev"), "--metrics", "stoi,f1_vuv"]) == 0
    assert json.loads((tmp_path / "ev" / "summary.json").read_text())["n_files"] == 1


def test_eval_empty_manifest(tmp_path):
    (tmp_path / "m.txt").write_text("")
    assert main(["eval", "--manifest", str(tmp_path / "m.txt"), "--out-dir", str(tmp_path / "e"), "--bypass"]) == 1


def test_compare(config, tmp_path, capsys):
    assert main(["compare", "--config", str(config)]) == 0
    out = tmp_path / "out"
    assert len(list(out.glob("curves_*_seed*.ndjson"))) == 4
    assert (out / "comparison.png").stat().st_size > 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["seeds"]) == {"0", "1"}
    for res in report["seeds"].values():
        assert res["lower_io_mse"] in ("stage1", "joint")
    assert "lower io_mse" in capsys.readouterr().out


@pytest.mark.parametrize("name", ["toy.yaml", "desk.yaml"])
def test_shipped_configs_load(name):
    from pathlib import Path

    from dscodec.config import RunConfig

    cfg = RunConfig.load(Path(__file__).parent.parent / "configs" / name)
    assert cfg.codec_config().token_rate == 80
