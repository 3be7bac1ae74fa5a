import json

import numpy as np
import pytest

from roomtse.audio import Waveform, read_wav, write_wav
from roomtse.cli import main
from roomtse.model import DistanceTSE, ModelConfig, save_checkpoint
from roomtse.sweep import generate_ess

TINY_MODEL = dict(embed_dim=8, rnn_hidden=8, qeg_hidden=[12, 8, 8], clue_embed_dim=4,
                  n_query_blocks=1, n_basic_blocks=1, fft_size=64, win_length=64, hop_length=32)
SMALL_BUILD = ["--protocol", "sim1", "--n-rirs", "100", "--n-samples", "50"]


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = write_json(root / "build.json", {"schema_version": 1, "duration": 0.25})
    assert main(["build-dataset", "--config", str(cfg), "--seed", "3", "--out", str(root / "data"),
                 *SMALL_BUILD]) == 0
    return root / "data"


def test_build_dataset_layout(dataset):
    meta = json.loads((dataset / "dataset.json").read_text())
    assert [meta["splits"][s]["n_samples"] for s in ("train", "val", "test")] == [45, 1, 4]
    rirs = [set(meta["splits"][s]["rirs"]) for s in ("train", "val", "test")]
    assert not (rirs[0] & rirs[1] or rirs[0] & rirs[2] or rirs[1] & rirs[2])
    speakers = [set(meta["splits"][s]["speakers"]) for s in ("train", "val", "test")]
    assert not (speakers[0] & speakers[1] or speakers[0] & speakers[2] or speakers[1] & speakers[2])
    lines = (dataset / "train.jsonl").read_text().splitlines()
    assert len(lines) == 45
    echoed = json.loads((dataset / "effective_config.json").read_text())
    assert echoed["seed"] == 3 and echoed["n_rirs"] == 100 and echoed["schema_version"] == 1


def test_build_dataset_is_byte_identical(dataset, tmp_path):
    cfg = write_json(tmp_path / "build.json", {"schema_version": 1, "duration": 0.25})
    again = tmp_path / "again"
    assert main(["build-dataset", "--config", str(cfg), "--seed", "3", "--out", str(again), "--deterministic",
                 *SMALL_BUILD]) == 0
    files = sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    for rel in files:
        assert (dataset / rel).read_bytes() == (again / rel).read_bytes(), rel


def test_config_errors_exit_2_without_side_effects(tmp_path):
    out = tmp_path / "never"
    bad = write_json(tmp_path / "bad.json", {"schema_version": 1, "colour": "red"})
    assert main(["build-dataset", "--config", str(bad), "--out", str(out)]) == 2
    old = write_json(tmp_path / "old.json", {"schema_version": 99})
    assert main(["build-dataset", "--config", str(old), "--out", str(out)]) == 2
    neg = write_json(tmp_path / "neg.json", {"schema_version": 1, "r_spk": -0.1})
    assert main(["build-dataset", "--config", str(neg), "--out", str(out)]) == 2
    # too few RIRs for two-speaker mixtures in the validation pool
    assert main(["build-dataset", "--out", str(out), "--n-rirs", "3", "--n-samples", "50"]) == 2
    assert not out.exists()


def test_train_evaluate_extract(dataset, tmp_path):
    cfg = write_json(tmp_path / "train.json", {
        "schema_version": 1, "dataset": str(dataset), "model": TINY_MODEL,
        "train": {"epochs": 2, "batch_size": 16}})
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--seed", "1"]) == 0
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 and log[0]["lr"] == 1e-3
    ck = run / "best.pt"
    assert ck.exists()

    ev = tmp_path / "eval"
    assert main(["evaluate", "--dataset", str(dataset), "--checkpoint", str(ck), "--out", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["n_samples"] == 4
    assert main(["evaluate", "--dataset", str(dataset), "--checkpoint", str(ck), "--out", str(ev),
                 "--seeds", "0", "1", "--config", str(write_json(tmp_path / "e.json", {"n_samples": 3}))]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["n_samples"] == 6 and report["seeds"] == [0, 1]

    ft = tmp_path / "ft"
    ft_cfg = write_json(tmp_path / "ft.json", {"overrides": {"epochs": 1, "r_spk": 0.1, "lr": 1e-4}})
    assert main(["finetune", "--config", str(ft_cfg), "--dataset", str(dataset), "--checkpoint",
                 str(run / "last.pt"), "--out", str(ft)]) == 0
    assert json.loads((ft / "train_config.json").read_text())["r_spk"] == 0.1

    mix = dataset / "audio" / "test" / "000000_mix.wav"
    args = ["extract", str(mix), "--checkpoint", str(ck), "--d-q", "1.5"]
    assert main([*args, "--out", str(tmp_path / "x0")]) == 2  # dis_mw and rt60 missing
    full = [*args, "--dis-mw", "3.5", "3.5", "4", "4", "1.1", "1.9", "--rt60", "0.2", "--deterministic"]
    assert main([*full, "--out", str(tmp_path / "x1")]) == 0
    assert main([*full, "--out", str(tmp_path / "x2")]) == 0
    a = (tmp_path / "x1" / "estimate.wav").read_bytes()
    assert a == (tmp_path / "x2" / "estimate.wav").read_bytes()
    assert len(read_wav(tmp_path / "x1" / "estimate.wav")) == len(read_wav(mix))


def test_extract_error_names_missing_field(tmp_path, capsys):
    ck = save_checkpoint(tmp_path / "ck.pt", DistanceTSE(ModelConfig(**{**TINY_MODEL, "clue_set": "Dis+Rt"})))
    write_wav(tmp_path / "m.wav", Waveform(np.random.default_rng(0).standard_normal(800) * 0.1))
    code = main(["extract", str(tmp_path / "m.wav"), "--checkpoint", str(ck), "--d-q", "1.0",
                 "--out", str(tmp_path / "o")])
    assert code == 2 and "rt60" in capsys.readouterr().err
    assert main(["extract", str(tmp_path / "m.wav"), "--checkpoint", str(ck), "--d-q", "1.0", "--rt60", "0.3",
                 "--out", str(tmp_path / "o")]) == 0


def test_numeric_failure_exit_3(tmp_path):
    model = DistanceTSE(ModelConfig(**TINY_MODEL))
    model.decoder.out_conv.bias.data.fill_(float("nan"))
    ck = save_checkpoint(tmp_path / "nan.pt", model)
    write_wav(tmp_path / "m.wav", Waveform(np.random.default_rng(0).standard_normal(800) * 0.1))
    assert main(["extract", str(tmp_path / "m.wav"), "--checkpoint", str(ck), "--d-q", "1.0",
                 "--dis-mw", "1", "1", "1", "1", "1", "1", "--rt60", "0.3", "--out", str(tmp_path / "o")]) == 3


def test_sweep_deconv(tmp_path):
    sweep, _ = generate_ess(50, 7000, 1.0)
    h = np.zeros(400)
    h[[20, 150, 300]] = [1.0, -0.4, 0.2]
    rec = np.convolve(sweep.samples, h)
    write_wav(tmp_path / "rec.wav", Waveform(np.r_[rec, np.zeros(2000)]))
    out = tmp_path / "o"
    assert main(["sweep-deconv", str(tmp_path / "rec.wav"), "--f1", "50", "--f2", "7000", "--duration", "1.0",
                 "--length", "400", "--out", str(out)]) == 0
    rir = read_wav(out / "rir.wav").samples
    assert len(rir) == 400 and int(np.argmax(np.abs(rir))) == 20
    assert main(["sweep-deconv", str(tmp_path / "rec.wav"), "--f1", "50", "--f2", "7000", "--duration", "1.0",
                 "--length", "5000", "--strict", "--out", str(out)]) == 2
    assert main(["sweep-deconv", str(tmp_path / "rec.wav"), "--f1", "50", "--f2", "9000", "--duration", "1.0",
                 "--out", str(out)]) == 2
