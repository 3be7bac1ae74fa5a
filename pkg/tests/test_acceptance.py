"""End-to-end acceptance checks, one test per criterion, at the stated tolerances."""
import itertools
import math
import time

import numpy as np
import pytest
import torch
from scipy import signal as sps
from scipy.stats import spearmanr

from roomtse import room as R
from roomtse.audio import Waveform, istft, stft
from roomtse.cli import main
from roomtse.dataset import MixtureGenerator, SyntheticCorpus, fixed_samples, select_active
from roomtse.evaluation import bucket_of, identity_estimator, score
from roomtse.losses import batch_objective, loss_active, loss_inactive
from roomtse.model import DistanceTSE, ModelConfig, QueryEmbedding, count_parameters, save_checkpoint
from roomtse.sweep import deconvolve_sweep, generate_ess, normalized_correlation
from roomtse.training import TrainConfig, build_model, collate, train

FS = 16000


def test_criterion_01_loss_oracles(measured):
    t0 = time.perf_counter()
    x = torch.as_tensor(np.random.default_rng(0).standard_normal(16000))
    y = x / x.norm()
    same = loss_active(x, x, 1e-3).item()
    half = loss_active(x, x / 2, 1e-3).item()
    silent = loss_inactive(y, torch.zeros_like(y), 1e-2).item()
    elapsed = time.perf_counter() - t0
    measured(f"L(x,x)={same:.9f} L(x,x/2)={half:.6f} L0(y,0)={silent:.9f} in {elapsed:.3f}s")
    assert abs(same - 30.0) <= 1e-6
    assert abs(half - 6.003) <= 1e-3
    assert abs(silent + 20.0) <= 1e-6
    assert elapsed < 1.0


def test_criterion_02_gradient_check(measured):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = ModelConfig(embed_dim=8, rnn_hidden=8, qeg_hidden=(12, 8, 8), clue_embed_dim=4,
                      n_query_blocks=1, n_basic_blocks=1, fft_size=16, win_length=16, hop_length=8)
    model = DistanceTSE(cfg).double()
    rng = np.random.default_rng(0)
    length = 88
    mix = torch.as_tensor(rng.standard_normal((2, length)))
    tgt = torch.as_tensor(rng.standard_normal((2, length)))
    clue = torch.as_tensor(np.c_[[1.2, 2.5], rng.uniform(0.5, 4, (2, 6)), [0.3, 0.4]])
    active = torch.tensor([True, False])
    assert model.stft(mix).shape[-2:] == (12, 9)

    def f():
        return batch_objective(model(mix, clue), tgt, mix, active)

    model.zero_grad()
    f().backward()
    params = [p for p in model.parameters()]
    flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel()) if abs(p.grad.view(-1)[j]) > 1e-5]
    picks = [flat[k] for k in rng.choice(len(flat), size=16, replace=False)]
    h, worst = 1e-6, 0.0
    with torch.no_grad():
        for i, j in picks:
            v = params[i].view(-1)
            orig = v[j].item()
            v[j] = orig + h
            up = f().item()
            v[j] = orig - h
            down = f().item()
            v[j] = orig
            fd = (up - down) / (2 * h)
            g = params[i].grad.view(-1)[j].item()
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g)))
    elapsed = time.perf_counter() - t0
    measured(f"max relative error {worst:.2e} over {len(picks)} coordinates, float64, {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 60


def test_criterion_03_stft_round_trip(measured):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = -np.inf
    for _ in range(100):
        x = rng.standard_normal(4 * FS)
        y = istft(stft(Waveform(x)), length=x.size).samples
        worst = max(worst, 10 * np.log10(np.sum((x - y) ** 2) / np.sum(x**2)))
    elapsed = time.perf_counter() - t0
    measured(f"worst reconstruction error {worst:.1f} dB over 100 signals, {elapsed:.1f}s")
    assert worst <= -60
    assert elapsed < 30


def test_criterion_04_rir_physics(measured):
    t0 = time.perf_counter()
    timing, rt_err = [], []
    for seed in range(100):
        room = R.sample_sim2_room(seed)
        band = R.distance_bands()[seed % 10]
        src = R.sample_source_in_band(room, band, seed)
        if src is None:  # band unreachable in a small room
            src = R.sample_source_in_band(room, R.DistanceBand(0.2, 2.0), seed)
        h = R.simulate_rir(room, src, seed=seed)
        expected = math.dist(src, room.mic_pos) / 343.0 * FS
        # arrival = first non-zero tap; the filtered response is causal, so nothing precedes it
        first = int(np.flatnonzero(np.abs(h.taps) > 1e-9 * np.abs(h.taps).max())[0])
        timing.append(abs(first - expected))
        rt_err.append(R.estimate_rt60(h) / room.rt60 - 1)
    room, _ = R.sample_sim1(0)
    dist, ratio = [], []
    for seed in range(200):
        _, src = R.sample_sim1(seed)
        h = R.simulate_rir(room, src, seed=seed)
        dist.append(h.distance)
        ratio.append(R.drr(h))
    rho = spearmanr(dist, ratio).statistic
    elapsed = time.perf_counter() - t0
    measured(f"max timing error {max(timing):.2f} samples, RT60 error {min(rt_err):+.1%}..{max(rt_err):+.1%}, "
             f"Spearman(distance, DRR) {rho:.3f}, {elapsed:.0f}s")
    assert max(timing) <= 1.0
    assert max(abs(e) for e in rt_err) <= 0.30
    assert rho < -0.8
    assert elapsed < 300


def test_criterion_05_presence_semantics(measured):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(1, 5))
        d = [float(v) for v in rng.uniform(0.2, 5.0, k)]
        r_spk = float(rng.choice([0.1, 0.5, rng.uniform(0.05, 1.0)]))
        # place some queries exactly on an interval edge
        d_q = d[0] + r_spk if rng.random() < 0.2 else float(rng.uniform(0.2, 5.5))
        brute = [i for i in range(k) if abs(d[i] - d_q) <= r_spk]
        bucket = "inactive" if not brute else "nonoverlap" if len(brute) == 1 else "overlap"
        mismatches += select_active(d, d_q, r_spk) != tuple(brute)
        mismatches += bucket_of(d, d_q, r_spk) != bucket
    rirs = [R.simulate_rir(*R.sample_sim1(s), seed=s) for s in range(8)]
    samples = MixtureGenerator(rirs, SyntheticCorpus(6, seed=0), n_speakers=3, duration=0.1, seed=5).take(40)
    report = score(samples, identity_estimator(samples))
    sizes = [sum(abs(d - s.clue.d_q) <= s.r_spk for d in s.speaker_distances) for s in samples]
    counts_ok = (report.n_inactive, report.n_nonoverlap, report.n_overlap) == (
        sizes.count(0), sizes.count(1), sum(n >= 2 for n in sizes))
    elapsed = time.perf_counter() - t0
    measured(f"{mismatches} mismatches over 1000 configs, report buckets consistent: {counts_ok}, {elapsed:.1f}s")
    assert mismatches == 0 and counts_ok
    assert elapsed < 10


def test_criterion_06_qeg_invariances(measured):
    t0 = time.perf_counter()
    torch.manual_seed(6)
    qeg = QueryEmbedding(ModelConfig())
    clue = torch.as_tensor(np.c_[[1.0, 3.0], np.random.default_rng(6).uniform(0.5, 5, (2, 6)), [0.3, 0.45]],
                           dtype=torch.float32)
    with torch.no_grad():
        ref = qeg(clue)
        perms_equal = all(torch.equal(qeg(clue[:, [0, *(1 + np.array(p)), 7]]), ref)
                          for p in itertools.permutations(range(6)))
    small = dict(embed_dim=16, rnn_hidden=16, qeg_hidden=(24, 16, 16), clue_embed_dim=8,
                 n_query_blocks=2, n_basic_blocks=1)
    x = torch.randn(1, 4000)
    dis_model = DistanceTSE(ModelConfig(**small, clue_set="Dis")).eval()
    other = clue[:1].clone()
    other[:, 1:] = torch.tensor([[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 1.5]])
    full_model = DistanceTSE(ModelConfig(**small)).eval()
    swapped = clue[:1, [0, 2, 1, 4, 3, 6, 5, 7]]
    with torch.no_grad():
        dis_equal = torch.equal(dis_model(x, clue[:1]), dis_model(x, other))
        fwd_perm_equal = torch.equal(full_model(x, clue[:1]), full_model(x, swapped))
    elapsed = time.perf_counter() - t0
    measured(f"720 permutations exact: {perms_equal}; forward under permutation exact: {fwd_perm_equal}; "
             f"Dis forward ignores room clues: {dis_equal}; {elapsed:.1f}s")
    assert perms_equal and fwd_perm_equal and dis_equal
    assert elapsed < 10


def test_criterion_07_parameter_budget(measured):
    n = count_parameters(DistanceTSE(ModelConfig(clue_set="Dis+Dim+Rt")))
    measured(f"{n:,} parameters ({n / 1.29e6 - 1:+.1%} vs 1.29M)")
    assert abs(n - 1.29e6) <= 0.1 * 1.29e6


@pytest.mark.slow
def test_criterion_08_overfit_smoke(measured):
    t0 = time.perf_counter()
    rirs = [R.simulate_rir(*R.sample_sim1(s), seed=s) for s in range(12)]
    gen = MixtureGenerator(rirs, SyntheticCorpus(8, seed=0), n_speakers=2, duration=0.5, seed=0)
    data = fixed_samples(gen, 6, 2)
    model = build_model(dict(embed_dim=16, rnn_hidden=16, qeg_hidden=(24, 16, 16), clue_embed_dim=8,
                             n_query_blocks=1, n_basic_blocks=1, standardize_clues=True), seed=0)
    cfg = TrainConfig(lr=3e-3, batch_size=8, epochs=500, max_steps=500, seed=0)
    result = train(model, cfg, data)
    batch = collate(model, data)
    with torch.no_grad():
        model.eval()
        est = model(batch["mixture"], batch["clue"])
    active_db = loss_active(batch["target"][:6], est[:6]).mean().item()
    rms = [20 * math.log10(e.pow(2).mean().sqrt().item() + 1e-12) for e in est[6:]]
    elapsed = time.perf_counter() - t0
    measured(f"mean active loss {active_db:.2f} dB, inactive RMS {max(rms):.1f} dBFS, "
             f"{result.steps} steps, {elapsed:.0f}s")
    assert result.steps <= 500
    assert active_db >= 10.0
    assert max(rms) <= -40.0
    assert elapsed < 600


def test_criterion_09_sweep_round_trip(measured):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    n = 4000
    t = np.arange(n) / FS
    h = rng.standard_normal(n) * np.exp(-6.9 * t / 0.3)
    h[:80] = 0
    h[80] = 3.0
    h = np.convolve(h, sps.firwin(257, [100, 7000], pass_zero=False, fs=FS))  # inside the swept band
    sweep, inverse = generate_ess(20, 7900, 1.0)
    rec = sps.fftconvolve(sweep.samples, h)
    clean = normalized_correlation(deconvolve_sweep(Waveform(rec), inverse, len(h)).samples, h)
    noise = rng.standard_normal(rec.size)
    noise *= np.sqrt(np.mean(rec**2) / np.mean(noise**2)) * 10 ** (-40 / 20)
    noisy = normalized_correlation(deconvolve_sweep(Waveform(rec + noise), inverse, len(h)).samples, h)
    elapsed = time.perf_counter() - t0
    measured(f"correlation clean {clean:.6f}, -40 dB noise {noisy:.6f}, {elapsed:.1f}s")
    assert clean >= 0.99 and noisy >= 0.95
    assert elapsed < 30


def test_criterion_10_determinism(measured, tmp_path):
    args = ["build-dataset", "--protocol", "sim1", "--n-rirs", "100", "--n-samples", "20", "--seed", "10",
            "--deterministic"]
    cfg = tmp_path / "build.json"
    cfg.write_text('{"schema_version": 1, "duration": 0.5}')
    runs = [tmp_path / "a", tmp_path / "b"]
    for out in runs:
        assert main([*args, "--config", str(cfg), "--out", str(out)]) == 0
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    same_build = files == sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file()) and all(
        (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in files)

    torch.manual_seed(10)
    ck = save_checkpoint(tmp_path / "ck.pt", DistanceTSE(ModelConfig(
        embed_dim=8, rnn_hidden=8, qeg_hidden=(12, 8, 8), clue_embed_dim=4, n_query_blocks=1, n_basic_blocks=1)))
    mix = runs[0] / "audio" / "test" / "000000_mix.wav"
    outs = [tmp_path / "x1", tmp_path / "x2"]
    for out in outs:
        assert main(["extract", str(mix), "--checkpoint", str(ck), "--d-q", "1.5", "--dis-mw", "3.5", "3.5",
                     "4", "4", "1.1", "1.9", "--rt60", "0.2", "--deterministic", "--out", str(out)]) == 0
    same_infer = (outs[0] / "estimate.wav").read_bytes() == (outs[1] / "estimate.wav").read_bytes()
    measured(f"build-dataset identical across runs ({len(files)} files): {same_build}; "
             f"inference identical: {same_infer}")
    assert same_build and same_infer
