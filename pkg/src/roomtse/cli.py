"""Command-line entry points: build-dataset, train, finetune, evaluate, extract, sweep-deconv.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import room as R
from .audio import read_wav, rms_dbfs, write_wav
from .config import ConfigError, build_config, echo_config, read_config_file
from .dataset import (
    ManifestEntry,
    MixtureGenerator,
    QueryClue,
    SpeakerSubset,
    clue_uses,
    load_corpus,
    load_sample,
    read_manifest,
    split_dataset,
    validate_manifest,
    write_manifest,
)
from .evaluation import evaluate as run_evaluation
from .evaluation import format_table
from .losses import LossConfig
from .model import extract, load_checkpoint
from .sweep import deconvolve_sweep, generate_ess
from .training import build_model, finetune, set_deterministic, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SPLITS = ("train", "val", "test")
SYNTHETIC_SPEAKERS = 24
SPEAKER_RATIOS = (128 / 240, 48 / 240, 64 / 240)


# -- dataset building -------------------------------------------------------------


def _simulate_rirs(cfg) -> list[R.RirRecord]:
    seeds = np.random.default_rng(cfg.seed).integers(2**31, size=max(cfg.n_rirs, cfg.n_rooms))
    records = []
    if cfg.protocol == "sim1":
        for s in seeds[: cfg.n_rirs]:
            room, pos = R.sample_sim1(int(s))
            records.append(R.simulate_rir(room, pos, seed=int(s)))
        return records
    for s in seeds[: cfg.n_rooms]:
        room = R.sample_sim2_room(int(s))
        for b, band in enumerate(R.distance_bands(0.2, 5.0, cfg.band_width)):
            for j in range(cfg.sources_per_band):
                src_seed = int(np.random.default_rng([int(s), b, j]).integers(2**31))
                pos = R.sample_source_in_band(room, band, src_seed)
                if pos is not None:  # band unreachable in this room
                    records.append(R.simulate_rir(room, pos, seed=src_seed))
    return records


def _split_rirs(records, cfg) -> dict[str, list[int]]:
    """RIR-disjoint pools; Sim2 splits whole rooms so rooms are disjoint too."""
    if cfg.protocol == "sim1":
        parts = split_dataset(list(range(len(records))), cfg.splits, cfg.seed)
    else:
        rooms = list(dict.fromkeys(r.room for r in records))
        groups = split_dataset(list(range(len(rooms))), cfg.splits, cfg.seed)
        groups = [list(g) for g in groups]
        for k in (1, 2):  # every requested split gets at least one room
            if cfg.splits[k] > 0 and not groups[k] and len(groups[0]) > 1:
                groups[k].append(groups[0].pop())
        parts = [[i for i, r in enumerate(records) if rooms.index(r.room) in set(g)] for g in groups]
    return dict(zip(SPLITS, parts))


def cmd_build_dataset(cfg, out: Path) -> int:
    corpus = load_corpus(cfg.corpus, cfg.seed, SYNTHETIC_SPEAKERS)
    speaker_split = dict(zip(SPLITS, split_dataset(corpus.speakers, SPEAKER_RATIOS, cfg.seed)))
    records = _simulate_rirs(cfg)
    pools = _split_rirs(records, cfg)
    counts = dict(zip(SPLITS, (len(p) for p in split_dataset(list(range(cfg.n_samples)), cfg.splits, cfg.seed))))

    # synthesise everything first so an infeasible setup fails before any writes
    generated = {}
    for k, split in enumerate(SPLITS):
        if counts[split] == 0:
            generated[split] = []
            continue
        pool = [records[i] for i in pools[split]]
        try:
            gen = MixtureGenerator(pool, SpeakerSubset(corpus, speaker_split[split]), cfg.n_speakers, cfg.r_spk,
                                   cfg.inactive_ratio, cfg.clue_set, cfg.duration, seed=cfg.seed * 3 + k)
        except ValueError as exc:
            raise ConfigError(f"{split} split is infeasible: {exc}") from exc
        generated[split] = [gen.draw(i) for i in range(counts[split])]

    echo_config(cfg, "build-dataset", out)
    R.write_rir_set(out, records)
    rir_path = [f"rirs/rir_{i:06d}.wav" for i in range(len(records))]
    for split in SPLITS:
        entries = []
        for i, (sample, prov) in enumerate(generated[split]):
            mix_rel = tgt_rel = None
            if cfg.write_audio:
                mix_rel, tgt_rel = f"audio/{split}/{i:06d}_mix.wav", f"audio/{split}/{i:06d}_tgt.wav"
                write_wav(out / mix_rel, sample.mixture)
                write_wav(out / tgt_rel, sample.target)
            entries.append(ManifestEntry(
                mixture_path=mix_rel, target_path=tgt_rel, speech_paths=prov["speech_paths"],
                rir_paths=[rir_path[pools[split][j]] for j in prov["rir_index"]],
                d_q=sample.clue.d_q, r_spk=sample.r_spk, speaker_distances=list(sample.speaker_distances),
                dis_mw=list(sample.clue.dis_mw), rt60=sample.clue.rt60, active=sample.active,
                seed=prov["seed"], active_set=list(sample.active_set), speech_offsets=prov["speech_offsets"],
                gains_dbfs=list(sample.gains_dbfs), clue_set=sample.clue.clue_set))
        write_manifest(out / f"{split}.jsonl", entries)
    meta = {
        "protocol": cfg.protocol, "duration": cfg.duration, "corpus": cfg.corpus, "seed": cfg.seed,
        "n_synthetic_speakers": SYNTHETIC_SPEAKERS, "n_speakers": cfg.n_speakers, "r_spk": cfg.r_spk,
        "inactive_ratio": cfg.inactive_ratio, "clue_set": cfg.clue_set,
        "splits": {s: {"rirs": [rir_path[i] for i in pools[s]], "speakers": speaker_split[s],
                       "n_samples": counts[s]} for s in SPLITS},
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"{len(records)} RIRs; samples " + ", ".join(f"{s} {counts[s]}" for s in SPLITS) + f" -> {out}")
    return EXIT_OK


# -- loading a built dataset ------------------------------------------------------


class BuiltDataset:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        meta_path = self.root / "dataset.json"
        if not meta_path.exists():
            raise ConfigError(f"{self.root} is not a dataset directory (no dataset.json)")
        self.meta = json.loads(meta_path.read_text())
        self.corpus = load_corpus(self.meta["corpus"], self.meta["seed"], self.meta["n_synthetic_speakers"])
        self._rirs = None

    @property
    def rirs(self) -> dict[str, R.RirRecord]:
        if self._rirs is None:
            records = R.read_rir_set(self.root / "rirs.json")
            self._rirs = {f"rirs/rir_{i:06d}.wav": r for i, r in enumerate(records)}
        return self._rirs

    def samples(self, split: str, rebuild: bool = False):
        entries = read_manifest(self.root / f"{split}.jsonl")
        validate_manifest(entries, self.root)
        if rebuild:  # drop stored audio so per-source images are re-synthesised
            entries = [ManifestEntry(**{**asdict(e), "mixture_path": None, "target_path": None}) for e in entries]
        return [load_sample(e, self.root, self.corpus, self.rirs.__getitem__, self.meta["duration"])
                for e in entries]

    def generator(self, split: str, seed: int, clue_set: str | None = None) -> MixtureGenerator:
        info = self.meta["splits"][split]
        pool = [self.rirs[p] for p in info["rirs"]]
        return MixtureGenerator(pool, SpeakerSubset(self.corpus, info["speakers"]), self.meta["n_speakers"],
                                self.meta["r_spk"], self.meta["inactive_ratio"],
                                clue_set or self.meta["clue_set"], self.meta["duration"], seed=seed)


# -- training ---------------------------------------------------------------------


def cmd_train(cfg, out: Path, deterministic: bool) -> int:
    data = BuiltDataset(cfg.dataset)
    train_cfg = cfg.train_config()
    if deterministic:
        train_cfg.deterministic = True
    train_set = data.samples("train")
    val_set = data.samples("val") or None
    model = build_model(cfg.model_config(), seed=cfg.seed)
    result = train(model, train_cfg, train_set, val_set, out, LossConfig(**cfg.loss), resume=cfg.resume,
                   verbose=True)
    print(f"best monitored loss {result.best_val:.4f} after {result.steps} steps -> {out}")
    return EXIT_OK


def cmd_finetune(cfg, out: Path, deterministic: bool) -> int:
    data = BuiltDataset(cfg.dataset)
    rebuild = "r_spk" in cfg.overrides
    train_set = data.samples("train", rebuild)
    val_set = data.samples("val", rebuild) or None
    result = finetune(cfg.checkpoint, train_set, val_set, cfg.overrides, out, LossConfig(**cfg.loss),
                      verbose=True)
    print(f"best monitored loss {result.best_val:.4f} after {result.steps} steps -> {out}")
    return EXIT_OK


def cmd_evaluate(cfg, out: Path) -> int:
    data = BuiltDataset(cfg.dataset)
    model, _ = load_checkpoint(cfg.checkpoint)
    if cfg.seeds:
        def draw(seed):
            return data.generator(cfg.split, seed, model.cfg.clue_set).take(cfg.n_samples)
        seeds = cfg.seeds
    else:
        samples = data.samples(cfg.split)

        def draw(seed):
            return samples
        seeds = [cfg.seed]
    report, runs = run_evaluation(model, draw, seeds)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    for i, r in enumerate(runs):
        r.save(out / f"report_seed{seeds[i]}.json")
    print(format_table(report, f"{cfg.split} split, checkpoint {cfg.checkpoint}"))
    return EXIT_OK


# -- single-file tools ------------------------------------------------------------


def cmd_extract(cfg, out: Path) -> int:
    model, _ = load_checkpoint(cfg.checkpoint)
    uses_dim, uses_rt = clue_uses(model.cfg.clue_set)
    if uses_dim and cfg.dis_mw is None:
        raise ConfigError(f"clue set {model.cfg.clue_set} needs the missing field dis_mw (--dis-mw)")
    if uses_rt and cfg.rt60 is None:
        raise ConfigError(f"clue set {model.cfg.clue_set} needs the missing field rt60 (--rt60)")
    clue = QueryClue(cfg.d_q, tuple(cfg.dis_mw) if uses_dim else None, cfg.rt60 if uses_rt else None,
                     model.cfg.clue_set)
    estimate = extract(model, read_wav(cfg.mixture), clue)
    path = write_wav(out / "estimate.wav", estimate)
    print(f"output RMS {rms_dbfs(estimate.samples):.2f} dBFS -> {path}")
    return EXIT_OK


def cmd_sweep_deconv(cfg, out: Path) -> int:
    recording = read_wav(cfg.recording)
    if cfg.f2 >= recording.rate / 2:
        raise ConfigError(f"f2 {cfg.f2} Hz must lie below Nyquist ({recording.rate / 2} Hz)")
    sweep, inverse = generate_ess(cfg.f1, cfg.f2, cfg.duration, recording.rate)
    problems = []
    if len(recording) < len(sweep):
        problems.append(f"recording ({len(recording)} samples) is shorter than the sweep ({len(sweep)})")
    if cfg.length is not None and cfg.length > len(recording) - len(sweep):
        problems.append(f"requested {cfg.length} taps but only {max(len(recording) - len(sweep), 0)} "
                        "samples follow the sweep")
    for p in problems:
        if cfg.strict:
            raise ConfigError(p)
        print(f"warning: {p}", file=sys.stderr)
    rir = deconvolve_sweep(recording, inverse, cfg.length)
    path = write_wav(out / "rir.wav", rir)
    print(f"{len(rir)} taps, peak at sample {int(np.argmax(np.abs(rir.samples)))} -> {path}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomtse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic kernels")
        return sp

    b = common(sub.add_parser("build-dataset", help="simulate RIRs and write sample manifests"))
    b.add_argument("--protocol", choices=("sim1", "sim2"))
    b.add_argument("--n-rirs", type=int)
    b.add_argument("--n-rooms", type=int)
    b.add_argument("--n-samples", type=int)

    for name in ("train", "finetune"):
        t = common(sub.add_parser(name, help=f"{name} a model"))
        t.add_argument("--dataset")
        if name == "finetune":
            t.add_argument("--checkpoint")

    e = common(sub.add_parser("evaluate", help="score a checkpoint on a dataset split"))
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=SPLITS)
    e.add_argument("--seeds", type=int, nargs="+")

    x = common(sub.add_parser("extract", help="extract the speech at a query distance from one file"))
    x.add_argument("mixture", nargs="?")
    x.add_argument("--checkpoint")
    x.add_argument("--d-q", type=float)
    x.add_argument("--dis-mw", type=float, nargs=6, metavar="D")
    x.add_argument("--rt60", type=float)

    s = common(sub.add_parser("sweep-deconv", help="recover an RIR from a sine-sweep recording"))
    s.add_argument("recording", nargs="?")
    s.add_argument("--f1", type=float)
    s.add_argument("--f2", type=float)
    s.add_argument("--duration", type=float)
    s.add_argument("--length", type=int)
    s.add_argument("--strict", action="store_true", default=None)
    return p


_NOT_CONFIG = {"command", "config", "out", "deterministic"}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    out = Path(args.out)
    try:
        cfg = build_config(args.command, read_config_file(args.config), overrides)
        set_deterministic(cfg.seed, args.deterministic)
        if args.command != "build-dataset":  # that one echoes only once its checks pass
            echo_config(cfg, args.command, out)
        if args.command == "build-dataset":
            return cmd_build_dataset(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.deterministic)
        if args.command == "finetune":
            return cmd_finetune(cfg, out, args.deterministic)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out)
        if args.command == "extract":
            return cmd_extract(cfg, out)
        return cmd_sweep_deconv(cfg, out)
    except FloatingPointError as exc:  # includes NumericError
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
