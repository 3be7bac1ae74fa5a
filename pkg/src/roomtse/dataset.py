"""Mixture assembly with distance queries, speech corpora and manifests.

A sample pairs a reverberant mixture of K speakers with a query distance.
The target is the sum of every reverberant source whose true distance lies
within ``r_spk`` of the query, or silence when no source does.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .audio import SAMPLE_RATE, Waveform, convolve, read_wav, scale_to_rms
from .room import RirRecord, RoomSpec, max_source_distance, mic_wall_distances

CLUE_SETS = ("Dis", "Dis+Rt", "Dis+Dim", "Dis+Dim+Rt")
GAIN_RANGE_DBFS = (-25.0, -20.0)
UTTERANCE_SECONDS = 4.0
MIN_QUERY_DISTANCE = 0.2
MAX_QUERY_ATTEMPTS = 10_000


def clue_uses(clue_set: str) -> tuple[bool, bool]:
    """(uses mic-wall distances, uses RT60) for a clue-set name."""
    if clue_set not in CLUE_SETS:
        raise ValueError(f"unknown clue set {clue_set!r}; expected one of {CLUE_SETS}")
    return "Dim" in clue_set, "Rt" in clue_set


@dataclass(frozen=True)
class QueryClue:
    d_q: float
    dis_mw: tuple[float, ...] | None = None
    rt60: float | None = None
    clue_set: str = "Dis+Dim+Rt"

    def __post_init__(self):
        uses_dim, uses_rt = clue_uses(self.clue_set)
        if not math.isfinite(self.d_q) or self.d_q <= 0:
            raise ValueError(f"query distance must be positive, got {self.d_q}")
        if self.dis_mw is not None:
            dis = tuple(float(v) for v in self.dis_mw)
            if len(dis) != 6 or not all(math.isfinite(v) and v > 0 for v in dis):
                raise ValueError(f"dis_mw needs six positive distances, got {self.dis_mw}")
            object.__setattr__(self, "dis_mw", dis)
        elif uses_dim:
            raise ValueError(f"clue set {self.clue_set} requires dis_mw")
        if self.rt60 is not None:
            if not math.isfinite(self.rt60) or self.rt60 <= 0:
                raise ValueError(f"rt60 must be positive, got {self.rt60}")
        elif uses_rt:
            raise ValueError(f"clue set {self.clue_set} requires rt60")

    @classmethod
    def from_room(cls, d_q: float, room: RoomSpec, clue_set: str = "Dis+Dim+Rt") -> "QueryClue":
        return cls(d_q, tuple(mic_wall_distances(room)), room.rt60, clue_set)

    def with_clue_set(self, clue_set: str) -> "QueryClue":
        return QueryClue(self.d_q, self.dis_mw, self.rt60, clue_set)

    def as_array(self) -> np.ndarray:
        """[d_q, dis_1..dis_6, rt60], unused or missing entries set to zero."""
        uses_dim, uses_rt = clue_uses(self.clue_set)
        out = np.zeros(8)
        out[0] = self.d_q
        if uses_dim:
            out[1:7] = self.dis_mw
        if uses_rt:
            out[7] = self.rt60
        return out


@dataclass(frozen=True)
class MixtureSample:
    mixture: Waveform
    target: Waveform
    clue: QueryClue
    speaker_distances: tuple[float, ...]
    active_set: tuple[int, ...]
    r_spk: float
    gains_dbfs: tuple[float, ...] = ()
    sources: tuple[Waveform, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if len(self.mixture) != len(self.target):
            raise ValueError("mixture and target lengths differ")

    @property
    def active(self) -> bool:
        return len(self.active_set) > 0


def select_active(speaker_distances: Sequence[float], d_q: float, r_spk: float) -> tuple[int, ...]:
    """Indices k with |d_k - d_q| <= r_spk."""
    if r_spk <= 0:
        raise ValueError(f"r_spk must be positive, got {r_spk}")
    return tuple(k for k, d in enumerate(speaker_distances) if abs(d - d_q) <= r_spk)


def relabel_sample(sample: MixtureSample, r_spk: float) -> MixtureSample:
    """Recompute the active set and target of a sample for a new presence radius."""
    if not sample.sources:
        raise ValueError("sample carries no per-source images; it cannot be relabelled")
    active = select_active(sample.speaker_distances, sample.clue.d_q, r_spk)
    target = np.zeros(len(sample.mixture))
    for k in active:
        target = target + sample.sources[k].samples
    return replace(sample, target=Waveform(target, sample.mixture.rate), active_set=active, r_spk=r_spk)


def draw_gains(k: int, rng: np.random.Generator, gain_range=GAIN_RANGE_DBFS) -> tuple[float, ...]:
    return tuple(float(g) for g in rng.uniform(*gain_range, size=k))


def build_sample(speeches: Sequence[Waveform], rirs: Sequence[RirRecord], d_q: float, r_spk: float,
                 gain_seed=None, gains_dbfs: Sequence[float] | None = None,
                 clue_set: str = "Dis+Dim+Rt") -> MixtureSample:
    """Convolve, level each reverberant source, sum, and label the query.

    Per-source levels are drawn uniformly in [-25, -20] dBFS from
    ``gain_seed`` unless ``gains_dbfs`` are given explicitly.
    """
    if len(speeches) == 0 or len(speeches) != len(rirs):
        raise ValueError("need one RIR per speech signal and at least one speaker")
    lengths = {len(s) for s in speeches}
    if len(lengths) != 1:
        raise ValueError(f"speech signals have different lengths: {sorted(lengths)}")
    room = rirs[0].room
    if any(r.room != room for r in rirs):
        raise ValueError("all RIRs in a mixture must come from the same room")
    if gains_dbfs is None:
        gains_dbfs = draw_gains(len(speeches), np.random.default_rng(gain_seed))
    if len(gains_dbfs) != len(speeches):
        raise ValueError("one gain per source required")

    sources = []
    for s, h, g in zip(speeches, rirs, gains_dbfs):
        x = convolve(s, h)
        if not np.any(x.samples):
            raise ValueError("silent reverberant source; cannot set its level")
        sources.append(scale_to_rms(x, g))

    distances = tuple(float(h.distance) for h in rirs)
    active = select_active(distances, d_q, r_spk)
    mixture = np.sum([x.samples for x in sources], axis=0)
    target = np.zeros_like(mixture)
    for k in active:
        target = target + sources[k].samples
    rate = speeches[0].rate
    return MixtureSample(
        mixture=Waveform(mixture, rate),
        target=Waveform(target, rate),
        clue=QueryClue.from_room(d_q, room, clue_set),
        speaker_distances=distances,
        active_set=active,
        r_spk=r_spk,
        gains_dbfs=tuple(float(g) for g in gains_dbfs),
        sources=tuple(sources),
    )


def sample_query_distance(speaker_distances: Sequence[float], want_active: bool, r_spk: float,
                          d_range: tuple[float, float], seed=None,
                          max_attempts: int = MAX_QUERY_ATTEMPTS) -> float:
    """Draw a query distance that does (or does not) fall on some speaker.

    Active: pick a speaker uniformly, jitter within +/- r_spk, clip to the
    range. Inactive: rejection-sample the range until every speaker is more
    than r_spk away.
    """
    lo, hi = d_range
    if not 0 < lo < hi:
        raise ValueError(f"invalid query range {d_range}")
    rng = np.random.default_rng(seed)
    if want_active:
        if len(speaker_distances) == 0:
            raise ValueError("an active query needs at least one speaker")
        d_k = speaker_distances[int(rng.integers(len(speaker_distances)))]
        return float(np.clip(rng.uniform(d_k - r_spk, d_k + r_spk), lo, hi))
    for _ in range(max_attempts):
        d_q = float(rng.uniform(lo, hi))
        if all(abs(d - d_q) > r_spk for d in speaker_distances):
            return d_q
    raise ValueError(f"speakers at {list(speaker_distances)} leave no inactive query in {d_range}")


def split_dataset(entries: Sequence, ratios=(0.9, 0.02, 0.08), seed: int = 0) -> tuple[list, list, list]:
    """Shuffle and cut into train/val/test; rounding remainders go to train."""
    if len(entries) == 0:
        raise ValueError("cannot split an empty collection")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(entries))
    n = len(entries)
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    pick = lambda idx: [entries[i] for i in idx]
    return (pick(order[:n_train]), pick(order[n_train : n_train + n_val]),
            pick(order[n_train + n_val :]))


# -- speech corpora --------------------------------------------------------------


def crop_or_pad(x: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    if x.size >= n:
        offset = int(rng.integers(0, x.size - n + 1))
        return x[offset : offset + n], offset
    return np.pad(x, (0, n - x.size)), 0


class WavCorpus:
    """Directory of mono WAVs, one subdirectory per speaker."""

    def __init__(self, root: str | Path, rate: int = SAMPLE_RATE):
        self.root = Path(root)
        self.rate = rate
        self.files: dict[str, list[Path]] = {}
        for spk_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            wavs = sorted(spk_dir.rglob("*.wav"))
            if wavs:
                self.files[spk_dir.name] = wavs
        if not self.files:
            raise ValueError(f"no speaker folders with WAV files under {self.root}")

    @property
    def speakers(self) -> list[str]:
        return list(self.files)

    def utterance(self, speaker: str, rng: np.random.Generator, n_samples: int) -> tuple[Waveform, str, int]:
        path = self.files[speaker][int(rng.integers(len(self.files[speaker])))]
        w = read_wav(path)
        if w.rate != self.rate:
            raise ValueError(f"{path}: expected {self.rate} Hz, got {w.rate} Hz")
        x, offset = crop_or_pad(w.samples, n_samples, rng)
        return Waveform(x, w.rate), str(path), offset

    def load(self, ref: str, offset: int, n_samples: int) -> Waveform:
        x = read_wav(ref).samples[offset : offset + n_samples]
        return Waveform(np.pad(x, (0, n_samples - x.size)), self.rate)


class SyntheticCorpus:
    """Deterministic voiced/unvoiced babble standing in for a speech corpus.

    Each speaker has its own pitch range and vocal-tract scaling; utterances
    are syllable trains of harmonic sounds shaped by moving formants, with
    short noise bursts and pauses. Useful for tests and smoke runs where no
    real corpus is mounted.
    """

    def __init__(self, n_speakers: int = 16, seed: int = 0, rate: int = SAMPLE_RATE):
        self.rate = rate
        self.seed = seed
        rng = np.random.default_rng([seed, 7919])
        self._f0 = rng.uniform(85, 240, n_speakers)
        self._tract = rng.uniform(0.85, 1.2, n_speakers)
        self._speakers = [f"syn{i:03d}" for i in range(n_speakers)]

    @property
    def speakers(self) -> list[str]:
        return list(self._speakers)

    def utterance(self, speaker: str, rng: np.random.Generator, n_samples: int) -> tuple[Waveform, str, int]:
        utt = int(rng.integers(1_000_000))
        return self.load(f"synthetic:{speaker}:{utt}", 0, n_samples), f"synthetic:{speaker}:{utt}", 0

    def load(self, ref: str, offset: int, n_samples: int) -> Waveform:
        _, speaker, utt = ref.split(":")
        idx = self._speakers.index(speaker)
        x = self._render(idx, int(utt), n_samples + offset)[offset:]
        return Waveform(x, self.rate)

    def _render(self, idx: int, utt: int, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, idx, utt])
        fs = self.rate
        out = np.zeros(n)
        pos = int(rng.integers(0, fs // 10))
        while pos < n:
            dur = int(rng.uniform(0.12, 0.35) * fs)
            seg = np.arange(min(dur, n - pos))
            t = seg / fs
            if rng.random() < 0.8:
                f0 = self._f0[idx] * rng.uniform(0.85, 1.15) * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(1, 4) * t))
                phase = 2 * np.pi * np.cumsum(f0) / fs
                formants = np.sort(rng.uniform([300, 900, 2200], [900, 2300, 3400])) * self._tract[idx]
                sound = np.zeros(seg.size)
                for h in range(1, int(4000 / f0.max())):
                    fh = h * f0
                    gain = sum(1.0 / (1 + ((fh - F) / 120.0) ** 2) for F in formants) / h**0.5
                    sound += gain * np.sin(h * phase)
            else:
                sound = rng.standard_normal(seg.size) * 0.3
            env = np.sin(np.pi * seg / max(seg.size, 1)) ** 2
            out[pos : pos + seg.size] += sound * env
            pos += seg.size + int(rng.uniform(0.0, 0.15) * fs)
        return out / (np.max(np.abs(out)) + 1e-9) * 0.5


class SpeakerSubset:
    """A corpus restricted to some of its speakers (for speaker-disjoint splits)."""

    def __init__(self, corpus, speakers: Sequence[str]):
        missing = set(speakers) - set(corpus.speakers)
        if missing:
            raise ValueError(f"speakers not in corpus: {sorted(missing)}")
        self.corpus, self._speakers, self.rate = corpus, list(speakers), corpus.rate

    @property
    def speakers(self) -> list[str]:
        return list(self._speakers)

    def utterance(self, speaker: str, rng: np.random.Generator, n_samples: int):
        return self.corpus.utterance(speaker, rng, n_samples)

    def load(self, ref: str, offset: int, n_samples: int) -> Waveform:
        return self.corpus.load(ref, offset, n_samples)


def load_corpus(ref: str | Path | None, seed: int = 0, n_synthetic: int = 16):
    if ref is None or str(ref).startswith("synthetic"):
        return SyntheticCorpus(n_synthetic, seed=seed)
    return WavCorpus(ref)


# -- on-the-fly generation ---------------------------------------------------------


@dataclass
class MixtureGenerator:
    """Seeded on-the-fly sample synthesis from an RIR pool and a speech corpus.

    Sample ``i`` depends only on ``(seed, i)``. RIRs of one mixture come from
    the same room; speakers are distinct.
    """

    rirs: Sequence[RirRecord]
    corpus: object
    n_speakers: int = 2
    r_spk: float = 0.5
    inactive_ratio: float = 0.25
    clue_set: str = "Dis+Dim+Rt"
    duration: float = UTTERANCE_SECONDS
    seed: int = 0

    def __post_init__(self):
        if not self.rirs:
            raise ValueError("empty RIR pool")
        if self.r_spk <= 0:
            raise ValueError(f"r_spk must be positive, got {self.r_spk}")
        clue_uses(self.clue_set)
        by_room: dict[RoomSpec, list[int]] = {}
        for i, h in enumerate(self.rirs):
            by_room.setdefault(h.room, []).append(i)
        self._rooms = [idx for idx in by_room.values() if len(idx) >= self.n_speakers]
        if not self._rooms:
            raise ValueError(f"no room holds {self.n_speakers} RIRs")
        if len(self.corpus.speakers) < self.n_speakers:
            raise ValueError("corpus has fewer speakers than a mixture needs")

    def draw(self, i: int) -> tuple[MixtureSample, dict]:
        rng = np.random.default_rng([self.seed, i])
        n = int(round(self.duration * self.corpus.rate))
        want_active = rng.random() >= self.inactive_ratio
        for _ in range(100):
            room_idx = self._rooms[int(rng.integers(len(self._rooms)))]
            picks = rng.choice(len(room_idx), size=self.n_speakers, replace=False)
            rirs = [self.rirs[room_idx[j]] for j in picks]
            distances = [h.distance for h in rirs]
            d_range = (MIN_QUERY_DISTANCE, max(max_source_distance(rirs[0].room), max(distances)))
            try:
                d_q = sample_query_distance(distances, want_active, self.r_spk, d_range,
                                            seed=rng.integers(2**63), max_attempts=1000)
                break
            except ValueError:
                continue
        else:
            raise RuntimeError("could not place an inactive query after 100 RIR draws")
        speakers = rng.choice(len(self.corpus.speakers), size=self.n_speakers, replace=False)
        speeches, refs, offsets = [], [], []
        for s in speakers:
            w, ref, off = self.corpus.utterance(self.corpus.speakers[s], rng, n)
            speeches.append(w)
            refs.append(ref)
            offsets.append(off)
        gains = draw_gains(self.n_speakers, rng)
        sample = build_sample(speeches, rirs, d_q, self.r_spk, gains_dbfs=gains, clue_set=self.clue_set)
        provenance = {
            "rir_index": [int(room_idx[j]) for j in picks],
            "speech_paths": refs,
            "speech_offsets": offsets,
            "seed": int(i),
        }
        return sample, provenance

    def __iter__(self) -> Iterator[MixtureSample]:
        i = 0
        while True:
            yield self.draw(i)[0]
            i += 1

    def take(self, n: int, start: int = 0) -> list[MixtureSample]:
        return [self.draw(start + i)[0] for i in range(n)]


# -- manifests -------------------------------------------------------------------


@dataclass
class ManifestEntry:
    mixture_path: str | None
    target_path: str | None
    speech_paths: list[str]
    rir_paths: list[str]
    d_q: float
    r_spk: float
    speaker_distances: list[float]
    dis_mw: list[float]
    rt60: float
    active: bool
    seed: int
    active_set: list[int] = field(default_factory=list)
    speech_offsets: list[int] = field(default_factory=list)
    gains_dbfs: list[float] = field(default_factory=list)
    clue_set: str = "Dis+Dim+Rt"

    def clue(self) -> QueryClue:
        return QueryClue(self.d_q, tuple(self.dis_mw), self.rt60, self.clue_set)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


_REQUIRED = {"mixture_path", "target_path", "speech_paths", "rir_paths", "d_q", "r_spk",
             "speaker_distances", "dis_mw", "rt60", "active", "seed"}


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")
    return path


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    known = set(ManifestEntry.__dataclass_fields__)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("record is not a JSON object")
                missing = _REQUIRED - record.keys()
                if missing:
                    raise ValueError(f"missing fields {sorted(missing)}")
                unknown = record.keys() - known
                if unknown:
                    raise ValueError(f"unknown fields {sorted(unknown)}")
                entries.append(ManifestEntry(**record))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
    return entries


def validate_manifest(entries: Sequence[ManifestEntry], root: str | Path) -> None:
    """Raise FileNotFoundError naming the first referenced file that is missing."""
    root = Path(root)
    for e in entries:
        paths = [e.mixture_path, e.target_path, *e.rir_paths]
        paths += [p for p in e.speech_paths if not p.startswith("synthetic:")]
        for p in paths:
            if p is not None and not (root / p).exists():
                raise FileNotFoundError(f"manifest references missing file: {root / p}")
        if tuple(e.active_set) != select_active(e.speaker_distances, e.d_q, e.r_spk):
            raise ValueError(f"stored active set {e.active_set} disagrees with distances (seed {e.seed})")


def load_sample(entry: ManifestEntry, root: str | Path, corpus=None, rir_loader=None,
                duration: float = UTTERANCE_SECONDS) -> MixtureSample:
    """Read a sample's audio from disk, or re-synthesise it from its provenance."""
    root = Path(root)
    clue = entry.clue()
    if entry.mixture_path and entry.target_path:
        mixture = read_wav(root / entry.mixture_path)
        target = read_wav(root / entry.target_path)
        return MixtureSample(mixture, target, clue, tuple(entry.speaker_distances),
                             tuple(entry.active_set), entry.r_spk, tuple(entry.gains_dbfs))
    if corpus is None or rir_loader is None:
        raise ValueError("entry has no stored audio; a corpus and RIR loader are needed to rebuild it")
    n = int(round(duration * corpus.rate))
    speeches = [corpus.load(p, off, n) for p, off in zip(entry.speech_paths, entry.speech_offsets)]
    rirs = [rir_loader(p) for p in entry.rir_paths]
    return build_sample(speeches, rirs, entry.d_q, entry.r_spk, gains_dbfs=entry.gains_dbfs,
                        clue_set=entry.clue_set)


def fixed_samples(generator: MixtureGenerator, n_active: int, n_inactive: int,
                  max_draws: int = 10_000) -> list[MixtureSample]:
    """The first ``n_active`` active and ``n_inactive`` inactive draws, actives first."""
    active, inactive = [], []
    for i in range(max_draws):
        if len(active) >= n_active and len(inactive) >= n_inactive:
            break
        s = generator.draw(i)[0]
        (active if s.active else inactive).append(s)
    else:
        raise RuntimeError(f"no {n_active}/{n_inactive} active/inactive split within {max_draws} draws")
    return active[:n_active] + inactive[:n_inactive]
