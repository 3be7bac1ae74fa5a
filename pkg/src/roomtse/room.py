"""Shoebox room simulation, placement protocols and RIR analysis.

The simulator is a randomized image-source model: every reflected image is
displaced by a small seeded random offset, which breaks up the regular
"sweeping echo" structure of the plain image method. Wall absorption is
frequency independent and derived from the requested RT60.
"""
from __future__ import annotations

import csv
import json
import functools
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .audio import SAMPLE_RATE, Waveform, read_wav, write_wav

SPEED_OF_SOUND = 343.0
SIM1_DIMS = (7.0, 8.0, 3.0)
SIM1_MIC = (3.5, 4.0, 1.1)
SIM1_RT60 = 0.2
SIM2_DIMS_MIN = (4.0, 5.0, 2.5)
SIM2_DIMS_MAX = (8.0, 10.0, 3.0)
SIM2_RT60_RANGE = (0.2, 0.5)

WALL_CLEARANCE = 0.5
SPEAKER_HEIGHT = (1.2, 2.0)
SIM2_MIC_HEIGHT = (1.0, 1.5)
MAX_ATTEMPTS = 10_000
JITTER_RADIUS = 0.08
DRR_CAP_DB = 100.0
HIGHPASS_HZ = 80.0


def _vec3(v) -> tuple[float, float, float]:
    v = tuple(float(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 coordinates, got {len(v)}")
    return v


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    rt60: float
    mic_pos: tuple[float, float, float]
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        dims, mic = _vec3(self.dims), _vec3(self.mic_pos)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "mic_pos", mic)
        if self.rt60 <= 0:
            raise ValueError(f"rt60 must be positive, got {self.rt60}")
        if not all(0 < m < L for m, L in zip(mic, dims)):
            raise ValueError(f"microphone {mic} is not strictly inside room {dims}")

    @property
    def volume(self) -> float:
        Lx, Ly, Lz = self.dims
        return Lx * Ly * Lz

    @property
    def surface(self) -> float:
        Lx, Ly, Lz = self.dims
        return 2 * (Lx * Ly + Lx * Lz + Ly * Lz)

    def contains(self, pos, margin: float = 0.0) -> bool:
        return all(margin < p < L - margin for p, L in zip(pos, self.dims))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "rt60": self.rt60, "mic_pos": list(self.mic_pos), "rate": self.rate}

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        return cls(tuple(d["dims"]), float(d["rt60"]), tuple(d["mic_pos"]), int(d.get("rate", SAMPLE_RATE)))


@dataclass(frozen=True)
class RirRecord:
    taps: np.ndarray
    rate: int
    distance: float
    room: RoomSpec
    src_pos: tuple[float, float, float]

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or not np.all(np.isfinite(taps)):
            raise ValueError("RIR taps must be a finite 1-D sequence")
        src = _vec3(self.src_pos)
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "src_pos", src)
        d = math.dist(src, self.room.mic_pos)
        if abs(d - self.distance) > 1e-6:
            raise ValueError(f"distance {self.distance} disagrees with geometry ({d})")

    def __len__(self):
        return self.taps.shape[0]


@dataclass(frozen=True)
class DistanceBand:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise ValueError(f"invalid distance band ({self.lo}, {self.hi}]")

    def __contains__(self, d: float) -> bool:
        return self.lo < d <= self.hi


def distance_bands(lo: float = 0.2, hi: float = 5.0, width: float = 0.5) -> list[DistanceBand]:
    """Consecutive bands of ``width`` meters; the first band starts at ``lo``."""
    edges = [lo]
    edge = math.floor(lo / width) * width + width
    while edge < hi - 1e-9:
        edges.append(edge)
        edge += width
    edges.append(hi)
    return [DistanceBand(a, b) for a, b in zip(edges[:-1], edges[1:])]


# -- absorption --------------------------------------------------------------


def _sphere_directions(n: int = 1024) -> np.ndarray:
    # Fibonacci lattice, deterministic and near-uniform
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    rho = np.sqrt(1 - z**2)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


_DIRECTIONS = _sphere_directions()


@functools.lru_cache(maxsize=1024)
def wall_reflection(room: RoomSpec, fit_range: tuple[float, float] = (5.0, 25.0)) -> float:
    """Uniform pressure reflection coefficient reproducing ``room.rt60``.

    Along direction u, an image at path length r has undergone about
    r * sum(|u_i| / L_i) reflections, so the specular energy envelope is
    mean_u beta**(2 r g(u)). Diffuse-field formulas (Sabine, Eyring) assume a
    single reflection rate; in flat rooms the grazing paths decay much more
    slowly and dominate the tail. The Schroeder integral of the
    direction-averaged envelope is evaluated in units of k*r with
    k = -2 ln(beta), and k is chosen so that the fitted decay (same level
    range as :func:`estimate_rt60`) matches the target.
    """
    g = np.abs(_DIRECTIONS) @ (1.0 / np.asarray(room.dims))
    tau = np.linspace(0.0, 40.0 / g.min(), 1000)
    edc = np.mean(np.exp(-np.outer(tau, g)) / g, axis=1)
    edc_db = 10 * np.log10(edc / edc[0])
    # edc_db is decreasing; interpolate on the reversed arrays
    t_hi, t_lo = np.interp([-fit_range[0], -fit_range[1]], edc_db[::-1], tau[::-1])
    k = 60.0 / (fit_range[1] - fit_range[0]) * (t_lo - t_hi) / (SPEED_OF_SOUND * room.rt60)
    return float(np.exp(-k / 2))


# -- simulation ---------------------------------------------------------------


def simulate_rir(room: RoomSpec, src, seed: int = 0, jitter: float = JITTER_RADIUS,
                 tail: float = 1.5) -> RirRecord:
    """Image-source RIR from ``src`` to the room's microphone.

    Images are kept up to a propagation time of ``tail * rt60`` (and at least
    past the direct path). Each tap is placed at the nearest integer sample,
    so the direct path lands exactly at ``round(d / c * rate)``.
    """
    src = _vec3(src)
    if not room.contains(src):
        raise ValueError(f"source {src} is not strictly inside room {room.dims}")
    mic = np.asarray(room.mic_pos)
    distance = math.dist(src, room.mic_pos)
    if distance <= 0:
        raise ValueError("source coincides with the microphone")

    fs = room.rate
    t_max = max(tail * room.rt60, distance / SPEED_OF_SOUND + 0.01)
    r_max = SPEED_OF_SOUND * t_max
    n_taps = int(math.ceil(t_max * fs)) + 1
    beta = wall_reflection(room)
    dims = np.asarray(room.dims)
    rng = np.random.default_rng(seed)

    orders = [np.arange(-int(math.ceil(r_max / (2 * L))) - 1, int(math.ceil(r_max / (2 * L))) + 2)
              for L in dims]
    h = np.zeros(n_taps)
    for p in (0, 1):
        for q in (0, 1):
            for r in (0, 1):
                parity = np.array([p, q, r])
                # image coordinate along each axis: (1 - 2p) * s + 2 n L
                axes = [(1 - 2 * parity[i]) * src[i] + 2 * orders[i] * dims[i] - mic[i] for i in range(3)]
                refl = [np.abs(orders[i] - parity[i]) + np.abs(orders[i]) for i in range(3)]
                gx, gy, gz = np.meshgrid(*axes, indexing="ij")
                kx, ky, kz = np.meshgrid(*refl, indexing="ij")
                offsets = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
                n_refl = (kx + ky + kz).ravel()
                keep = np.linalg.norm(offsets, axis=1) <= r_max + 2 * jitter
                offsets, n_refl = offsets[keep], n_refl[keep]
                if jitter > 0:
                    reflected = n_refl > 0
                    offsets[reflected] += _ball_samples(rng, int(reflected.sum()), jitter)
                dist = np.linalg.norm(offsets, axis=1)
                idx = np.rint(dist / SPEED_OF_SOUND * fs).astype(np.int64)
                valid = idx < n_taps
                gains = beta ** n_refl[valid] / (4 * np.pi * dist[valid])
                h += np.bincount(idx[valid], weights=gains, minlength=n_taps)
    # All images share one sign, so dense late arrivals pile up a slowly
    # decaying DC component; a causal high-pass removes it and keeps the
    # direct path as the first nonzero tap.
    h = sps.sosfilt(_highpass(fs), h)
    return RirRecord(h, fs, distance, room, src)


@functools.lru_cache(maxsize=8)
def _highpass(fs: int, cutoff: float = HIGHPASS_HZ) -> np.ndarray:
    return sps.butter(2, cutoff, btype="highpass", fs=fs, output="sos")


def _ball_samples(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * (radius * rng.random(n) ** (1 / 3))[:, None]


# -- placement protocols -------------------------------------------------------


def _placement_ok(room: RoomSpec, pos, d_range, clearance, heights) -> bool:
    x, y, z = pos
    Lx, Ly, Lz = room.dims
    if not (clearance <= x <= Lx - clearance and clearance <= y <= Ly - clearance):
        return False
    if not (max(heights[0], clearance) <= z <= min(heights[1], Lz - clearance)):
        return False
    d = math.dist(pos, room.mic_pos)
    return d_range[0] <= d <= d_range[1] and d > 0


def sample_sim1(seed: int) -> tuple[RoomSpec, tuple[float, float, float]]:
    """Single fixed room; source >= 0.5 m from walls, 1.2-2.0 m high, 0.2-5.0 m from mic."""
    room = RoomSpec(SIM1_DIMS, SIM1_RT60, SIM1_MIC)
    rng = np.random.default_rng(seed)
    Lx, Ly, _ = room.dims
    while True:
        pos = (
            float(rng.uniform(WALL_CLEARANCE, Lx - WALL_CLEARANCE)),
            float(rng.uniform(WALL_CLEARANCE, Ly - WALL_CLEARANCE)),
            float(rng.uniform(*SPEAKER_HEIGHT)),
        )
        if _placement_ok(room, pos, (0.2, 5.0), WALL_CLEARANCE, SPEAKER_HEIGHT):
            return room, pos


def sample_sim2_room(seed: int) -> RoomSpec:
    rng = np.random.default_rng(seed)
    dims = tuple(float(rng.uniform(a, b)) for a, b in zip(SIM2_DIMS_MIN, SIM2_DIMS_MAX))
    rt60 = float(rng.uniform(*SIM2_RT60_RANGE))
    mic = (
        float(rng.uniform(WALL_CLEARANCE, dims[0] - WALL_CLEARANCE)),
        float(rng.uniform(WALL_CLEARANCE, dims[1] - WALL_CLEARANCE)),
        float(rng.uniform(*SIM2_MIC_HEIGHT)),
    )
    return RoomSpec(dims, rt60, mic)


def sample_source_in_band(room: RoomSpec, band: DistanceBand, seed: int,
                          clearance: float = WALL_CLEARANCE,
                          heights: tuple[float, float] = SPEAKER_HEIGHT,
                          max_attempts: int = MAX_ATTEMPTS):
    """Random source position whose mic distance lies in ``band``, or ``None``.

    Candidates are drawn on spherical shells around the microphone and
    rejected if they break the wall-clearance or height rules.
    """
    rng = np.random.default_rng(seed)
    mic = np.asarray(room.mic_pos)
    for _ in range(max_attempts):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(band.lo, band.hi)
        pos = tuple(float(v) for v in mic + radius * direction)
        d = math.dist(pos, room.mic_pos)
        if band.lo < d <= band.hi and _placement_ok(room, pos, (band.lo, band.hi), clearance, heights):
            return pos
    return None


def max_source_distance(room: RoomSpec, clearance: float = WALL_CLEARANCE,
                        heights: tuple[float, float] = SPEAKER_HEIGHT) -> float:
    """Largest mic distance reachable by a source obeying the placement rules."""
    Lx, Ly, Lz = room.dims
    box = [(clearance, Lx - clearance), (clearance, Ly - clearance),
           (max(heights[0], clearance), min(heights[1], Lz - clearance))]
    # distance to a fixed point is convex, so the maximum sits on a corner
    return max(math.dist(c, room.mic_pos) for c in itertools.product(*box))


def mic_wall_distances(room: RoomSpec) -> np.ndarray:
    """Distances (x, Lx-x, y, Ly-y, z, Lz-z) from the microphone to the six walls."""
    out = []
    for m, L in zip(room.mic_pos, room.dims):
        out.extend([m, L - m])
    out = np.asarray(out)
    if np.any(out <= 0):
        raise ValueError("microphone lies on or outside the room boundary")
    return out


# -- analysis ------------------------------------------------------------------


def _taps(h) -> tuple[np.ndarray, int]:
    if isinstance(h, RirRecord):
        return h.taps, h.rate
    if isinstance(h, Waveform):
        return h.samples, h.rate
    return np.asarray(h, dtype=np.float64), SAMPLE_RATE


def schroeder_curve(h) -> np.ndarray:
    """Energy decay curve in dB, normalised to 0 dB at t = 0."""
    taps, _ = _taps(h)
    edc = np.cumsum(taps[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(edc / edc[0])


def estimate_rt60(h, fit_range: tuple[float, float] = (-5.0, -25.0), direct_window: float = 0.0025) -> float:
    """RT60 from a line fit to the Schroeder curve (T20 by default).

    The fit starts at the first ``fit_range[0]`` crossing, but never inside
    the direct sound (strongest tap +/- ``direct_window``): for close sources
    the direct path alone drops the curve past -5 dB. The fitted span is
    always ``fit_range[0] - fit_range[1]`` dB wide.
    """
    taps, fs = _taps(h)
    if not np.any(taps):
        raise ValueError("cannot estimate RT60 of an all-zero response")
    edc = schroeder_curve(taps)
    hi, lo = fit_range
    if not np.any(edc <= hi):
        raise ValueError("decay curve does not cover the fit range")
    start = int(np.argmax(edc <= hi))
    start = max(start, int(np.argmax(np.abs(taps))) + int(round(direct_window * fs)) + 1)
    if start >= taps.size or not np.isfinite(edc[start]):
        raise ValueError("insufficient decay range for an RT60 fit")
    below = edc <= min(lo, edc[start] - (hi - lo))
    if not below.any():
        raise ValueError("decay curve does not cover the fit range")
    stop = int(np.argmax(below))
    # A stationary signal only "decays" because the backward integral runs out
    # of samples; demand the fit range be resolved well before the record ends.
    if stop > 0.8 * taps.size or stop - start < 2:
        raise ValueError("insufficient decay range for an RT60 fit")
    t = np.arange(start, stop + 1) / fs
    slope, _ = np.polyfit(t, edc[start : stop + 1], 1)
    if slope >= 0:
        raise ValueError("energy decay curve is not decreasing")
    return float(-60.0 / slope)


def drr(h, direct_window: float = 0.0025) -> float:
    """Direct-to-reverberant ratio in dB around the strongest tap.

    Returns ``DRR_CAP_DB`` when nothing lies outside the direct window.
    """
    taps, fs = _taps(h)
    energy = taps**2
    if not np.any(energy):
        raise ValueError("DRR of an all-zero response is undefined")
    peak = int(np.argmax(np.abs(taps)))
    half = int(round(direct_window * fs))
    lo, hi = max(0, peak - half), min(taps.size, peak + half + 1)
    direct = energy[lo:hi].sum()
    rest = energy.sum() - direct
    if rest <= direct * 10 ** (-DRR_CAP_DB / 10):
        return DRR_CAP_DB
    return float(10 * np.log10(direct / rest))


def direct_path_index(room: RoomSpec, src) -> int:
    return int(round(math.dist(_vec3(src), room.mic_pos) / SPEED_OF_SOUND * room.rate))


# -- RIR set I/O ---------------------------------------------------------------


def write_rir_set(out_dir: str | Path, records: Sequence[RirRecord], name: str = "rirs") -> Path:
    """Write taps as float32 WAV files plus one JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for i, rec in enumerate(records):
        rel = Path(name) / f"rir_{i:06d}.wav"
        write_wav(out_dir / rel, Waveform(rec.taps, rec.rate))
        entries.append({
            "rir_path": rel.as_posix(),
            "dims": list(rec.room.dims),
            "rt60": rec.room.rt60,
            "mic_pos": list(rec.room.mic_pos),
            "src_pos": list(rec.src_pos),
            "distance": rec.distance,
            "rate": rec.rate,
        })
    manifest = out_dir / f"{name}.json"
    manifest.write_text(json.dumps({"format_version": 1, "rirs": entries}, indent=1))
    return manifest


def _load_taps(path: Path) -> tuple[np.ndarray, int | None]:
    if path.suffix.lower() == ".wav":
        w = read_wav(path)
        return w.samples, w.rate
    # raw float32 little-endian; rate comes from the sidecar/manifest
    return np.fromfile(path, dtype="<f4").astype(np.float64), None


def read_rir_set(manifest: str | Path) -> list[RirRecord]:
    manifest = Path(manifest)
    data = json.loads(manifest.read_text())
    records = []
    for entry in data["rirs"]:
        path = manifest.parent / entry["rir_path"]
        if not path.exists():
            raise FileNotFoundError(f"RIR file missing: {path}")
        taps, rate = _load_taps(path)
        rate = rate or int(entry.get("rate", SAMPLE_RATE))
        room = RoomSpec(tuple(entry["dims"]), float(entry["rt60"]), tuple(entry["mic_pos"]), rate)
        records.append(RirRecord(taps, rate, float(entry["distance"]), room, tuple(entry["src_pos"])))
    return records


def read_grid_rirs(directory: str | Path, dims, rt60: float, metadata: str = "metadata.csv") -> list[RirRecord]:
    """Reader for measured-RIR folders: single-channel WAVs plus a metadata CSV.

    The CSV needs columns ``file, src_x, src_y, src_z, mic_x, mic_y, mic_z``;
    an optional ``distance`` column is ignored in favour of the geometry.
    Room dimensions and RT60 are properties of the measured room, passed in.
    """
    directory = Path(directory)
    records = []
    with open(directory / metadata, newline="") as fh:
        for row in csv.DictReader(fh):
            path = directory / row["file"]
            taps, rate = _load_taps(path)
            src = tuple(float(row[k]) for k in ("src_x", "src_y", "src_z"))
            mic = tuple(float(row[k]) for k in ("mic_x", "mic_y", "mic_z"))
            room = RoomSpec(tuple(dims), rt60, mic, rate or SAMPLE_RATE)
            records.append(RirRecord(taps, room.rate, math.dist(src, mic), room, src))
    return records
