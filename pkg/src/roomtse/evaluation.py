"""Extraction metrics, presence/overlap bucketing and report assembly."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import MixtureSample, select_active
from .losses import TAU_INACTIVE

CAP_DB = 100.0
BUCKETS = ("inactive", "nonoverlap", "overlap")


def _ratio_db(num: float, den: float, cap: float = CAP_DB) -> float:
    if den <= 0:
        return cap
    if num <= 0:
        return -cap
    return float(np.clip(10 * math.log10(num / den), -cap, cap))


def _check(x: np.ndarray, xh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, xh = np.asarray(x, dtype=float), np.asarray(xh, dtype=float)
    if x.shape != xh.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xh.shape}")
    if not np.any(x):
        raise ValueError("reference is all zeros; the metric is undefined")
    return x, xh


def sdr(x, xh, cap: float = CAP_DB) -> float:
    """10 log10(|x|^2 / |x - xh|^2), clipped to +-cap."""
    x, xh = _check(x, xh)
    return _ratio_db(float(x @ x), float(np.sum((x - xh) ** 2)), cap)


def sdri(x, xh, y, cap: float = CAP_DB) -> float:
    return sdr(x, xh, cap) - sdr(x, y, cap)


def si_sdr(x, xh, cap: float = CAP_DB) -> float:
    """Scale-invariant SDR via projection of the estimate onto the reference."""
    x, xh = _check(x, xh)
    if not np.any(xh):
        raise ValueError("estimate is all zeros; SI-SDR is undefined")
    alpha = float(xh @ x) / float(x @ x)
    s = alpha * x
    return _ratio_db(float(s @ s), float(np.sum((xh - s) ** 2)), cap)


def si_sdri(x, xh, y, cap: float = CAP_DB) -> float:
    return si_sdr(x, xh, cap) - si_sdr(x, y, cap)


def l0_metric(y, xh, tau: float = TAU_INACTIVE) -> float:
    """The inactive loss as a score: 10 log10(|xh|^2 + tau |y|^2); lower is better."""
    y, xh = _check(y, xh)
    return 10 * math.log10(float(xh @ xh) + tau * float(y @ y))


def bucket_of(speaker_distances: Sequence[float], d_q: float, r_spk: float) -> str:
    n = len(select_active(speaker_distances, d_q, r_spk))
    return BUCKETS[min(n, 2)]


# -- reports ----------------------------------------------------------------------

METRICS = ("sdr_nonoverlap", "sdr_overlap", "sdri_nonoverlap", "sdri_overlap", "si_sdr", "si_sdri",
           "l0_inactive", "nonoverlap_overlap_ratio")


@dataclass
class EvalReport:
    """Bucket means in dB. A metric is None when its bucket is empty."""

    sdr_nonoverlap: float | None = None
    sdr_overlap: float | None = None
    sdri_nonoverlap: float | None = None
    sdri_overlap: float | None = None
    si_sdr: float | None = None
    si_sdri: float | None = None
    l0_inactive: float | None = None
    nonoverlap_overlap_ratio: float | None = None  # percent of active samples that are non-overlapped
    n_samples: int = 0
    n_nonoverlap: int = 0
    n_overlap: int = 0
    n_inactive: int = 0
    seeds: list[int] = field(default_factory=list)
    std: dict[str, float | None] = field(default_factory=dict)
    pesq: float | None = None
    cap_db: float = CAP_DB

    def __post_init__(self):
        if self.n_nonoverlap + self.n_overlap + self.n_inactive != self.n_samples:
            raise ValueError("bucket counts do not add up to n_samples")
        r = self.nonoverlap_overlap_ratio
        if r is not None and not 0 <= r <= 100:
            raise ValueError(f"ratio {r} outside [0, 100]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown report fields {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def score(samples: Sequence[MixtureSample], estimates: Sequence[np.ndarray], seed: int | None = None) -> EvalReport:
    """Score estimates against their samples, bucketing by the presence rule."""
    if len(samples) != len(estimates):
        raise ValueError("one estimate per sample required")
    per: dict[str, list[float]] = {k: [] for k in ("sdr_no", "sdr_o", "sdri_no", "sdri_o", "si", "sii", "l0")}
    counts = dict.fromkeys(BUCKETS, 0)
    for s, est in zip(samples, estimates):
        b = bucket_of(s.speaker_distances, s.clue.d_q, s.r_spk)
        counts[b] += 1
        x, y = s.target.samples, s.mixture.samples
        if b == "inactive":
            per["l0"].append(l0_metric(y, est))
            continue
        tag = "no" if b == "nonoverlap" else "o"
        per[f"sdr_{tag}"].append(sdr(x, est))
        per[f"sdri_{tag}"].append(sdri(x, est, y))
        per["si"].append(si_sdr(x, est) if np.any(est) else -CAP_DB)
        per["sii"].append(per["si"][-1] - si_sdr(x, y))
    n_active = counts["nonoverlap"] + counts["overlap"]
    return EvalReport(
        sdr_nonoverlap=_mean(per["sdr_no"]), sdr_overlap=_mean(per["sdr_o"]),
        sdri_nonoverlap=_mean(per["sdri_no"]), sdri_overlap=_mean(per["sdri_o"]),
        si_sdr=_mean(per["si"]), si_sdri=_mean(per["sii"]), l0_inactive=_mean(per["l0"]),
        nonoverlap_overlap_ratio=100.0 * counts["nonoverlap"] / n_active if n_active else None,
        n_samples=len(samples), n_nonoverlap=counts["nonoverlap"], n_overlap=counts["overlap"],
        n_inactive=counts["inactive"], seeds=[] if seed is None else [seed])


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean over repeated runs, with the across-run standard deviation in ``std``."""
    if not reports:
        raise ValueError("nothing to aggregate")
    means, stds = {}, {}
    for m in METRICS:
        vals = [getattr(r, m) for r in reports if getattr(r, m) is not None]
        means[m] = _mean(vals)
        stds[m] = float(np.std(vals)) if vals else None
    return EvalReport(**means, n_samples=sum(r.n_samples for r in reports),
                      n_nonoverlap=sum(r.n_nonoverlap for r in reports),
                      n_overlap=sum(r.n_overlap for r in reports),
                      n_inactive=sum(r.n_inactive for r in reports),
                      seeds=[s for r in reports for s in r.seeds], std=stds)


# -- running a model --------------------------------------------------------------

Estimator = Callable[[Sequence[MixtureSample]], list[np.ndarray]]


def model_estimator(model, batch_size: int = 8) -> Estimator:
    @torch.no_grad()
    def run(samples: Sequence[MixtureSample]) -> list[np.ndarray]:
        model.eval()
        dtype = next(model.parameters()).dtype
        out = []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            mix = torch.as_tensor(np.stack([s.mixture.samples for s in chunk]), dtype=dtype)
            clue = model.clue_tensor([s.clue.with_clue_set(model.cfg.clue_set) for s in chunk], dtype=dtype)
            out.extend(e.double().numpy() for e in model(mix, clue))
        return out

    return run


def identity_estimator(samples: Sequence[MixtureSample]) -> list[np.ndarray]:
    return [s.mixture.samples.copy() for s in samples]


def evaluate(estimator, data_for_seed: Callable[[int], Sequence[MixtureSample]],
             seeds: Sequence[int] = (0,)) -> tuple[EvalReport, list[EvalReport]]:
    """Score one test set per seed; returns (aggregate, per-seed reports).

    ``estimator`` is a model or a callable mapping samples to estimates.
    """
    if isinstance(estimator, torch.nn.Module):
        estimator = model_estimator(estimator)
    runs = []
    for seed in seeds:
        samples = list(data_for_seed(seed))
        runs.append(score(samples, estimator(samples), seed))
    return aggregate(runs), runs


def format_table(report: EvalReport, title: str = "") -> str:
    """Fixed-width table: SDR, SDRi (non-overlap / overlap), PESQ if known, L0, ratio."""
    cols = [("SDR no", report.sdr_nonoverlap), ("SDR o", report.sdr_overlap),
            ("SDRi no", report.sdri_nonoverlap), ("SDRi o", report.sdri_overlap)]
    if report.pesq is not None:
        cols.append(("PESQ", report.pesq))
    cols += [("L0", report.l0_inactive), ("No/o %", report.nonoverlap_overlap_ratio)]
    width = 10
    head = "".join(f"{name:>{width}}" for name, _ in cols)
    row = "".join(f"{'-':>{width}}" if v is None else f"{v:>{width}.2f}" for _, v in cols)
    lines = [title] if title else []
    lines += [head, row, f"n={report.n_samples} (no {report.n_nonoverlap}, o {report.n_overlap}, "
                         f"inactive {report.n_inactive}), seeds {report.seeds}"]
    return "\n".join(lines)
