"""Optimisation loop: Adam, plateau learning-rate decay, clipping, checkpoints."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import MixtureGenerator, MixtureSample, relabel_sample
from .losses import LossConfig, batch_objective
from .model import DistanceTSE, ModelConfig, load_checkpoint, save_checkpoint

FINETUNE_KEYS = frozenset({"epochs", "lr", "r_spk", "fraction"})


class NumericError(FloatingPointError):
    """Raised when the objective or a gradient stops being finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.8
    patience: int = 10
    clip_norm: float = 5.0
    batch_size: int = 14
    epochs: int = 400
    inactive_ratio: float = 0.25
    r_spk: float = 0.5
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None  # stop early after this many optimiser steps
    deterministic: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0 < self.lr_decay < 1:
            raise ValueError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if not 0 <= self.inactive_ratio < 1:
            raise ValueError(f"inactive_ratio must lie in [0, 1), got {self.inactive_ratio}")
        if self.r_spk <= 0:
            raise ValueError(f"r_spk must be positive, got {self.r_spk}")
        if self.lr < 0 or self.clip_norm <= 0 or self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("invalid optimiser settings")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def set_deterministic(seed: int, enabled: bool = True) -> None:
    """Seed every RNG and, if enabled, force single-threaded deterministic kernels."""
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# -- data -------------------------------------------------------------------------


class GeneratedSamples(Sequence):
    """A fixed-size, indexable view of a ``MixtureGenerator``."""

    def __init__(self, generator: MixtureGenerator, size: int, start: int = 0):
        self.generator, self.size, self.start = generator, size, start

    def __len__(self):
        return self.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.size))]
        if not -self.size <= i < self.size:
            raise IndexError(i)
        return self.generator.draw(self.start + i % self.size)[0]

    def with_r_spk(self, r_spk: float) -> "GeneratedSamples":
        return GeneratedSamples(replace(self.generator, r_spk=r_spk), self.size, self.start)


def with_r_spk(data, r_spk: float):
    """Re-label a sample collection for a new presence radius."""
    if isinstance(data, GeneratedSamples):
        return data.with_r_spk(r_spk)
    return [relabel_sample(s, r_spk) for s in data]


def subset(data, fraction: float, seed: int):
    if not 0 < fraction <= 1:
        raise ValueError(f"dataset fraction must lie in (0, 1], got {fraction}")
    n = max(1, int(round(fraction * len(data))))
    keep = np.sort(np.random.default_rng(seed).permutation(len(data))[:n])
    return [data[int(i)] for i in keep]


def collate(model: DistanceTSE, samples: Sequence[MixtureSample]) -> dict[str, torch.Tensor]:
    dtype = next(model.parameters()).dtype
    lengths = {len(s.mixture) for s in samples}
    if len(lengths) != 1:
        raise ValueError(f"batch mixes signal lengths {sorted(lengths)}")
    return {
        "mixture": torch.as_tensor(np.stack([s.mixture.samples for s in samples]), dtype=dtype),
        "target": torch.as_tensor(np.stack([s.target.samples for s in samples]), dtype=dtype),
        "clue": model.clue_tensor([s.clue.with_clue_set(model.cfg.clue_set) for s in samples], dtype=dtype),
        "active": torch.tensor([s.active for s in samples]),
    }


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the order depends only on (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# -- steps ------------------------------------------------------------------------


def objective(model: DistanceTSE, batch: dict, loss_cfg: LossConfig) -> torch.Tensor:
    est = model(batch["mixture"], batch["clue"])
    return batch_objective(est, batch["target"], batch["mixture"], batch["active"], loss_cfg)


def train_step(model, optimizer, batch, loss_cfg: LossConfig, clip_norm: float) -> tuple[float, float]:
    """One clipped Adam step. Returns (objective, pre-clip gradient norm)."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = objective(model, batch, loss_cfg)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite objective {loss.item()}")
    loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    if not torch.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm.item()}")
    optimizer.step()
    return loss.item(), norm.item()


@torch.no_grad()
def evaluate_objective(model, data, loss_cfg: LossConfig, batch_size: int) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(data), batch_size):
        chunk = [data[j] for j in range(i, min(i + batch_size, len(data)))]
        total += objective(model, collate(model, chunk), loss_cfg).item() * len(chunk)
    return total / len(data)


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def make_scheduler(optimizer, cfg: TrainConfig):
    # torch counts bad epochs *beyond* patience; the decay should fire on the
    # patience-th consecutive epoch without a new best
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=cfg.lr_decay, patience=cfg.patience - 1,
        threshold=0.0, threshold_mode="abs")


# -- loop -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DistanceTSE
    history: list[dict]
    best_val: float
    best_path: Path | None
    steps: int


def train(model: DistanceTSE, cfg: TrainConfig, train_data, val_data=None, out_dir=None,
          loss_cfg: LossConfig | None = None, resume: str | Path | None = None,
          optimizer_state: dict | None = None, start_epoch: int = 0, verbose: bool = False) -> TrainResult:
    """Train ``model`` in place.

    The scheduler watches the validation objective, or the training objective
    when ``val_data`` is None. With ``out_dir`` set, writes ``train_log.jsonl``,
    ``best.pt`` (lowest monitored loss) and ``last.pt`` (resumable).
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    if val_data is not None and len(val_data) == 0:
        raise ValueError("empty validation set")
    loss_cfg = loss_cfg or LossConfig()
    out = Path(out_dir) if out_dir is not None else None
    if cfg.deterministic:
        set_deterministic(cfg.seed)

    optimizer = make_optimizer(model, cfg)
    scheduler = make_scheduler(optimizer, cfg)
    best, steps = math.inf, 0
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
        for group in optimizer.param_groups:
            group["lr"] = cfg.lr
    if resume is not None:
        state = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(state["parameters"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["meta"]["scheduler"])
        start_epoch = state["meta"]["epoch"] + 1
        best, steps = state["meta"]["best_val"], state["meta"]["steps"]

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    if verbose:
        print(f"# lr {cfg.lr:g}  batch {cfg.batch_size}  clip {cfg.clip_norm:g}  "
              f"decay {cfg.lr_decay:g}/{cfg.patience} epochs")

    history: list[dict] = []
    best_path = out / "best.pt" if out is not None else None
    t0 = time.monotonic()
    for epoch in range(start_epoch, cfg.epochs):
        running, seen = 0.0, 0
        for idx in batches(len(train_data), cfg.batch_size, cfg.seed, epoch):
            batch = collate(model, [train_data[int(i)] for i in idx])
            try:
                loss, _ = train_step(model, optimizer, batch, loss_cfg, cfg.clip_norm)
            except NumericError:
                if out is not None:
                    save_checkpoint(out / "nan_diagnostic.pt", model, optimizer, epoch=epoch, steps=steps,
                                    batch_indices=[int(i) for i in idx])
                raise
            running += loss * len(idx)
            seen += len(idx)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        train_loss = running / seen
        val_loss = evaluate_objective(model, val_data, loss_cfg, cfg.batch_size) if val_data is not None else None
        monitored = val_loss if val_loss is not None else train_loss
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step(monitored)
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr,
                  "wall_time": time.monotonic() - t0}
        history.append(record)
        if verbose:
            val_txt = "-" if val_loss is None else f"{val_loss:.4f}"
            print(f"epoch {epoch:4d}  train {train_loss:.4f}  val {val_txt}  lr {lr:.2e}")
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            if monitored < best:
                save_checkpoint(best_path, model, epoch=epoch, val_loss=monitored, train_config=asdict(cfg))
            save_checkpoint(out / "last.pt", model, optimizer, epoch=epoch, steps=steps,
                            best_val=min(best, monitored), scheduler=scheduler.state_dict(),
                            train_config=asdict(cfg))
        best = min(best, monitored)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return TrainResult(model, history, best, best_path if best_path is not None and best_path.exists() else None,
                       steps)


def finetune(checkpoint: str | Path, train_data, val_data=None, overrides: dict | None = None,
             out_dir=None, loss_cfg: LossConfig | None = None, verbose: bool = False) -> TrainResult:
    """Continue training a checkpoint with a few hyper-parameters overridden.

    Allowed overrides: ``epochs`` (additional epochs), ``lr``, ``r_spk``
    (re-labels both splits) and ``fraction`` (share of the training set kept).
    Without overrides the run continues the stored schedule.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - FINETUNE_KEYS
    if unknown:
        raise ValueError(f"finetune cannot override {sorted(unknown)}; allowed: {sorted(FINETUNE_KEYS)}")
    if "r_spk" in overrides and not overrides["r_spk"] > 0:
        raise ValueError(f"r_spk must be positive, got {overrides['r_spk']}")
    model, payload = load_checkpoint(checkpoint)
    meta = payload.get("meta", {})
    cfg = TrainConfig.from_dict(meta.get("train_config", {}))
    done = meta.get("epoch", -1) + 1
    extra = overrides.get("epochs", max(cfg.epochs - done, 0))
    cfg = replace(cfg, epochs=done + extra, lr=overrides.get("lr", cfg.lr),
                  r_spk=overrides.get("r_spk", cfg.r_spk))
    if "r_spk" in overrides:
        train_data = with_r_spk(train_data, cfg.r_spk)
        val_data = with_r_spk(val_data, cfg.r_spk) if val_data is not None else None
    if "fraction" in overrides:
        train_data = subset(train_data, overrides["fraction"], cfg.seed)
    opt_state = payload.get("optimizer")
    if opt_state is not None and "lr" not in overrides:
        cfg = replace(cfg, lr=opt_state["param_groups"][0]["lr"])
    return train(model, cfg, train_data, val_data, out_dir, loss_cfg, optimizer_state=opt_state,
                 start_epoch=done, verbose=verbose)


def build_model(cfg: ModelConfig | dict | None = None, seed: int = 0, dtype=torch.float32) -> DistanceTSE:
    torch.manual_seed(seed)
    if isinstance(cfg, dict):
        cfg = ModelConfig.from_dict(cfg)
    return DistanceTSE(cfg).to(dtype)
