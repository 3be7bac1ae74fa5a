"""Distance/room-conditioned TF-domain target speech extraction network.

Pipeline: STFT -> conv encoder -> Query blocks -> Basic blocks -> mask
decoder -> iSTFT. Tensors inside the network are laid out (B, D, T, F).
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import Waveform
from .dataset import CLUE_SETS, QueryClue, clue_uses

FORMAT_VERSION = "1.0"

# fixed affine maps used when ``standardize_clues`` is on: (offset, scale)
_CLUE_NORM = {"d_q": (2.5, 1.5), "dis_mw": (2.5, 1.5), "rt60": (0.35, 0.1)}


@dataclass
class ModelConfig:
    embed_dim: int = 64
    n_query_blocks: int = 4
    n_basic_blocks: int = 4
    rnn_hidden: int = 64
    qeg_hidden: tuple[int, ...] = (96, 64, 64)
    clue_embed_dim: int = 32
    clue_set: str = "Dis+Dim+Rt"
    fft_size: int = 512
    win_length: int = 512
    hop_length: int = 256
    interleave: bool = False
    standardize_clues: bool = False

    def __post_init__(self):
        self.qeg_hidden = tuple(int(h) for h in self.qeg_hidden)
        if self.embed_dim <= 0 or self.rnn_hidden <= 0 or self.clue_embed_dim <= 0:
            raise ValueError("embedding and hidden sizes must be positive")
        if self.qeg_hidden[-1] != self.embed_dim:
            raise ValueError(f"last QEG layer ({self.qeg_hidden[-1]}) must equal embed_dim ({self.embed_dim})")
        if self.clue_set not in CLUE_SETS:
            raise ValueError(f"unknown clue set {self.clue_set!r}")
        if not 0 < self.hop_length <= self.win_length <= self.fft_size:
            raise ValueError("need 0 < hop_length <= win_length <= fft_size")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Encoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(2, dim, kernel_size=3, padding=1)
        # GroupNorm with one group normalises over (D, T, F): global layer norm
        self.norm = nn.GroupNorm(1, dim, eps=1e-8)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.norm(self.conv(spec)))


class QueryEmbedding(nn.Module):
    """Maps (d_q, six mic-wall distances, RT60) to a D-dim vector in (-1, 1)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        e = cfg.clue_embed_dim
        self.dis = nn.Linear(1, e)
        self.dim = nn.Linear(1, e)
        self.rt = nn.Linear(1, e)
        layers, width = [], 3 * e
        for h in cfg.qeg_hidden:
            layers += [nn.Linear(width, h), nn.Tanh()]
            width = h
        self.mlp = nn.Sequential(*layers)
        self.uses_dim, self.uses_rt = clue_uses(cfg.clue_set)

    def forward(self, clue: torch.Tensor) -> torch.Tensor:
        """``clue`` is (B, 8): [d_q, dis_1..dis_6, rt60]."""
        e_dis = self.dis(clue[:, :1])
        # shared layer summed over the walls; sorting makes the float sum order-free
        walls = torch.sort(clue[:, 1:7], dim=1).values.unsqueeze(-1)
        e_dim = self.dim(walls).sum(dim=1)
        e_rt = self.rt(clue[:, 7:8])
        if not self.uses_dim:
            e_dim = torch.zeros_like(e_dim)
        if not self.uses_rt:
            e_rt = torch.zeros_like(e_rt)
        return self.mlp(torch.cat([e_dis, e_dim, e_rt], dim=-1))


class AxisFuse(nn.Module):
    """BLSTM along one axis of the TF grid, optionally with a query step.

    ``axis="time"`` runs along frames inside each subband (intra-subband);
    ``axis="freq"`` runs along subbands inside each frame (intra-frame).
    A query vector is appended as one extra step and cropped after the RNN.
    """

    def __init__(self, dim: int, hidden: int, axis: str):
        super().__init__()
        if axis not in ("time", "freq"):
            raise ValueError(axis)
        self.axis = axis
        self.norm = nn.LayerNorm(dim)
        self.rnn = nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, dim)
        self.act = nn.GELU()

    def forward(self, h: torch.Tensor, query: torch.Tensor | None = None) -> torch.Tensor:
        B, D, T, F = h.shape
        if self.axis == "time":
            x = h.permute(0, 3, 2, 1).reshape(B * F, T, D)
            groups = F
        else:
            x = h.permute(0, 2, 3, 1).reshape(B * T, F, D)
            groups = T
        steps = x.shape[1]
        if query is not None:
            q = query[:, None, None, :].expand(B, groups, 1, D).reshape(B * groups, 1, D)
            x = torch.cat([x, q], dim=1)
        y, _ = self.rnn(self.norm(x))
        y = self.act(self.proj(y[:, :steps]))
        if self.axis == "time":
            y = y.reshape(B, F, T, D).permute(0, 3, 2, 1)
        else:
            y = y.reshape(B, T, F, D).permute(0, 3, 1, 2)
        return h + y


class QueryBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.qeg_subband = QueryEmbedding(cfg)
        self.qeg_frame = QueryEmbedding(cfg)
        self.subband = AxisFuse(cfg.embed_dim, cfg.rnn_hidden, "time")
        self.frame = AxisFuse(cfg.embed_dim, cfg.rnn_hidden, "freq")

    def forward(self, h: torch.Tensor, clue: torch.Tensor) -> torch.Tensor:
        h = self.subband(h, self.qeg_subband(clue))
        return self.frame(h, self.qeg_frame(clue))


class BasicBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.subband = AxisFuse(cfg.embed_dim, cfg.rnn_hidden, "time")
        self.frame = AxisFuse(cfg.embed_dim, cfg.rnn_hidden, "freq")

    def forward(self, h: torch.Tensor, clue: torch.Tensor | None = None) -> torch.Tensor:
        return self.frame(self.subband(h))


class MaskDecoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mask_conv = nn.Conv2d(dim, dim, kernel_size=3, padding=1)
        self.out_conv = nn.Conv2d(dim, 2, kernel_size=3, padding=1)

    def forward(self, h_last: torch.Tensor, h_y: torch.Tensor) -> torch.Tensor:
        mask = torch.relu(self.mask_conv(h_last))
        return self.out_conv(mask * h_y)


class DistanceTSE(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.encoder = Encoder(cfg.embed_dim)
        query = [QueryBlock(cfg) for _ in range(cfg.n_query_blocks)]
        basic = [BasicBlock(cfg) for _ in range(cfg.n_basic_blocks)]
        if cfg.interleave:
            order = []
            for i in range(max(len(query), len(basic))):
                order += query[i : i + 1] + basic[i : i + 1]
        else:
            order = query + basic
        self.blocks = nn.ModuleList(order)
        self.decoder = MaskDecoder(cfg.embed_dim)
        self.register_buffer("window", torch.hann_window(cfg.win_length), persistent=False)

    def clue_tensor(self, clues, dtype=None, device=None) -> torch.Tensor:
        """Stack ``QueryClue`` objects (or 8-vectors) into a (B, 8) tensor."""
        rows = [c.as_array() if isinstance(c, QueryClue) else np.asarray(c, dtype=float) for c in clues]
        t = torch.as_tensor(np.stack(rows), dtype=dtype or self.window.dtype, device=device)
        if self.cfg.standardize_clues:
            t = t.clone()
            for sl, key in ((slice(0, 1), "d_q"), (slice(1, 7), "dis_mw"), (slice(7, 8), "rt60")):
                off, scale = _CLUE_NORM[key]
                t[:, sl] = (t[:, sl] - off) / scale
        return t

    def stft(self, wav: torch.Tensor) -> torch.Tensor:
        spec = torch.stft(wav, self.cfg.fft_size, self.cfg.hop_length, self.cfg.win_length,
                          window=self.window.to(wav.dtype), center=True, pad_mode="reflect",
                          return_complex=True)
        spec = spec.transpose(1, 2)  # (B, T, F)
        return torch.stack([spec.real, spec.imag], dim=1)

    def istft(self, spec: torch.Tensor, length: int) -> torch.Tensor:
        z = torch.complex(spec[:, 0], spec[:, 1]).transpose(1, 2)
        return torch.istft(z, self.cfg.fft_size, self.cfg.hop_length, self.cfg.win_length,
                           window=self.window.to(spec.dtype), center=True, length=length)

    def embed(self, spec: torch.Tensor, clue: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if spec.shape[-1] != self.cfg.freq_bins:
            raise ValueError(f"expected {self.cfg.freq_bins} frequency bins, got {spec.shape[-1]}")
        h_y = self.encoder(spec)
        h = h_y
        for block in self.blocks:
            h = block(h, clue)
        return h, h_y

    def separate_spec(self, spec: torch.Tensor, clue: torch.Tensor) -> torch.Tensor:
        """(B, 2, T, F) mixture spectrogram -> (B, 2, T, F) estimate."""
        h, h_y = self.embed(spec, clue)
        return self.decoder(h, h_y)

    def forward(self, mixture: torch.Tensor, clue: torch.Tensor) -> torch.Tensor:
        """(B, L) mixture and (B, 8) clue tensor -> (B, L) estimate."""
        if clue.shape[-1] != 8:
            raise ValueError(f"clue tensor must have 8 columns, got {tuple(clue.shape)}")
        if not torch.isfinite(clue).all():
            raise ValueError("clue contains NaN or Inf")
        length = mixture.shape[-1]
        return self.istft(self.separate_spec(self.stft(mixture), clue), length)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def zero_block_projections(model: nn.Module) -> None:
    """Zero every residual-branch projection, turning each block into the identity."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, AxisFuse):
                m.proj.weight.zero_()
                m.proj.bias.zero_()


@torch.no_grad()
def extract(model: DistanceTSE, mixture: Waveform, clue: QueryClue) -> Waveform:
    """Run the model on one waveform in inference mode."""
    uses_dim, uses_rt = clue_uses(model.cfg.clue_set)
    if uses_dim and clue.dis_mw is None:
        raise ValueError("this model's clue set needs dis_mw")
    if uses_rt and clue.rt60 is None:
        raise ValueError("this model's clue set needs rt60")
    clue = clue.with_clue_set(model.cfg.clue_set)
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(mixture.samples, dtype=dtype)[None]
    y = model(x, model.clue_tensor([clue], dtype=dtype))
    if not torch.isfinite(y).all():
        raise FloatingPointError("model produced non-finite samples")
    return Waveform(y[0].double().numpy(), mixture.rate)


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: DistanceTSE, optimizer=None, **meta) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.cfg),
        "parameters": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": meta,
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None):
    """Returns (model, payload). Raises on an incompatible schema or config."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = str(payload.get("format_version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise ValueError(f"{path}: unsupported checkpoint format {version!r}")
    cfg = ModelConfig.from_dict(payload["config"])
    if expected is not None and asdict(expected) != asdict(cfg):
        raise ValueError(f"{path}: checkpoint config does not match the requested model config")
    model = DistanceTSE(cfg)
    params = payload["parameters"]
    first = next(iter(params.values()))
    model.to(first.dtype)
    model.load_state_dict(params)
    return model, payload
