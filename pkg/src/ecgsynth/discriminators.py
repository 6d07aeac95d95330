"""Major discriminator (realness + disease logits) and the view discriminator
with its input machinery: view shuffling, positional encoding and cropping."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class DiscriminatorConfig:
    n_views: int = 12
    length: int = 512
    k: int = 3
    channels: tuple[int, ...] = (64, 128, 256)
    slope: float = 0.2
    crop_length: int = 128
    pe_channels: int = 8
    view_channels: tuple[int, ...] = (32, 64, 64)
    view_embed: int = 64
    view_hidden: int = 256

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.view_channels = tuple(self.view_channels)
        if len(self.channels) != 3:
            raise ValueError("the major discriminator has exactly three conv blocks")
        if self.pe_channels % 2:
            raise ValueError("pe_channels must be even (sin/cos pairs)")

    def to_dict(self) -> dict:
        return asdict(self)


def down_block(c_in: int, c_out: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv1d(c_in, c_out, 4, stride=2, padding=1),
        nn.InstanceNorm1d(c_out),
        nn.LeakyReLU(slope),
    )


class MajorDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig | None = None, aux_classifier: bool = True):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        blocks, c_in = [], cfg.n_views
        for c_out in cfg.channels:
            blocks.append(down_block(c_in, c_out, cfg.slope))
            c_in = c_out
        self.trunk = nn.Sequential(*blocks)
        flat = cfg.channels[-1] * (cfg.length // 2 ** len(cfg.channels))
        self.realness = nn.Linear(flat, 1)
        self.classifier = nn.Linear(flat, cfg.k) if aux_classifier and cfg.k > 0 else None

    def forward(self, x):
        """x: (B, n, L) -> realness (B,), disease logits (B, k) or None."""
        h = self.trunk(x).flatten(1)
        logits = self.classifier(h) if self.classifier is not None else None
        return self.realness(h).squeeze(1), logits


# --------------------------------------------------------------------------
# view machinery


def random_permutation_matrix(n: int, generator: torch.Generator | None = None,
                              dtype=torch.float32) -> torch.Tensor:
    perm = torch.randperm(n, generator=generator)
    P = torch.zeros(n, n, dtype=dtype)
    P[perm, torch.arange(n)] = 1
    return P


def check_permutation(P: torch.Tensor) -> None:
    if P.dim() != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("P must be square")
    binary = (P == 0) | (P == 1)
    if not bool(binary.all()) or not bool((P.sum(0) == 1).all()) or not bool((P.sum(1) == 1).all()):
        raise ValueError("P is not a permutation matrix")


def permutation_index(P: torch.Tensor) -> torch.Tensor:
    """Index ``idx`` with ``(X^T P)^T == X[idx]``."""
    check_permutation(P)
    return P.argmax(dim=0)


def shuffle_views(X: torch.Tensor, theta: torch.Tensor, P: torch.Tensor):
    """``X' = (X^T P)^T`` and ``Theta' = (Theta^T P)^T``, applied on the view
    axis (second to last of X). Implemented as a row gather, which is exact."""
    idx = permutation_index(P)
    return X.index_select(-2, idx.to(X.device)), theta.index_select(-2, idx.to(theta.device))


def crop_window(X: torch.Tensor, offset: int, length: int) -> torch.Tensor:
    L = X.shape[-1]
    if offset < 0 or length < 1 or offset + length >= L:
        raise ValueError(f"crop [{offset}, {offset + length}) invalid for length {L}")
    return X[..., offset:offset + length]


def sample_offset(L: int, length: int, generator: torch.Generator | None = None) -> int:
    """Uniform over the offsets with ``offset + length < L``."""
    return int(torch.randint(0, L - length, (1,), generator=generator))


def positional_channels(L: int, channels: int = 8, dtype=torch.float32) -> torch.Tensor:
    """(channels, L) sinusoids; rows alternate sin/cos, angular frequencies are
    geometric from 1 down to 1e-4."""
    half = channels // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = 10000.0 ** (-torch.arange(half, dtype=torch.float64) / (half - 1))
    pos = torch.arange(L, dtype=torch.float64)
    ang = freqs[:, None] * pos[None, :]
    pe = torch.stack([torch.sin(ang), torch.cos(ang)], dim=1).reshape(channels, L)
    return pe.to(dtype)


def positional_encode(X: torch.Tensor, channels: int = 8) -> torch.Tensor:
    """(..., n, L) -> (..., n, 1 + channels, L); channel 0 is the signal."""
    pe = positional_channels(X.shape[-1], channels, X.dtype).to(X.device)
    pe = pe.expand(*X.shape[:-1], channels, X.shape[-1])
    return torch.cat([X.unsqueeze(-2), pe], dim=-2)


def view_input(X, theta, P, offset, length, pe_channels=8):
    """Shuffle, encode positions, crop. Returns (crops (B, n, 1+pe, l), theta')."""
    Xs, ts = shuffle_views(X, theta, P)
    return crop_window(positional_encode(Xs, pe_channels), offset, length), ts


class ViewDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        blocks, c_in = [], 1 + cfg.pe_channels
        for c_out in cfg.view_channels:
            blocks.append(down_block(c_in, c_out, cfg.slope))
            c_in = c_out
        self.per_view = nn.Sequential(*blocks)
        flat = cfg.view_channels[-1] * (cfg.crop_length // 2 ** len(cfg.view_channels))
        self.embed = nn.Linear(flat, cfg.view_embed)
        self.head = nn.Sequential(
            nn.Linear(cfg.n_views * cfg.view_embed, cfg.view_hidden),
            nn.LeakyReLU(cfg.slope),
            nn.Linear(cfg.view_hidden, 2 * cfg.n_views),
        )

    def forward(self, crops):
        """crops: (B, n, 1+pe, l) -> (B, 2n) in (-1, 1), row-major estimate of Theta'."""
        B, n, ch, l = crops.shape
        h = self.per_view(crops.reshape(B * n, ch, l)).flatten(1)
        h = F.leaky_relu(self.embed(h), self.cfg.slope).reshape(B, n * self.cfg.view_embed)
        return torch.tanh(self.head(h))


def major_forward(X, model: MajorDiscriminator):
    return model(X)


def view_forward(crops, model: ViewDiscriminator):
    return model(crops)
