"""Two-stage generator.

Stage one is a four-level ladder. Noise runs down the major path through
upsampling conv blocks; a condition path produces per-level disease maps
``c_i``; every level ends in a :class:`MixupNorm` that blends a noise style
and a location-dependent disease style under a spatial attention. Level
outputs are projected to a common channel count, upsampled to full length and
summed into the stereo representation ``S`` (C x L).

Stage two decodes ``S`` once per viewpoint with one set of shared weights,
so views differ only through the viewpoint code.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class GeneratorConfig:
    z_dim: int = 128
    k: int = 3
    style_dim: int = 128  # d'
    cond_style_dim: int = 32  # k'
    hidden_dim: int = 64  # d_h
    base_channels: int = 256
    base_length: int = 32
    channels: tuple[int, ...] = (256, 128, 64, 32)  # d_i
    cond_channels: tuple[int, ...] = (32, 32, 16, 16)  # k_i
    cond_base_channels: int = 32
    stereo_channels: int = 32  # C
    decoder_kernel: int = 3
    norm_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.cond_channels = tuple(self.cond_channels)
        if len(self.channels) != len(self.cond_channels):
            raise ValueError("channels and cond_channels must have one entry per level")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(self.base_length * 2 ** (i + 1) for i in range(self.levels))

    @property
    def length(self) -> int:
        return self.lengths[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def upsample_linear(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Linear upsampling along the last axis with sample ``i`` taken at source
    position ``i / factor``, clamped to the last input sample.

    ``[0, 1, 2]`` becomes ``[0, .5, 1, 1.5, 2, 2]`` for ``factor=2``.
    """
    if factor == 1:
        return x
    nxt = torch.cat([x[..., 1:], x[..., -1:]], dim=-1)
    phases = [x if r == 0 else x + (nxt - x) * (r / factor) for r in range(factor)]
    return torch.stack(phases, dim=-1).flatten(-2)


class ConvBlock(nn.Module):
    """Upsample x2, conv (k3), batch norm, ReLU."""

    def __init__(self, c_in: int, c_out: int, momentum: float = 0.1):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.bn = nn.BatchNorm1d(c_out, momentum=momentum)

    def forward(self, x):
        return F.relu(self.bn(self.conv(upsample_linear(x, 2))))


def mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            layers.append(nn.ReLU())
        layers.append(nn.Linear(a, b))
    return nn.Sequential(*layers)


class MixupNorm(nn.Module):
    def __init__(self, channels: int, cond_channels: int, length: int, style_dim: int,
                 cond_style_dim: int, hidden_dim: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        mid = (channels + cond_channels) // 2
        self.att_conv1 = nn.Conv1d(channels + cond_channels, mid, 3, padding=1)
        self.att_bn = nn.BatchNorm1d(mid, momentum=momentum)
        self.att_conv2 = nn.Conv1d(mid, 1, 3, padding=1)
        self.U = nn.Linear(style_dim, hidden_dim, bias=False)
        bound = 1.0
        self.V = nn.Parameter(torch.empty(1, length).uniform_(-bound, bound))
        self.b = nn.Parameter(torch.empty(1, length).uniform_(-bound, bound))
        self.W = nn.Linear(cond_style_dim, hidden_dim, bias=False)
        self.to_affine = nn.Linear(hidden_dim, 2)
        with torch.no_grad():
            self.to_affine.bias.copy_(torch.tensor([1.0, 0.0]))
        self.eps = eps

    def attention(self, z, c):
        h = F.relu(self.att_bn(self.att_conv1(torch.cat([z, c], dim=1))))
        return torch.sigmoid(self.att_conv2(h))  # (B, 1, l)

    def styles(self, z_style, c_style):
        z_star = self.U(z_style).unsqueeze(-1)  # (B, d_h, 1)
        lw = F.relu(c_style.unsqueeze(-1) * self.V + self.b)  # (B, k', l)
        c_star = self.W(lw.transpose(1, 2)).transpose(1, 2)  # (B, d_h, l)
        return z_star, c_star

    def normalize(self, z):
        mu = z.mean(dim=1, keepdim=True)
        sigma = z.std(dim=1, keepdim=True, unbiased=False)
        return (z - mu) / (sigma + self.eps)

    def forward(self, z, c, z_style, c_style, attention_override=None, return_parts=False):
        a = self.attention(z, c) if attention_override is None else attention_override
        z_star, c_star = self.styles(z_style, c_style)
        h = a * c_star + (1 - a) * z_star
        alpha, beta = self.to_affine(h.transpose(1, 2)).transpose(1, 2).chunk(2, dim=1)
        out = alpha * self.normalize(z) + beta
        if return_parts:
            return out, {"a": a, "z_star": z_star, "c_star": c_star, "h": h,
                         "alpha": alpha, "beta": beta}
        return out


class StereoGenerator(nn.Module):
    """Stage one: (z, c) -> S of shape (B, C, L)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.z_fc = nn.Linear(cfg.z_dim, cfg.base_channels * cfg.base_length)
        self.c_fc = nn.Linear(cfg.k, cfg.cond_base_channels * cfg.base_length)
        self.z_mlp = mlp([cfg.z_dim] + [cfg.style_dim] * 4)
        self.c_mlp = mlp([cfg.k] + [cfg.cond_style_dim] * 4)
        self.blocks = nn.ModuleList()
        self.cond_blocks = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.to_stereo = nn.ModuleList()
        c_in, k_in = cfg.base_channels, cfg.cond_base_channels
        for d_i, k_i, l_i in zip(cfg.channels, cfg.cond_channels, cfg.lengths):
            self.blocks.append(ConvBlock(c_in, d_i, cfg.bn_momentum))
            self.cond_blocks.append(ConvBlock(k_in, k_i, cfg.bn_momentum))
            self.norms.append(MixupNorm(d_i, k_i, l_i, cfg.style_dim, cfg.cond_style_dim,
                                        cfg.hidden_dim, cfg.norm_eps, cfg.bn_momentum))
            self.to_stereo.append(nn.Conv1d(d_i, cfg.stereo_channels, 1))
            c_in, k_in = d_i, k_i

    def forward(self, z, c, attention_override=None):
        cfg = self.cfg
        B = z.shape[0]
        x = self.z_fc(z).view(B, cfg.base_channels, cfg.base_length)
        cm = self.c_fc(c).view(B, cfg.cond_base_channels, cfg.base_length)
        z_style, c_style = self.z_mlp(z), self.c_mlp(c)
        S = None
        for i, (blk, cblk, norm, proj) in enumerate(
                zip(self.blocks, self.cond_blocks, self.norms, self.to_stereo)):
            x = blk(x)
            cm = cblk(cm)
            a = None if attention_override is None else attention_override[i]
            x = norm(x, cm, z_style, c_style, attention_override=a)
            up = upsample_linear(proj(x), cfg.length // x.shape[-1])
            S = up if S is None else S + up
        return S


class ProjectionDecoder(nn.Module):
    """Stage two: FiLM on the viewpoint code, two shared conv blocks, sigmoid head."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        C, k = cfg.stereo_channels, cfg.decoder_kernel
        self.embed = nn.Linear(2, 2 * C)
        self.conv1 = nn.Conv1d(C, C, k, padding=k // 2)
        self.conv2 = nn.Conv1d(C, C, k, padding=k // 2)
        self.head = nn.Conv1d(C, 1, k, padding=k // 2)
        nn.init.zeros_(self.head.bias)

    def forward(self, S, theta):
        """S: (B, C, L); theta: (n, 2) or (B, n, 2). Returns (B, n, L)."""
        B, C, L = S.shape
        if theta.dim() == 2:
            theta = theta.unsqueeze(0).expand(B, -1, -1)
        n = theta.shape[1]
        gamma, shift = self.embed(theta).chunk(2, dim=-1)  # (B, n, C)
        x = S.unsqueeze(1) * (1 + gamma.unsqueeze(-1)) + shift.unsqueeze(-1)
        x = x.reshape(B * n, C, L)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return torch.sigmoid(self.head(x)).view(B, n, L)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        self.stage1 = StereoGenerator(self.cfg)
        self.decoder = ProjectionDecoder(self.cfg)

    def forward(self, z, c, theta):
        return self.decoder(self.stage1(z, c), theta)

    def sample_noise(self, count: int, generator: torch.Generator | None = None, dtype=None):
        return torch.randn(count, self.cfg.z_dim, generator=generator,
                           dtype=dtype or next(self.parameters()).dtype)


def stage1_forward(z, c, model: Generator | StereoGenerator):
    stage1 = model.stage1 if isinstance(model, Generator) else model
    return stage1(z, c)


def project_views(S, theta, model: Generator | ProjectionDecoder):
    dec = model.decoder if isinstance(model, Generator) else model
    return dec(S, theta)


@torch.no_grad()
def generate(model: Generator, z, c, theta, batch_size: int = 64) -> torch.Tensor:
    """Eval-mode synthesis; (B, n, L). Batching does not change results."""
    was_training = model.training
    model.eval()
    try:
        outs = [model(z[i:i + batch_size], c[i:i + batch_size], theta)
                for i in range(0, z.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(outs)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
