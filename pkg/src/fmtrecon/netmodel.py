"""Noise-estimation U-Net and its optimizer.

The network sees the condition views and the noisy slices stacked as 2D
channels and predicts the noise on the slice channels only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NetConfig:
    in_channels: int
    out_channels: int
    base_width: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    time_embed_dim: int = 64
    norm_groups: int = 8
    channel_mult: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.channel_mult is None:
            self.channel_mult = (1,) + (2,) * (self.levels - 1)
        self.channel_mult = tuple(self.channel_mult)
        if len(self.channel_mult) != self.levels:
            raise ValueError("channel_mult needs one entry per level")
        if self.base_width % self.norm_groups:
            raise ValueError("base_width must be divisible by norm_groups")
        if self.out_channels > self.in_channels:
            raise ValueError("out_channels cannot exceed in_channels")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mult]

    def check_resolution(self, n: int) -> None:
        if n % 2 ** (self.levels - 1):
            raise ValueError(f"resolution {n} is not divisible by 2^{self.levels - 1}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def time_embedding(t, dim: int) -> torch.Tensor:
    """Interleaved sinusoidal embedding: ``e[2k] = sin(t w_k)``, ``e[2k+1] = cos(t w_k)``."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1)
    freqs = 10000.0 ** (-2.0 * torch.arange(dim // 2, dtype=torch.float64) / dim)
    angles = t * freqs
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(len(t), dim)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class UNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        widths, temb, groups = cfg.widths, cfg.time_embed_dim, cfg.norm_groups
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for lvl, w in enumerate(widths):
            self.down.append(nn.ModuleList(
                ResBlock(prev if i == 0 else w, w, temb, groups) for i in range(cfg.blocks_per_level)))
            prev = w
            if lvl < cfg.levels - 1:
                self.downsample.append(nn.Conv2d(w, widths[lvl + 1], 3, stride=2, padding=1))
                prev = widths[lvl + 1]
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl, w in enumerate(widths):
            self.up.append(nn.ModuleList(
                ResBlock(2 * w if i == 0 else w, w, temb, groups) for i in range(cfg.blocks_per_level)))
            if lvl < cfg.levels - 1:
                self.upsample.append(nn.Conv2d(widths[lvl + 1], w, 3, padding=1))
        self.norm_out = nn.GroupNorm(groups, widths[0])
        self.conv_out = nn.Conv2d(widths[0], cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        emb = self.time_mlp(time_embedding(t, self.cfg.time_embed_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for lvl, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if lvl < self.cfg.levels - 1:
                h = self.downsample[lvl](h)
        for lvl in reversed(range(self.cfg.levels)):
            if lvl < self.cfg.levels - 1:
                h = self.upsample[lvl](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips[lvl]], dim=1)
            for block in self.up[lvl]:
                h = block(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))


def init_params(cfg: NetConfig, seed: int = 0, dtype=torch.float32) -> UNet:
    """Build the network with a seeded fan-in uniform initialization.

    Normalization layers start at scale 1 and offset 0, biases at 0, and the
    output convolution at exactly 0 so the untrained network predicts no noise.
    """
    net = UNet(cfg).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = math.sqrt(3.0 / fan_in)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen, dtype=dtype) * 2 * bound - bound)
                module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        net.conv_out.weight.zero_()
        net.conv_out.bias.zero_()
    return net


def eps_predict(net: UNet, stacked, t) -> torch.Tensor:
    """Predicted noise for the slice channels of ``stacked`` (batch, num+b, n, n)."""
    x = torch.as_tensor(stacked)
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    if x.shape[1] != net.cfg.in_channels:
        raise ValueError(f"expected {net.cfg.in_channels} channels, got {x.shape[1]}")
    if x.shape[-1] != x.shape[-2]:
        raise ValueError("slices must be square")
    net.cfg.check_resolution(x.shape[-1])
    t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
    out = net(x.to(next(net.parameters()).dtype), t)
    return out[0] if squeeze else out


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def mse_loss(net: UNet, stacked: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Mean over batch and elements of ``(eps - eps_theta(X_t, t))**2``."""
    return torch.mean((eps - eps_predict(net, stacked, t)) ** 2)


def loss_and_grad(net: UNet, stacked: torch.Tensor, t, eps: torch.Tensor) -> tuple[float, dict]:
    """Loss value and the gradient of every named parameter."""
    params = dict(net.named_parameters())
    loss = mse_loss(net, stacked, t, eps)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, list(params.values()))
    out = {}
    for (name, _), g in zip(params.items(), grads):
        if not torch.all(torch.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        out[name] = g
    return float(loss.item()), out


@dataclass
class OptState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, net: nn.Module, **hyper) -> "OptState":
        state = cls(**hyper)
        for name, p in net.named_parameters():
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        return state

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


@torch.no_grad()
def optimizer_update(net: nn.Module, grads: dict, state: OptState) -> None:
    """One bias-corrected adaptive-moment step, applied in place."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in net.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match {name} {tuple(p.shape)}")
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.lr == 0:
            continue
        denom = (v / c2).sqrt_().add_(state.eps)
        p.sub_(state.lr * (m / c1) / denom)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()
