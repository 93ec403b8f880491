"""Conditional 3D U-Net noise predictor with windowed self-attention.

The network runs at a fixed number of stages; stage i halves each
spatial extent i-1 times. Dense condition grids are channel-concatenated
and mixed back to the stage width on both the encoder and decoder paths,
so the conditioning signal reaches every resolution twice. Self-attention
runs only at the deepest stage as a pair of window blocks, the second
with cyclically shifted windows.
"""

from __future__ import annotations

import math
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from .implicit import ConditionSet
from .triplane import VIEW_EMBED_FRONT, VIEW_EMBED_SIDE


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (1-indexed) diffusion timesteps.

    t is a (B,) tensor; returns (B, dim) with dim even. Distinct steps up
    to the usual schedule lengths map to distinct embeddings.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    device = t.device
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=device) / half
    )
    args = t.to(torch.float64).unsqueeze(1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb.to(t.device, torch.get_default_dtype() if not t.is_floating_point() else t.dtype)


def _norm3d(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class ResBlock3d(nn.Module):
    """Residual conv block with a per-channel timestep bias injection."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float = 0.2):
        super().__init__()
        self.norm1 = _norm3d(in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm3d(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb).reshape(*emb.shape[:1], -1, 1, 1, 1)
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.skip(x) + h


@lru_cache(maxsize=32)
def _shift_mask(dims: tuple, window: tuple, shift: tuple) -> torch.Tensor:
    """Additive attention mask for cyclically shifted windows.

    Positions wrapped across the volume boundary land in the same window
    as positions they should not attend to; the mask puts -inf on those
    pairs so they get exactly zero weight after softmax.
    """
    d, h, w = dims
    region = torch.zeros(d, h, w, dtype=torch.int64)
    label = 0
    segs = []
    for n, win, sh in zip(dims, window, shift):
        segs.append([slice(0, n - win), slice(n - win, n - sh), slice(n - sh, n)])
    for sd in segs[0]:
        for sh_ in segs[1]:
            for sw in segs[2]:
                region[sd, sh_, sw] = label
                label += 1
    windows = _partition(region.unsqueeze(0).unsqueeze(-1).to(torch.float64), window)
    windows = windows.squeeze(-1)  # (nW, win_volume)
    mask = windows.unsqueeze(1) - windows.unsqueeze(2)
    return torch.where(mask == 0, 0.0, float("-inf"))


def _partition(x: torch.Tensor, window: tuple) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * nW, window volume, C)."""
    b, d, h, w, c = x.shape
    wd, wh, ww = window
    x = x.view(b, d // wd, wd, h // wh, wh, w // ww, ww, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, wd * wh * ww, c)


def _merge(windows: torch.Tensor, window: tuple, dims: tuple, batch: int) -> torch.Tensor:
    d, h, w = dims
    wd, wh, ww = window
    c = windows.shape[-1]
    x = windows.view(batch, d // wd, h // wh, w // ww, wd, wh, ww, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(batch, d, h, w, c)


class WindowAttention3d(nn.Module):
    """Multi-head self-attention inside non-overlapping 3D windows.

    With a nonzero shift the windows are cyclically rolled first and the
    wrap-around pairs are masked out, which restores cross-window
    information flow when two blocks alternate shifts.
    """

    def __init__(self, dim: int, window: tuple, num_heads: int, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.window = tuple(window)
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, shift: tuple = (0, 0, 0), return_attn: bool = False):
        """x is channels-last (B, D, H, W, C)."""
        b, d, h, w, c = x.shape
        for n, win in zip((d, h, w), self.window):
            if n % win != 0:
                raise ValueError(
                    f"extent {n} not divisible by window {win} in {(d, h, w)} / {self.window}"
                )
        shifted = any(s != 0 for s in shift)
        if shifted:
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
        wins = _partition(x, self.window)  # (b * nW, L, C)
        L = wins.shape[1]
        qkv = self.qkv(wins).reshape(-1, L, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if shifted:
            mask = _shift_mask((d, h, w), self.window, tuple(shift))
            mask = mask.to(device=x.device, dtype=attn.dtype)
            n_windows = mask.shape[0]
            attn = attn.view(b, n_windows, self.num_heads, L, L) + mask.unsqueeze(1)
            attn = attn.view(-1, self.num_heads, L, L)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, L, c)
        out = self.proj(out)
        out = _merge(out, self.window, (d, h, w), b)
        if shifted:
            out = torch.roll(out, shifts=tuple(shift), dims=(1, 2, 3))
        if return_attn:
            return out, attn
        return out


class SwinBlock3d(nn.Module):
    """Pre-norm window attention block with an MLP tail."""

    def __init__(self, dim: int, window: tuple, num_heads: int, shift: tuple):
        super().__init__()
        self.shift = tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x is (B, C, D, H, W); attention runs channels-last internally."""
        x = x.permute(0, 2, 3, 4, 1)
        x = x + self.attn(self.norm1(x), shift=self.shift)
        x = x + self.mlp(self.norm2(x))
        return x.permute(0, 4, 1, 2, 3)


class DenoiserUNet3d(nn.Module):
    """Noise predictor conditioned on dense multi-scale grids.

    Args:
        base_channels: width of stage 1; stage i uses
            base_channels * channel_multipliers[i-1].
        cond_channels: channel count of each condition grid.
        n_stages: resolution levels (input extents must be divisible by
            2**(n_stages - 1)).
        window: attention window at the deepest stage; must divide the
            deepest feature extents.
        time_embed_dim: width of the timestep/view embedding.
    """

    def __init__(
        self,
        base_channels: int = 8,
        channel_multipliers: tuple = (1, 2, 4),
        cond_channels: int = 8,
        n_stages: int = 3,
        *,
        window: tuple = (4, 4, 4),
        num_heads: int = 4,
        time_embed_dim: int = 32,
        dropout: float = 0.2,
    ):
        super().__init__()
        if len(channel_multipliers) != n_stages:
            raise ValueError("need one channel multiplier per stage")
        self.n_stages = n_stages
        self.cond_channels = cond_channels
        self.window = tuple(window)
        chans = [base_channels * m for m in channel_multipliers]
        self.chans = chans
        te = time_embed_dim
        self.time_embed_dim = te
        self.time_mlp = nn.Sequential(nn.Linear(te, te), nn.SiLU(), nn.Linear(te, te))
        self.view_mlp = nn.Sequential(nn.Linear(6, te), nn.SiLU(), nn.Linear(te, te))

        self.in_conv = nn.Conv3d(1, chans[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.enc_mix = nn.ModuleList()
        self.down = nn.ModuleList()
        for i in range(n_stages):
            self.enc.append(ResBlock3d(chans[i], chans[i], te, dropout))
            self.enc_mix.append(nn.Conv3d(chans[i] + cond_channels, chans[i], 1))
            if i + 1 < n_stages:
                self.down.append(nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1))

        self.mid_attn1 = SwinBlock3d(chans[-1], self.window, num_heads, (0, 0, 0))
        self.mid_attn2 = SwinBlock3d(
            chans[-1], self.window, num_heads, tuple(s // 2 for s in self.window)
        )
        self.mid_res = ResBlock3d(chans[-1], chans[-1], te, dropout)

        self.dec = nn.ModuleList()
        self.dec_mix = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(n_stages)):
            in_ch = chans[i] * 2  # skip concat
            self.dec.append(ResBlock3d(in_ch, chans[i], te, dropout))
            self.dec_mix.append(nn.Conv3d(chans[i] + cond_channels, chans[i], 1))
            if i > 0:
                self.up.append(nn.Conv3d(chans[i], chans[i - 1], 3, padding=1))

        self.out_norm = _norm3d(chans[0])
        self.out_conv = nn.Conv3d(chans[0], 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def feature_shapes(self, input_shape: tuple) -> list:
        """Per-stage (D, H, W) grids for a given input volume shape."""
        d, h, w = input_shape
        div = 2 ** (self.n_stages - 1)
        for n in (d, h, w):
            if n % div != 0:
                raise ValueError(f"extent {n} not divisible by {div}")
        shapes = [(d >> i, h >> i, w >> i) for i in range(self.n_stages)]
        deepest = shapes[-1]
        for n, win in zip(deepest, self.window):
            if n % win != 0:
                raise ValueError(
                    f"deepest stage {deepest} not divisible by window {self.window}"
                )
        return shapes

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(
        self,
        y_t: torch.Tensor,
        t,
        cond: ConditionSet,
        s1=None,
        s2=None,
    ) -> torch.Tensor:
        """Predict the noise component of y_t.

        y_t is (B, 1, D, H, W); t is an int or a (B,) tensor of 1-indexed
        steps; cond holds one (B, cond_channels, ...) grid per stage.
        """
        b = y_t.shape[0]
        shapes = self.feature_shapes(tuple(y_t.shape[2:]))
        if len(cond) != self.n_stages:
            raise ValueError(f"expected {self.n_stages} condition grids, got {len(cond)}")
        for i, (grid, shape) in enumerate(zip(cond.h, shapes)):
            if tuple(grid.shape[2:]) != shape:
                raise ValueError(
                    f"condition grid {i} has shape {tuple(grid.shape[2:])}, expected {shape}"
                )

        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.int64, device=y_t.device)
        if (t < 1).any():
            raise ValueError("timesteps are 1-indexed; got a value below 1")
        s1 = torch.as_tensor(
            s1 if s1 is not None else VIEW_EMBED_FRONT, dtype=y_t.dtype, device=y_t.device
        )
        s2 = torch.as_tensor(
            s2 if s2 is not None else VIEW_EMBED_SIDE, dtype=y_t.dtype, device=y_t.device
        )
        view_vec = torch.cat([s1, s2]).unsqueeze(0).expand(b, -1)
        emb = self.time_mlp(timestep_embedding(t, self.time_embed_dim).to(y_t.dtype))
        emb = emb + self.view_mlp(view_vec)

        x = self.in_conv(y_t)
        skips = []
        for i in range(self.n_stages):
            x = self.enc[i](x, emb)
            x = self.enc_mix[i](torch.cat([x, cond.h[i]], dim=1))
            skips.append(x)
            if i + 1 < self.n_stages:
                x = self.down[i](x)

        x = self.mid_attn1(x)
        x = self.mid_attn2(x)
        x = self.mid_res(x, emb)

        for j, i in enumerate(reversed(range(self.n_stages))):
            x = self.dec[j](torch.cat([x, skips[i]], dim=1), emb)
            x = self.dec_mix[j](torch.cat([x, cond.h[i]], dim=1))
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = self.up[j](x)

        return self.out_conv(F.silu(self.out_norm(x)))
