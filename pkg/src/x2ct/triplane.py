"""Tri-plane feature generation from two orthogonal radiographs.

The front view (u-w plane) and side view (v-w plane) are lifted into
three axis-aligned feature planes (uv, uw, vw) at a pyramid of
resolutions. The two view branches share every weight; views exchange
information twice, once through pooled cross-view auxiliaries and once
through the modulated fusion that synthesizes the unobserved uv plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# Canonical one-hot-with-shared-flag view embeddings.
VIEW_EMBED_FRONT = (1.0, 0.0, 1.0)
VIEW_EMBED_SIDE = (0.0, 1.0, 1.0)

MODULATOR_DELTA = 1e-8

FUSION_MODES = ("modulated", "plain_sum", "resnet")


@dataclass
class ViewModulators:
    """Raw and normalized per-channel fusion weights for the two views."""

    gamma1: torch.Tensor
    gamma2: torch.Tensor
    gamma1_bar: torch.Tensor
    gamma2_bar: torch.Tensor


@dataclass
class TriPlaneFeatures:
    """One pyramid level of axis-aligned feature planes.

    uv is (B, C, H, W), uw is (B, C, H, D), vw is (B, C, W, D); level 1
    is full resolution and higher levels halve each extent.
    """

    uv: torch.Tensor
    uw: torch.Tensor
    vw: torch.Tensor
    level: int


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class ResBlock2d(nn.Module):
    """Pre-activation residual block; stride 2 halves the plane."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        if in_ch != out_ch or stride != 1:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class PlaneEncoder(nn.Module):
    """Three residual blocks with strides (1, 2, 2), shared by both views."""

    def __init__(self, channels: int, n_down: int = 2):
        super().__init__()
        strides = [1] + [2] * n_down
        self.blocks = nn.ModuleList(ResBlock2d(channels, channels, s) for s in strides)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class PlaneDecoder(nn.Module):
    """Emits a resolution pyramid from the deepest plane, shallow level last.

    One decoder instance serves all three planes. Upsampling is
    nearest-neighbor so a level's content stays aligned with the next.
    """

    def __init__(self, channels: int, n_levels: int = 3):
        super().__init__()
        self.n_levels = n_levels
        self.blocks = nn.ModuleList(ResBlock2d(channels, channels) for _ in range(n_levels))

    def forward(self, x) -> list[torch.Tensor]:
        levels = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x)
            levels.append(x)
        levels.reverse()  # index 0 = level 1 = full resolution
        return levels


class ModulatorMlp(nn.Module):
    """Maps a 3-vector view embedding to per-channel raw fusion weights."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(3, channels)
        self.fc2 = nn.Linear(channels, channels)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(s)))


def normalize_modulators(
    gamma1: torch.Tensor, gamma2: torch.Tensor, delta: float = MODULATOR_DELTA
):
    """Joint magnitude normalization of raw fusion weights.

    Returns (|g1|, |g2|) / sqrt((g1^2 + g2^2) * (1 + delta)) elementwise.
    delta regularizes relative to the magnitude (with an absolute floor
    only when both weights are exactly zero), so the squared outputs sum
    to 1 / (1 + delta) regardless of the input scale. An additive delta
    would drag the sum arbitrarily far below 1 for small weights.
    """
    s = gamma1 * gamma1 + gamma2 * gamma2
    denom = torch.sqrt(torch.where(s == 0, s.new_full((), delta), s * (1.0 + delta)))
    return gamma1.abs() / denom, gamma2.abs() / denom


def fuse_planes(
    x_uw: torch.Tensor,
    x_vw: torch.Tensor,
    gamma1_bar: torch.Tensor,
    gamma2_bar: torch.Tensor,
    *,
    transpose_vw: bool = False,
) -> torch.Tensor:
    """Synthesize the unobserved uv plane as a modulated sum of uw and vw.

    Requires square planes, since positions of one plane are reinterpreted
    on the other's axes. Swapping (x_uw, gamma1_bar) with (x_vw,
    gamma2_bar) yields the identical result.
    """
    if x_uw.shape != x_vw.shape:
        raise ValueError(f"plane shapes differ: {tuple(x_uw.shape)} vs {tuple(x_vw.shape)}")
    if x_uw.shape[-1] != x_uw.shape[-2]:
        raise ValueError(f"fusion needs square planes, got {tuple(x_uw.shape[-2:])}")
    if transpose_vw:
        x_vw = x_vw.transpose(-1, -2)
    g1 = gamma1_bar.reshape(*gamma1_bar.shape, 1, 1)
    g2 = gamma2_bar.reshape(*gamma2_bar.shape, 1, 1)
    return g1 * x_uw + g2 * x_vw


def sine_position_map(
    rows: int, cols: int, channels: int, *, dtype=torch.float32, device=None
) -> torch.Tensor:
    """Fixed 2D sinusoidal position map, (channels, rows, cols) in [-1, 1].

    Channel groups of four hold (sin, cos) pairs of the row and column
    coordinates at octave-spaced frequencies.
    """
    if channels % 4 != 0:
        raise ValueError(f"channels must be divisible by 4, got {channels}")
    quarter = channels // 4
    r = ((torch.arange(rows, dtype=dtype, device=device) + 0.5) / rows).view(1, rows, 1)
    c = ((torch.arange(cols, dtype=dtype, device=device) + 0.5) / cols).view(1, 1, cols)
    freqs = (2.0 ** torch.arange(quarter, dtype=dtype, device=device) * math.pi).view(quarter, 1, 1)
    chans = [
        torch.sin(freqs * r).expand(quarter, rows, cols),
        torch.cos(freqs * r).expand(quarter, rows, cols),
        torch.sin(freqs * c).expand(quarter, rows, cols),
        torch.cos(freqs * c).expand(quarter, rows, cols),
    ]
    return torch.cat(chans, dim=0)


class LearnableUvEmbedding(nn.Module):
    """Learned correction added to the fused uv plane.

    A fixed sinusoidal map, perturbed with Gaussian noise during
    training, passes through a zero-initialized conv so the module is an
    exact passthrough at initialization.
    """

    def __init__(self, channels: int, noise_sigma: float = 0.1):
        super().__init__()
        self.noise_sigma = noise_sigma
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, fused_uv: torch.Tensor) -> torch.Tensor:
        b, c, h, w = fused_uv.shape
        base = sine_position_map(h, w, c, dtype=fused_uv.dtype, device=fused_uv.device)
        base = base.unsqueeze(0).expand(b, c, h, w)
        if self.training and self.noise_sigma > 0:
            base = base + torch.randn_like(base) * self.noise_sigma
        return fused_uv + F.silu(self.conv(base))


class _ResnetFusion(nn.Module):
    """Ablation fusion: concat the two planes and mix with a residual block."""

    def __init__(self, channels: int):
        super().__init__()
        self.reduce = nn.Conv2d(2 * channels, channels, 1)
        self.block = ResBlock2d(channels, channels)

    def forward(self, x_uw, x_vw):
        return self.block(self.reduce(torch.cat([x_uw, x_vw], dim=1)))


class TriPlaneGenerator(nn.Module):
    """Lifts a biplanar pair into tri-plane feature pyramids.

    Args:
        channels: feature width C of every plane.
        n_levels: pyramid depth; level i has extents divided by 2**(i-1).
        fusion: "modulated" (default), "plain_sum", or "resnet".
        use_embedding: add the learnable uv embedding after fusion.
        noise_sigma: train-time noise scale inside the embedding.
        transpose_vw: transpose the vw plane before fusion.
    """

    def __init__(
        self,
        channels: int,
        n_levels: int = 3,
        *,
        fusion: str = "modulated",
        use_embedding: bool = True,
        noise_sigma: float = 0.1,
        transpose_vw: bool = False,
    ):
        super().__init__()
        if fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
        self.channels = channels
        self.n_levels = n_levels
        self.fusion = fusion
        self.transpose_vw = transpose_vw
        self.stem = nn.Conv2d(1, channels, 3, padding=1)
        self.interleave = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.encoder = PlaneEncoder(channels, n_down=n_levels - 1)
        self.decoder = PlaneDecoder(channels, n_levels=n_levels)
        if fusion == "modulated":
            self.modulator_front = ModulatorMlp(channels)
            self.modulator_side = ModulatorMlp(channels)
        elif fusion == "resnet":
            self.resnet_fusion = _ResnetFusion(channels)
        self.embedding = LearnableUvEmbedding(channels, noise_sigma) if use_embedding else None

    def _view_embeddings(self, s1, s2, dtype, device):
        if s1 is None:
            s1 = VIEW_EMBED_FRONT
        if s2 is None:
            s2 = VIEW_EMBED_SIDE
        t1 = torch.as_tensor(s1, dtype=dtype, device=device)
        t2 = torch.as_tensor(s2, dtype=dtype, device=device)
        return t1, t2

    def compute_modulators(self, s1=None, s2=None, *, dtype=None, device=None) -> ViewModulators:
        if self.fusion != "modulated":
            raise ValueError(f"modulators are not defined for fusion={self.fusion!r}")
        p = next(self.modulator_front.parameters())
        dtype = dtype or p.dtype
        device = device or p.device
        t1, t2 = self._view_embeddings(s1, s2, dtype, device)
        g1 = self.modulator_front(t1)
        g2 = self.modulator_side(t2)
        g1_bar, g2_bar = normalize_modulators(g1, g2)
        return ViewModulators(gamma1=g1, gamma2=g2, gamma1_bar=g1_bar, gamma2_bar=g2_bar)

    def _cross_view_aux(self, f_front: torch.Tensor, f_side: torch.Tensor):
        # Pool each view over its own row axis, keeping the shared w axis,
        # then replicate along the other view's row axis.
        h, w_rows = f_front.shape[2], f_side.shape[2]
        side_profile = f_side.mean(dim=2, keepdim=True)  # (B, C, 1, D)
        front_profile = f_front.mean(dim=2, keepdim=True)
        aux_for_front = side_profile.expand(-1, -1, h, -1)
        aux_for_side = front_profile.expand(-1, -1, w_rows, -1)
        return aux_for_front, aux_for_side

    def forward(self, front: torch.Tensor, side: torch.Tensor, s1=None, s2=None):
        """Returns a list of TriPlaneFeatures, level 1 (full resolution) first.

        front is (B, 1, H, D), side is (B, 1, W, D).
        """
        if front.ndim != 4 or side.ndim != 4:
            raise ValueError("front and side must be (B, 1, rows, D) tensors")
        f1 = self.stem(front)
        f2 = self.stem(side)
        aux1, aux2 = self._cross_view_aux(f1, f2)
        x1 = self.interleave(torch.cat([f1, aux1], dim=1))
        x2 = self.interleave(torch.cat([f2, aux2], dim=1))
        uw_deep = self.encoder(x1)
        vw_deep = self.encoder(x2)

        if self.fusion == "modulated":
            mods = self.compute_modulators(s1, s2, dtype=front.dtype, device=front.device)
            g1, g2 = mods.gamma1_bar, mods.gamma2_bar
            if g1.ndim == 1:
                g1 = g1.unsqueeze(0).expand(front.shape[0], -1)
                g2 = g2.unsqueeze(0).expand(front.shape[0], -1)
            uv_deep = fuse_planes(uw_deep, vw_deep, g1, g2, transpose_vw=self.transpose_vw)
        elif self.fusion == "plain_sum":
            vw_in = vw_deep.transpose(-1, -2) if self.transpose_vw else vw_deep
            uv_deep = uw_deep + vw_in
        else:
            vw_in = vw_deep.transpose(-1, -2) if self.transpose_vw else vw_deep
            uv_deep = self.resnet_fusion(uw_deep, vw_in)

        if self.embedding is not None:
            uv_deep = self.embedding(uv_deep)

        uv_levels = self.decoder(uv_deep)
        uw_levels = self.decoder(uw_deep)
        vw_levels = self.decoder(vw_deep)
        return [
            TriPlaneFeatures(uv=uv, uw=uw, vw=vw, level=i + 1)
            for i, (uv, uw, vw) in enumerate(zip(uv_levels, uw_levels, vw_levels))
        ]
