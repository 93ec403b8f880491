"""Implicit decoding of tri-plane features into volumetric condition grids.

Voxel centers are addressed by normalized coordinates (u, v, w) in
[-1, 1]; each query bilinearly samples the three planes at its
coordinate pairs, sums the results, and refines them with a small
point-wise MLP. Decoding every voxel of a stage grid yields the dense
condition tensor consumed by the matching denoiser stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .triplane import TriPlaneFeatures, TriPlaneGenerator


@dataclass
class ConditionSet:
    """Per-stage dense condition tensors, level 1 (full resolution) first.

    h[i] has shape (B, C, D_i, H_i, W_i) matching denoiser stage i+1.
    """

    h: list

    def __len__(self) -> int:
        return len(self.h)

    def __getitem__(self, i) -> torch.Tensor:
        return self.h[i]


def make_coordinate_grid(
    shape: tuple[int, int, int], *, dtype=torch.float32, device=None
) -> torch.Tensor:
    """Normalized voxel-center coordinates for a (D, H, W) grid.

    Returns (D*H*W, 3) with columns (u, v, w); rows enumerate the grid in
    storage order (w outermost, then u, then v). Coordinate k of an
    extent-n axis is (2k + 1) / n - 1, so centers never touch the border.
    """
    d, h, w = shape
    wc = (2.0 * torch.arange(d, dtype=dtype, device=device) + 1.0) / d - 1.0
    uc = (2.0 * torch.arange(h, dtype=dtype, device=device) + 1.0) / h - 1.0
    vc = (2.0 * torch.arange(w, dtype=dtype, device=device) + 1.0) / w - 1.0
    gw, gu, gv = torch.meshgrid(wc, uc, vc, indexing="ij")
    return torch.stack([gu.reshape(-1), gv.reshape(-1), gw.reshape(-1)], dim=1)


def sample_plane(plane: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample a feature plane at normalized points.

    Args:
        plane: (B, C, R, S) feature plane.
        points: (K, 2) or (B, K, 2) normalized coordinates in [-1, 1];
            the first column indexes rows, the second columns. Samples
            outside the plane clamp to the border.

    Returns:
        (B, K, C) sampled features.
    """
    if plane.ndim != 4:
        raise ValueError(f"plane must be (B, C, R, S), got shape {tuple(plane.shape)}")
    b = plane.shape[0]
    if points.ndim == 2:
        points = points.unsqueeze(0).expand(b, -1, -1)
    # grid_sample's last dim is (x, y) with x indexing the width axis.
    grid = torch.stack([points[..., 1], points[..., 0]], dim=-1).unsqueeze(1)
    out = F.grid_sample(
        plane, grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out.squeeze(2).transpose(1, 2)


def query_triplane(planes: TriPlaneFeatures, coords: torch.Tensor) -> torch.Tensor:
    """Sum of the three plane samples for each (u, v, w) query point.

    coords is (K, 3) with columns (u, v, w); result is (B, K, C).
    """
    u, v, w = coords[:, 0], coords[:, 1], coords[:, 2]
    f_uv = sample_plane(planes.uv, torch.stack([u, v], dim=1))
    f_uw = sample_plane(planes.uw, torch.stack([u, w], dim=1))
    f_vw = sample_plane(planes.vw, torch.stack([v, w], dim=1))
    return f_uv + f_uw + f_vw


class PointMlp(nn.Module):
    """Two-layer feature refinement applied independently per point."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, channels)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(f)))


def decode_level(
    planes: TriPlaneFeatures, shape: tuple[int, int, int], mlp: PointMlp
) -> torch.Tensor:
    """Decode one pyramid level into a dense (B, C, D, H, W) grid."""
    coords = make_coordinate_grid(shape, dtype=planes.uv.dtype, device=planes.uv.device)
    feats = mlp(query_triplane(planes, coords))  # (B, K, C)
    b, _, c = feats.shape
    d, h, w = shape
    return feats.transpose(1, 2).reshape(b, c, d, h, w)


class ImplicitConditioner(nn.Module):
    """Tri-plane generator plus implicit decoder, end to end.

    Produces the dense multi-scale condition grids for a biplanar pair.
    The point MLP is shared across pyramid levels unless per_level_mlp
    is set.
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
        per_level_mlp: bool = False,
    ):
        super().__init__()
        self.channels = channels
        self.n_levels = n_levels
        self.generator = TriPlaneGenerator(
            channels,
            n_levels,
            fusion=fusion,
            use_embedding=use_embedding,
            noise_sigma=noise_sigma,
            transpose_vw=transpose_vw,
        )
        if per_level_mlp:
            self.point_mlp = nn.ModuleList(PointMlp(channels) for _ in range(n_levels))
        else:
            self.point_mlp = PointMlp(channels)

    def _mlp_for(self, level_index: int) -> PointMlp:
        if isinstance(self.point_mlp, nn.ModuleList):
            return self.point_mlp[level_index]
        return self.point_mlp

    def forward(
        self, front: torch.Tensor, side: torch.Tensor, stage_shapes: list, s1=None, s2=None
    ) -> ConditionSet:
        """Decode condition grids for the given per-stage volume shapes.

        stage_shapes[i] is the (D, H, W) of denoiser stage i+1 and must
        match the plane resolution of pyramid level i+1.
        """
        if len(stage_shapes) != self.n_levels:
            raise ValueError(
                f"expected {self.n_levels} stage shapes, got {len(stage_shapes)}"
            )
        pyramid = self.generator(front, side, s1, s2)
        grids = [
            decode_level(planes, tuple(shape), self._mlp_for(i))
            for i, (planes, shape) in enumerate(zip(pyramid, stage_shapes))
        ]
        return ConditionSet(h=grids)


class BaselineConditioner(nn.Module):
    """Ablation conditioning without tri-planes.

    Each view passes through a stem conv, is replicated along its
    unobserved axis into a dense grid, and the two grids are averaged.
    Coarser stages come from average pooling.
    """

    def __init__(self, channels: int, n_levels: int = 3):
        super().__init__()
        self.channels = channels
        self.n_levels = n_levels
        self.stem = nn.Conv2d(1, channels, 3, padding=1)
        self.mix = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(
        self, front: torch.Tensor, side: torch.Tensor, stage_shapes: list, s1=None, s2=None
    ) -> ConditionSet:
        if len(stage_shapes) != self.n_levels:
            raise ValueError(
                f"expected {self.n_levels} stage shapes, got {len(stage_shapes)}"
            )
        d, h, w = stage_shapes[0]
        f_front = self.stem(front)  # (B, C, H, D)
        f_side = self.stem(side)  # (B, C, W, D)
        vol_front = f_front.permute(0, 1, 3, 2).unsqueeze(-1).expand(-1, -1, d, h, w)
        vol_side = f_side.permute(0, 1, 3, 2).unsqueeze(-2).expand(-1, -1, d, h, w)
        grid = self.mix((vol_front + vol_side) * 0.5)
        grids = [grid]
        for shape in stage_shapes[1:]:
            factor = d // shape[0]
            grids.append(F.avg_pool3d(grid, kernel_size=factor))
        return ConditionSet(h=grids)
