"""Digitally reconstructed radiographs and orthogonal mean projections.

The DRR caster integrates attenuation along rays through a normalized
volume with trilinear interpolation, supporting parallel-beam and
cone-beam geometry. Physical frame: positions are (pw, pu, pv) in
millimetres with the volume corner at the origin; voxel (k0, k1, k2)
is centered at ((k0+0.5)*s0, (k1+0.5)*s1, (k2+0.5)*s2).

View conventions for a (D, H, W) volume:
    front: rays along +v, detector grid (H, D), rows index u, cols index w.
    side:  rays along +u, detector grid (W, D), rows index v, cols index w.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .volumes import CtVolume

PROJECTION_VIEWS = ("front", "side", "A", "C", "S")

# Orthogonal projection letters mapped to the storage axis they collapse:
# A (axial) collapses w, C (coronal) collapses v, S (sagittal) collapses u.
ORTHO_AXES = {"A": 0, "C": 2, "S": 1}


@dataclass
class DrrGeometry:
    """Ray-casting parameters for synthesizing a radiograph.

    mode "parallel" casts axis-aligned rays through each detector pixel.
    mode "cone" places a point source source_distance_mm behind the
    volume center along the ray axis, with the detector centered on the
    exit face. step_mm is the nominal sample spacing along each ray; the
    actual spacing divides the chord evenly and never exceeds step_mm.
    """

    mode: str = "parallel"
    source_distance_mm: float | None = None
    step_mm: float = 0.5
    exponential: bool = False
    exposure_k: float = 1.0

    def validate(self, vol: CtVolume) -> None:
        if self.mode not in ("parallel", "cone"):
            raise ValueError(f"unknown DRR mode {self.mode!r}")
        if self.step_mm <= 0 or self.step_mm > min(vol.spacing_mm):
            raise ValueError(
                f"step_mm must be in (0, {min(vol.spacing_mm)}] for this volume, "
                f"got {self.step_mm}"
            )
        if self.mode == "cone":
            diag = math.sqrt(sum(e * e for e in vol.extent_mm))
            if self.source_distance_mm is None or self.source_distance_mm <= diag:
                raise ValueError(
                    "cone mode needs source_distance_mm greater than the volume "
                    f"diagonal ({diag:.2f} mm), got {self.source_distance_mm}"
                )


@dataclass
class BiplanarPair:
    """Front and side radiographs of one volume, normalized to [-1, 1]."""

    front: np.ndarray
    side: np.ndarray
    geometry: DrrGeometry


@dataclass
class OrthoProjection:
    axis: str
    image: object  # numpy array or torch tensor, matching the input


def _trilinear_sample(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sample a (D, H, W) array at fractional indices (..., 3), border-clamped."""
    out_of = [np.clip(idx[..., a], 0.0, data.shape[a] - 1.0) for a in range(3)]
    acc = 0.0
    lo = [np.floor(c).astype(np.int64) for c in out_of]
    lo = [np.minimum(l, data.shape[a] - 1) for a, l in enumerate(lo)]
    hi = [np.minimum(l + 1, data.shape[a] - 1) for a, l in enumerate(lo)]
    frac = [c - l for c, l in zip(out_of, lo)]
    for corner in range(8):
        picks, weight = [], 1.0
        for a in range(3):
            if corner >> a & 1:
                picks.append(hi[a])
                weight = weight * frac[a]
            else:
                picks.append(lo[a])
                weight = weight * (1.0 - frac[a])
        acc = acc + data[picks[0], picks[1], picks[2]] * weight
    return acc


def _ray_box(origin: np.ndarray, direction: np.ndarray, box: np.ndarray) -> tuple:
    """Slab-method ray/box intersection.

    Returns (tnear, tfar) per ray; rays that miss get tnear > tfar.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (0.0 - origin) * inv
        t1 = (box - origin) * inv
    # Parallel-to-slab rays: inside the slab -> (-inf, inf), outside -> miss.
    parallel = direction == 0.0
    inside = (origin >= 0.0) & (origin <= box)
    t0 = np.where(parallel, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(parallel, np.where(inside, np.inf, -np.inf), t1)
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tnear = np.maximum(tmin.max(axis=-1), 0.0)
    tfar = tmax.min(axis=-1)
    return tnear, tfar


def _normalize_image(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo <= 0.0:
        return np.full_like(img, -1.0)
    return (img - lo) / (hi - lo) * 2.0 - 1.0


def drr_project(
    vol: CtVolume,
    view: str,
    geometry: DrrGeometry | None = None,
    *,
    normalize: bool = True,
) -> np.ndarray:
    """Cast a radiograph of a normalized volume.

    Attenuation is mu = (value + 1) / 2, so air is 0 and the clip ceiling
    is 1. Each ray accumulates sum(mu * dt) over midpoint samples on its
    chord through the volume box; with exponential enabled the line
    integral I is mapped to 1 - exp(-k * I) before normalization.

    Args:
        vol: normalized CtVolume.
        view: "front" or "side".
        geometry: ray-casting parameters; defaults to parallel geometry.
        normalize: min-max rescale the image to [-1, 1] per image. Set
            False to get raw line integrals in millimetre units.

    Returns:
        float32 array of shape (H, D) for front or (W, D) for side.
    """
    if vol.value_space != "normalized":
        raise ValueError("drr_project expects a normalized volume")
    if view not in ("front", "side"):
        raise ValueError(f"view must be 'front' or 'side', got {view!r}")
    geometry = geometry or DrrGeometry()
    geometry.validate(vol)

    d, h, w = vol.shape
    s0, s1, s2 = vol.spacing_mm
    box = np.array(vol.extent_mm, dtype=np.float64)
    mu = (vol.data.astype(np.float64) + 1.0) * 0.5

    if view == "front":
        rows, cols = h, d
        row_centers = (np.arange(h, dtype=np.float64) + 0.5) * s1  # u
        axis_vec = np.array([0.0, 0.0, 1.0])
        axis_len = box[2]
    else:
        rows, cols = w, d
        row_centers = (np.arange(w, dtype=np.float64) + 0.5) * s2  # v
        axis_vec = np.array([0.0, 1.0, 0.0])
        axis_len = box[1]
    col_centers = (np.arange(d, dtype=np.float64) + 0.5) * s0  # w

    rr, cc = np.meshgrid(row_centers, col_centers, indexing="ij")
    exit_pts = np.empty((raysize := rows * cols, 3), dtype=np.float64)
    exit_pts[:, 0] = cc.reshape(-1)
    if view == "front":
        exit_pts[:, 1] = rr.reshape(-1)
        exit_pts[:, 2] = axis_len
    else:
        exit_pts[:, 2] = rr.reshape(-1)
        exit_pts[:, 1] = axis_len

    if geometry.mode == "parallel":
        origins = exit_pts - axis_vec * axis_len
        dirs = np.broadcast_to(axis_vec, (raysize, 3)).copy()
    else:
        source = box * 0.5 - axis_vec * float(geometry.source_distance_mm)
        origins = np.broadcast_to(source, (raysize, 3)).copy()
        dirs = exit_pts - origins
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    tnear, tfar = _ray_box(origins, dirs, box)
    chord = np.maximum(tfar - tnear, 0.0)
    integral = np.zeros(raysize, dtype=np.float64)
    n_steps = np.maximum(np.ceil(chord / geometry.step_mm - 1e-12).astype(np.int64), 1)
    dt = chord / n_steps
    spacing = np.array([s0, s1, s2], dtype=np.float64)
    for j in range(int(n_steps.max())):
        active = j < n_steps
        t = tnear + (j + 0.5) * dt
        pos = origins + dirs * t[:, None]
        idx = pos / spacing - 0.5
        sample = _trilinear_sample(mu, idx)
        integral = integral + np.where(active, sample * dt, 0.0)

    if geometry.exponential:
        integral = 1.0 - np.exp(-geometry.exposure_k * integral)
    img = integral.reshape(rows, cols)
    if normalize:
        img = _normalize_image(img)
    return img.astype(np.float32)


def make_biplanar_pair(vol: CtVolume, geometry: DrrGeometry | None = None) -> BiplanarPair:
    """Cast the front and side radiographs used as conditioning inputs."""
    geometry = geometry or DrrGeometry()
    front = drr_project(vol, "front", geometry)
    side = drr_project(vol, "side", geometry)
    return BiplanarPair(front=front, side=side, geometry=geometry)


def mean_project(data, storage_axis: int):
    """Mean over one storage axis; works on numpy arrays and torch tensors."""
    return data.mean(storage_axis)


def ortho_project(vol, axis: str) -> OrthoProjection:
    """Mean projection along an anatomical axis letter (A, C, or S).

    Accepts a CtVolume, a (D, H, W) numpy array, or a torch tensor laid
    out the same way; the projected image keeps the input's array type,
    so this path stays differentiable for tensors.
    """
    if axis not in ORTHO_AXES:
        raise ValueError(f"axis must be one of {sorted(ORTHO_AXES)}, got {axis!r}")
    data = vol.data if isinstance(vol, CtVolume) else vol
    return OrthoProjection(axis=axis, image=mean_project(data, ORTHO_AXES[axis]))


_PROJ_DTYPE = "f32le"


def save_projection(img: np.ndarray, view: str, path: str | Path) -> None:
    """Write a 2D image as raw little-endian float32 plus a JSON sidecar."""
    if img.ndim != 2:
        raise ValueError(f"projection must be 2D, got shape {img.shape}")
    if view not in PROJECTION_VIEWS:
        raise ValueError(f"view must be one of {PROJECTION_VIEWS}, got {view!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.asarray(img, dtype="<f4").tofile(path)
    sidecar = {"shape": list(img.shape), "view": view, "dtype": _PROJ_DTYPE}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_projection(path: str | Path) -> tuple[np.ndarray, str]:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.exists():
        raise FileNotFoundError(str(path))
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar: {sidecar_path}")
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"sidecar is not valid JSON: {sidecar_path}") from exc
    for key in ("shape", "view", "dtype"):
        if key not in meta:
            raise FormatError(f"sidecar missing key {key!r}: {sidecar_path}")
    if meta["dtype"] != _PROJ_DTYPE:
        raise FormatError(f"unsupported dtype {meta['dtype']!r} in {sidecar_path}")
    shape = tuple(int(n) for n in meta["shape"])
    if len(shape) != 2:
        raise FormatError(f"projection shape must have 2 entries, got {meta['shape']}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != shape[0] * shape[1]:
        raise FormatError(
            f"pixel count mismatch in {path}: file has {data.size}, "
            f"sidecar implies {shape[0] * shape[1]}"
        )
    return data.reshape(shape), meta["view"]


def export_png(img: np.ndarray, path: str | Path, value_range: tuple[float, float] = (-1.0, 1.0)):
    """8-bit grayscale export for quick visual checks. Lossy by design."""
    from PIL import Image

    lo, hi = value_range
    scaled = np.clip((np.asarray(img, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray((scaled * 255.0).round().astype(np.uint8), mode="L").save(Path(path))
