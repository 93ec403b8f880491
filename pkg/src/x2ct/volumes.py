"""CT volume container, preprocessing, synthetic phantoms, and raw I/O.

Volumes are stored as float32 arrays of shape (D, H, W) over axes
(w, u, v): w is the slice/depth axis, u and v the in-plane axes. All
physical positions are voxel centers, so voxel k along an axis with
spacing s sits at (k + 0.5) * s millimetres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError

HU_MIN = -1024.0
HU_MAX = 1500.0
HU_AIR = -1024.0
_HU_SPAN = HU_MAX - HU_MIN

VALUE_SPACES = ("hounsfield", "normalized")


@dataclass
class CtVolume:
    """A 3D CT image with isotropic or anisotropic voxel spacing.

    Attributes:
        data: float32 array, shape (D, H, W), finite everywhere.
        spacing_mm: per-axis voxel size in millimetres, all positive.
        value_space: "hounsfield" for raw HU, "normalized" for [-1, 1].
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    value_space: str = "hounsfield"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing_mm}")
        if self.value_space not in VALUE_SPACES:
            raise ValueError(f"value_space must be one of {VALUE_SPACES}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")
        if self.value_space == "normalized":
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -1.0 or hi > 1.0:
                raise ValueError(f"normalized volume out of range: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.data.shape, self.spacing_mm))


def clip_and_normalize(vol: CtVolume) -> CtVolume:
    """Clip HU to [-1024, 1500] and rescale linearly to [-1, 1]."""
    if vol.value_space != "hounsfield":
        raise ValueError("clip_and_normalize expects a hounsfield volume")
    x = vol.data.astype(np.float64)
    x = np.clip(x, HU_MIN, HU_MAX)
    y = 2.0 * (x - HU_MIN) / _HU_SPAN - 1.0
    # Guard against float32 rounding nudging an endpoint past the range.
    y = np.clip(y.astype(np.float32), -1.0, 1.0)
    return CtVolume(y, vol.spacing_mm, "normalized")


def denormalize(vol: CtVolume) -> CtVolume:
    """Invert clip_and_normalize, mapping [-1, 1] back to HU."""
    if vol.value_space != "normalized":
        raise ValueError("denormalize expects a normalized volume")
    y = vol.data.astype(np.float64)
    x = (y + 1.0) * 0.5 * _HU_SPAN + HU_MIN
    return CtVolume(x.astype(np.float32), vol.spacing_mm, "hounsfield")


def resample_isotropic(vol: CtVolume, target_mm: float) -> CtVolume:
    """Resample onto an isotropic grid by trilinear interpolation.

    Output voxel centers are placed in the same physical frame as the
    input (origin at the volume corner); samples outside the input grid
    clamp to the border voxel. Runs on HU volumes, before normalization.
    """
    if vol.value_space != "hounsfield":
        raise ValueError("resample_isotropic expects a hounsfield volume")
    if target_mm <= 0:
        raise ValueError("target spacing must be positive")
    new_shape = tuple(
        max(1, int(round(n * s / target_mm))) for n, s in zip(vol.shape, vol.spacing_mm)
    )
    axes_idx = []
    for n_new, s_old in zip(new_shape, vol.spacing_mm):
        # Physical center of output voxel k is (k + 0.5) * target_mm; map it
        # to fractional input index space where voxel j covers center
        # (j + 0.5) * s_old.
        centers = (np.arange(n_new, dtype=np.float64) + 0.5) * target_mm
        axes_idx.append(centers / s_old - 0.5)
    grid = np.meshgrid(*axes_idx, indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grid])
    resampled = ndimage.map_coordinates(
        vol.data.astype(np.float64), coords, order=1, mode="nearest"
    ).reshape(new_shape)
    return CtVolume(resampled.astype(np.float32), (target_mm,) * 3, "hounsfield")


def center_crop_or_pad(vol: CtVolume, size: tuple[int, int, int]) -> CtVolume:
    """Center-crop or air-pad each axis to the requested extent.

    Padding uses the air value expressed in the volume's current value
    space (-1024 HU, or -1.0 after normalization), so a normalized input
    stays within [-1, 1].
    """
    size = tuple(int(n) for n in size)
    if any(n <= 0 for n in size):
        raise ValueError(f"target size must be positive, got {size}")
    air = HU_AIR if vol.value_space == "hounsfield" else -1.0
    out = np.full(size, air, dtype=np.float32)
    src_slices, dst_slices = [], []
    for n_in, n_out in zip(vol.shape, size):
        if n_in >= n_out:
            start = (n_in - n_out) // 2
            src_slices.append(slice(start, start + n_out))
            dst_slices.append(slice(0, n_out))
        else:
            start = (n_out - n_in) // 2
            src_slices.append(slice(0, n_in))
            dst_slices.append(slice(start, start + n_in))
    out[tuple(dst_slices)] = vol.data[tuple(src_slices)]
    return CtVolume(out, vol.spacing_mm, vol.value_space)


@dataclass
class ImplantSpec:
    """A metal rod along the w axis, used to exercise the clip ceiling."""

    radius_frac: float = 0.08
    hu: float = 2500.0
    center_u: float = 0.5
    center_v: float = 0.5


@dataclass
class PhantomSpec:
    """Recipe for a procedural phantom.

    size must be at least 8 and divisible by 4 so the downstream models
    can halve the grid twice.
    """

    seed: int = 0
    size: int = 32
    n_ellipsoids: int = 3
    density_range: tuple[float, float] = (0.0, 100.0)
    implant: ImplantSpec | None = None
    spacing_mm: float = 1.0


def generate_phantom(spec: PhantomSpec) -> CtVolume:
    """Synthesize a deterministic HU phantom.

    Air background at -1000 HU, soft-tissue ellipsoids in the configured
    density range, each wrapped in a bone-density shell (400-1200 HU),
    plus an optional implant rod above the HU clip ceiling. Later
    ellipsoids overwrite earlier ones where they overlap.
    """
    if spec.size < 8 or spec.size % 4 != 0:
        raise ValueError(f"phantom size must be >= 8 and divisible by 4, got {spec.size}")
    lo, hi = spec.density_range
    if not (HU_MIN <= lo <= hi <= HU_MAX):
        raise ValueError(f"density range {spec.density_range} not within [{HU_MIN}, {HU_MAX}]")
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    vol = np.full((n, n, n), -1000.0, dtype=np.float32)
    # Voxel centers on a normalized [-1, 1] cube.
    axis = (2.0 * np.arange(n) + 1.0) / n - 1.0
    gw, gu, gv = np.meshgrid(axis, axis, axis, indexing="ij")
    for _ in range(spec.n_ellipsoids):
        center = rng.uniform(-0.4, 0.4, size=3)
        semi = rng.uniform(0.15, 0.45, size=3)
        soft = rng.uniform(lo, hi)
        shell_hu = rng.uniform(400.0, 1200.0)
        shell_t = rng.uniform(1.1, 1.25)
        q = (
            ((gw - center[0]) / semi[0]) ** 2
            + ((gu - center[1]) / semi[1]) ** 2
            + ((gv - center[2]) / semi[2]) ** 2
        )
        vol[q <= shell_t**2] = shell_hu
        vol[q <= 1.0] = soft
    if spec.implant is not None:
        imp = spec.implant
        cu = (imp.center_u * 2.0) - 1.0
        cv = (imp.center_v * 2.0) - 1.0
        r2 = (imp.radius_frac * 2.0) ** 2
        disk = (gu[0] - cu) ** 2 + (gv[0] - cv) ** 2 <= r2
        vol[:, disk] = imp.hu
    return CtVolume(vol, (spec.spacing_mm,) * 3, "hounsfield")


_VOLUME_DTYPE = "f32le"


def save_volume(vol: CtVolume, path: str | Path) -> None:
    """Write raw little-endian float32 voxels plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vol.data.astype("<f4").tofile(path)
    sidecar = {
        "shape": list(vol.shape),
        "spacing_mm": list(vol.spacing_mm),
        "value_space": vol.value_space,
        "dtype": _VOLUME_DTYPE,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_volume(path: str | Path) -> CtVolume:
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
    required = {"shape", "spacing_mm", "value_space", "dtype"}
    missing = required - set(meta)
    if missing:
        raise FormatError(f"sidecar missing keys {sorted(missing)}: {sidecar_path}")
    if meta["dtype"] != _VOLUME_DTYPE:
        raise FormatError(f"unsupported dtype {meta['dtype']!r} in {sidecar_path}")
    shape = tuple(int(n) for n in meta["shape"])
    if len(shape) != 3:
        raise FormatError(f"volume shape must have 3 entries, got {meta['shape']}")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise FormatError(
            f"voxel count mismatch in {path}: file has {data.size}, sidecar implies {expected}"
        )
    return CtVolume(data.reshape(shape), tuple(meta["spacing_mm"]), meta["value_space"])
