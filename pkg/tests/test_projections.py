import json
import math

import numpy as np
import pytest
import torch

from x2ct.errors import FormatError
from x2ct.projections import (
    BiplanarPair,
    DrrGeometry,
    drr_project,
    export_png,
    load_projection,
    make_biplanar_pair,
    mean_project,
    ortho_project,
    save_projection,
)
from x2ct.volumes import CtVolume, PhantomSpec, clip_and_normalize, generate_phantom


# --- independent scalar oracle ---------------------------------------------
# Written against the documented ray/volume conventions only; shares no code
# with the implementation.

def _oracle_trilinear(data, spacing, pos):
    val = 0.0
    shape = data.shape
    idx = [min(max(pos[a] / spacing[a] - 0.5, 0.0), shape[a] - 1.0) for a in range(3)]
    i0 = [int(math.floor(v)) for v in idx]
    i0 = [min(v, shape[a] - 1) for a, v in enumerate(i0)]
    i1 = [min(v + 1, shape[a] - 1) for a, v in enumerate(i0)]
    f = [idx[a] - i0[a] for a in range(3)]
    for corner in range(8):
        w = 1.0
        pick = []
        for a in range(3):
            if corner >> a & 1:
                pick.append(i1[a])
                w *= f[a]
            else:
                pick.append(i0[a])
                w *= 1.0 - f[a]
        val += w * float(data[pick[0], pick[1], pick[2]])
    return val


def _oracle_chord(origin, direction, box):
    tn, tf = -math.inf, math.inf
    for a in range(3):
        o, d = origin[a], direction[a]
        if d == 0.0:
            if not (0.0 <= o <= box[a]):
                return 0.0, 0.0
            continue
        t0, t1 = (0.0 - o) / d, (box[a] - o) / d
        tn = max(tn, min(t0, t1))
        tf = min(tf, max(t0, t1))
    tn = max(tn, 0.0)
    if tf <= tn:
        return 0.0, 0.0
    return tn, tf


def _oracle_ray_integral(mu, spacing, origin, direction, step_mm):
    box = [mu.shape[a] * spacing[a] for a in range(3)]
    tn, tf = _oracle_chord(origin, direction, box)
    chord = tf - tn
    if chord <= 0.0:
        return 0.0
    n = max(1, math.ceil(chord / step_mm - 1e-12))
    dt = chord / n
    total = 0.0
    for j in range(n):
        t = tn + (j + 0.5) * dt
        pos = [origin[a] + t * direction[a] for a in range(3)]
        total += _oracle_trilinear(mu, spacing, pos) * dt
    return total


def _oracle_drr(vol, view, geometry):
    d, h, w = vol.shape
    s0, s1, s2 = vol.spacing_mm
    box = [d * s0, h * s1, w * s2]
    mu = (vol.data.astype(np.float64) + 1.0) * 0.5
    rows = h if view == "front" else w
    out = np.zeros((rows, d))
    for r in range(rows):
        for c in range(d):
            wc = (c + 0.5) * s0
            if view == "front":
                exit_pt = [wc, (r + 0.5) * s1, box[2]]
                axis = [0.0, 0.0, 1.0]
            else:
                exit_pt = [wc, box[1], (r + 0.5) * s2]
                axis = [0.0, 1.0, 0.0]
            if geometry.mode == "parallel":
                origin = [exit_pt[a] - axis[a] * box[2 if view == "front" else 1] for a in range(3)]
                direction = axis
            else:
                sd = geometry.source_distance_mm
                origin = [box[a] * 0.5 - axis[a] * sd for a in range(3)]
                delta = [exit_pt[a] - origin[a] for a in range(3)]
                norm = math.sqrt(sum(x * x for x in delta))
                direction = [x / norm for x in delta]
            out[r, c] = _oracle_ray_integral(mu, vol.spacing_mm, origin, direction, geometry.step_mm)
    return out


def small_volume(seed=0, shape=(6, 5, 4), spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    data = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
    return CtVolume(data, spacing, "normalized")


class TestDrrOracle:
    @pytest.mark.parametrize("view", ["front", "side"])
    def test_parallel_matches_scalar_oracle(self, view):
        vol = small_volume(seed=1)
        geom = DrrGeometry(step_mm=0.5)
        got = drr_project(vol, view, geom, normalize=False).astype(np.float64)
        want = _oracle_drr(vol, view, geom)
        assert np.abs(got - want).max() <= 1e-6

    @pytest.mark.parametrize("view", ["front", "side"])
    def test_cone_matches_scalar_oracle(self, view):
        vol = small_volume(seed=2, spacing=(1.0, 0.8, 1.2))
        geom = DrrGeometry(mode="cone", source_distance_mm=40.0, step_mm=0.5)
        got = drr_project(vol, view, geom, normalize=False).astype(np.float64)
        want = _oracle_drr(vol, view, geom)
        assert np.abs(got - want).max() <= 1e-6

    def test_uniform_cube_parallel_equals_path_length(self):
        # mu = 1 everywhere, so each parallel ray integrates its chord.
        vol = CtVolume(np.ones((8, 8, 8), dtype=np.float32), (1.0,) * 3, "normalized")
        img = drr_project(vol, "front", DrrGeometry(step_mm=0.5), normalize=False)
        np.testing.assert_allclose(img, 8.0, rtol=1e-4)

    def test_cone_corner_ray_matches_chord(self):
        vol = CtVolume(np.ones((8, 8, 8), dtype=np.float32), (1.0,) * 3, "normalized")
        geom = DrrGeometry(mode="cone", source_distance_mm=30.0, step_mm=0.5)
        img = drr_project(vol, "front", geom, normalize=False).astype(np.float64)
        # independent chord for the corner pixel ray
        exit_pt = [0.5, 0.5, 8.0]
        origin = [4.0, 4.0, 4.0 - 30.0]
        delta = [e - o for e, o in zip(exit_pt, origin)]
        norm = math.sqrt(sum(x * x for x in delta))
        direction = [x / norm for x in delta]
        tn, tf = _oracle_chord(origin, direction, [8.0, 8.0, 8.0])
        assert abs(img[0, 0] - (tf - tn)) / (tf - tn) <= 1e-3

    def test_step_halving_reduces_error(self):
        vol = clip_and_normalize(generate_phantom(PhantomSpec(seed=4, size=16)))
        ref = drr_project(vol, "front", DrrGeometry(step_mm=0.04375), normalize=False)
        ref = ref.astype(np.float64)
        errs = []
        for step in (0.7, 0.35):
            img = drr_project(vol, "front", DrrGeometry(step_mm=step), normalize=False)
            errs.append(np.abs(img.astype(np.float64) - ref).max())
        assert errs[1] > 0
        assert errs[0] / errs[1] >= 1.8


class TestDrrBehavior:
    def test_output_shapes(self):
        vol = small_volume(shape=(6, 5, 4))
        assert drr_project(vol, "front").shape == (5, 6)
        assert drr_project(vol, "side").shape == (4, 6)

    def test_normalized_range(self):
        vol = small_volume(seed=3)
        img = drr_project(vol, "front")
        assert img.min() == -1.0
        assert img.max() == 1.0

    def test_constant_image_normalizes_to_floor(self):
        vol = CtVolume(np.zeros((4, 4, 4), dtype=np.float32), (1.0,) * 3, "normalized")
        img = drr_project(vol, "front")
        np.testing.assert_array_equal(img, -1.0)

    def test_exponential_mode(self):
        vol = small_volume(seed=5)
        raw = drr_project(vol, "front", DrrGeometry(step_mm=0.5), normalize=False)
        geom = DrrGeometry(step_mm=0.5, exponential=True, exposure_k=0.3)
        got = drr_project(vol, "front", geom, normalize=False)
        np.testing.assert_allclose(got, 1.0 - np.exp(-0.3 * raw.astype(np.float64)), atol=1e-6)

    def test_deterministic(self):
        vol = small_volume(seed=6)
        a = drr_project(vol, "front")
        b = drr_project(vol, "front")
        np.testing.assert_array_equal(a, b)

    def test_requires_normalized(self):
        hu = generate_phantom(PhantomSpec(seed=0, size=8))
        with pytest.raises(ValueError):
            drr_project(hu, "front")

    def test_bad_view(self):
        with pytest.raises(ValueError):
            drr_project(small_volume(), "top")

    def test_geometry_validation(self):
        vol = small_volume()
        with pytest.raises(ValueError):
            drr_project(vol, "front", DrrGeometry(step_mm=2.0))
        with pytest.raises(ValueError):
            drr_project(vol, "front", DrrGeometry(mode="cone", source_distance_mm=2.0))
        with pytest.raises(ValueError):
            drr_project(vol, "front", DrrGeometry(mode="spiral"))

    def test_biplanar_pair(self):
        vol = small_volume(seed=7)
        geom = DrrGeometry(step_mm=0.5)
        pair = make_biplanar_pair(vol, geom)
        np.testing.assert_array_equal(pair.front, drr_project(vol, "front", geom))
        np.testing.assert_array_equal(pair.side, drr_project(vol, "side", geom))


class TestOrthoProjection:
    def test_axis_mapping(self):
        data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        vol = CtVolume(data, (1.0,) * 3, "hounsfield")
        np.testing.assert_allclose(ortho_project(vol, "A").image, data.mean(axis=0))
        np.testing.assert_allclose(ortho_project(vol, "S").image, data.mean(axis=1))
        np.testing.assert_allclose(ortho_project(vol, "C").image, data.mean(axis=2))

    def test_projection_shapes(self):
        data = np.zeros((2, 3, 4), dtype=np.float32)
        vol = CtVolume(data, (1.0,) * 3, "hounsfield")
        assert ortho_project(vol, "A").image.shape == (3, 4)
        assert ortho_project(vol, "S").image.shape == (2, 4)
        assert ortho_project(vol, "C").image.shape == (2, 3)

    def test_torch_tensors_stay_differentiable(self):
        x = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
        proj = ortho_project(x, "A")
        assert torch.is_tensor(proj.image)
        proj.image.sum().backward()
        assert x.grad is not None
        np.testing.assert_allclose(x.grad.numpy(), 1.0 / 2)

    def test_mean_project_matches_numpy(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 5))
        np.testing.assert_allclose(mean_project(x, 1), x.mean(1))

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            ortho_project(np.zeros((2, 2, 2)), "B")


class TestProjectionIo:
    def test_roundtrip(self, tmp_path):
        img = np.random.default_rng(1).normal(size=(5, 6)).astype(np.float32)
        path = tmp_path / "proj.raw"
        save_projection(img, "front", path)
        back, view = load_projection(path)
        np.testing.assert_array_equal(back, img)
        assert view == "front"

    def test_sidecar(self, tmp_path):
        img = np.zeros((3, 4), dtype=np.float32)
        save_projection(img, "side", tmp_path / "p.raw")
        meta = json.loads((tmp_path / "p.raw.json").read_text())
        assert meta == {"shape": [3, 4], "view": "side", "dtype": "f32le"}

    def test_bad_view_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_projection(np.zeros((3, 4), dtype=np.float32), "oblique", tmp_path / "p.raw")

    def test_size_mismatch(self, tmp_path):
        img = np.zeros((3, 4), dtype=np.float32)
        path = tmp_path / "p.raw"
        save_projection(img, "front", path)
        path.write_bytes(path.read_bytes()[:8])
        with pytest.raises(FormatError):
            load_projection(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_projection(tmp_path / "none.raw")

    def test_png_export(self, tmp_path):
        from PIL import Image

        img = np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4)
        out = tmp_path / "img.png"
        export_png(img, out)
        loaded = np.asarray(Image.open(out))
        assert loaded.shape == (3, 4)
        assert loaded.dtype == np.uint8
        assert loaded.min() == 0 and loaded.max() == 255
