"""Voxel grid geometry and CVX1 container tests (brute-force oracles included)."""

import struct

import numpy as np
import pytest

from voxdiff import gradcore as gc
from voxdiff import voxelgeom as vg
from voxdiff.errors import DataError, ShapeError


def brute_force_faces(occ):
    """Oracle: enumerate exposed faces with plain python loops."""
    R = occ.shape[0]
    faces = []
    dirs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for x in range(R):
        for y in range(R):
            for z in range(R):
                if not occ[x, y, z]:
                    continue
                for d, (dx, dy, dz) in enumerate(dirs):
                    nx, ny, nz = x + dx, y + dy, z + dz
                    if not (0 <= nx < R and 0 <= ny < R and 0 <= nz < R) or not occ[nx, ny, nz]:
                        faces.append((x, y, z, d))
    return faces


class TestGeometry:
    def test_voxel_centers_r4(self):
        np.testing.assert_allclose(vg.voxel_centers(4), [-0.75, -0.25, 0.25, 0.75])

    def test_binarize_is_strictly_greater(self):
        vol = np.zeros((2, 2, 2), dtype=np.float32)
        vol[0, 0, 0] = 0.5
        grid = vg.binarize(vol, threshold=0.0)
        assert grid.count == 1
        assert vg.binarize(vol, threshold=0.5).count == 0

    def test_solid_cube_surface_excludes_center(self):
        occ = np.zeros((5, 5, 5), dtype=bool)
        occ[1:4, 1:4, 1:4] = True
        surf = vg.surface_voxels(occ)
        assert len(surf) == 26
        assert not any((s == [2, 2, 2]).all() for s in surf)

    def test_exposed_faces_match_brute_force(self):
        r = gc.rng(4, "faces")
        occ = r.random((6, 6, 6)) < 0.4
        faces, dirs = vg.exposed_faces(occ)
        got = sorted((int(x), int(y), int(z), int(d))
                     for (x, y, z), d in zip(faces, dirs))
        assert got == sorted(brute_force_faces(occ))

    def test_two_voxel_bar_face_counts(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1, 1, 1] = occ[2, 1, 1] = True
        faces, _ = vg.exposed_faces(occ)
        assert len(faces) == 10  # each voxel has 5 exposed faces; the shared face is hidden

    def test_sample_face_ratio_uniform(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1, 1, 1] = occ[2, 1, 1] = True
        pts = vg.surface_sample(occ, 100000, gc.rng(0, "ratio"))
        boundary = vg.voxel_centers(4)[1] + (vg.voxel_centers(4)[2] - vg.voxel_centers(4)[1]) / 2
        left = (pts[:, 0] < boundary).mean()
        assert abs(left - 0.5) < 0.01  # 5 faces per voxel, equal areas

    def test_sample_points_lie_on_cube_faces(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[2, 1, 3] = True
        pts = vg.surface_sample(occ, 500, gc.rng(1, "onface"))
        center = vg.voxel_centers(4)[[2, 1, 3]]
        h = 2.0 / 4
        off = np.abs(pts - center.astype(np.float32))
        assert np.all(off <= h / 2 + 1e-6)
        on_face = np.isclose(off, h / 2, atol=1e-6).sum(axis=1)
        assert np.all(on_face >= 1)

    def test_sample_within_world_cube(self):
        r = gc.rng(2, "cube")
        occ = r.random((8, 8, 8)) < 0.3
        pts = vg.surface_sample(occ, 2048, gc.rng(3, "cube-pts"))
        assert pts.shape == (2048, 3) and pts.dtype == np.float32
        assert np.all(pts >= -1.0) and np.all(pts <= 1.0)

    def test_sample_empty_grid_is_error(self):
        with pytest.raises(DataError):
            vg.surface_sample(np.zeros((4, 4, 4), dtype=bool), 10, gc.rng(0))

    def test_sample_deterministic_under_seed(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1:3, 1:3, 1:3] = True
        a = vg.surface_sample(occ, 64, gc.rng(9, "s"))
        b = vg.surface_sample(occ, 64, gc.rng(9, "s"))
        np.testing.assert_array_equal(a, b)

    def test_grid_validation(self):
        with pytest.raises(ShapeError):
            vg.VoxelGrid(np.zeros((2, 3, 2), dtype=bool))
        with pytest.raises(ShapeError):
            vg.VoxelGrid(np.zeros((2, 2, 2), dtype=np.float32))


class TestCvxContainer:
    def test_round_trip(self, tmp_path):
        r = gc.rng(5, "cvx")
        occ = r.random((7, 16, 16, 16)) < 0.5
        path = tmp_path / "g.cvx"
        vg.save_cvx(path, occ)
        back = vg.load_cvx(path)
        np.testing.assert_array_equal(back, occ)

    def test_bit_layout_x_fastest_lsb_first(self, tmp_path):
        occ = np.zeros((1, 2, 2, 2), dtype=bool)
        occ[0, 1, 0, 0] = True  # flat index x + R*y + R^2*z = 1 -> bit 1 -> byte 0b10
        path = tmp_path / "bit.cvx"
        vg.save_cvx(path, occ)
        blob = path.read_bytes()
        assert blob[:4] == b"CVX1"
        version, R, count = struct.unpack("<HHI", blob[4:12])
        assert (version, R, count) == (1, 2, 1)
        assert blob[12] == 0b00000010
        assert len(blob) == 12 + 1

    def test_header_golden_bytes(self, tmp_path):
        occ = np.ones((3, 4, 4, 4), dtype=bool)
        path = tmp_path / "h.cvx"
        vg.save_cvx(path, occ)
        blob = path.read_bytes()
        assert blob[:12] == b"CVX1" + struct.pack("<HHI", 1, 4, 3)
        assert len(blob) == 12 + 3 * 8

    def test_truncated_file_rejected(self, tmp_path):
        occ = np.ones((2, 8, 8, 8), dtype=bool)
        path = tmp_path / "t.cvx"
        vg.save_cvx(path, occ)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DataError):
            vg.load_cvx(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        occ = np.ones((1, 4, 4, 4), dtype=bool)
        path = tmp_path / "x.cvx"
        vg.save_cvx(path, occ)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataError):
            vg.load_cvx(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.cvx"
        path.write_bytes(b"NOPE" + struct.pack("<HHI", 1, 4, 0))
        with pytest.raises(DataError):
            vg.load_cvx(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "v.cvx"
        path.write_bytes(b"CVX1" + struct.pack("<HHI", 9, 4, 0))
        with pytest.raises(DataError):
            vg.load_cvx(path)

    def test_mixed_resolution_rejected(self, tmp_path):
        grids = [vg.VoxelGrid(np.zeros((4, 4, 4), dtype=bool)),
                 vg.VoxelGrid(np.zeros((8, 8, 8), dtype=bool))]
        with pytest.raises(ShapeError):
            vg.save_cvx(tmp_path / "m.cvx", grids)

    def test_order_preserved(self, tmp_path):
        r = gc.rng(6, "order")
        occ = r.random((5, 4, 4, 4)) < 0.5
        path = tmp_path / "o.cvx"
        vg.save_cvx(path, [vg.VoxelGrid(occ[i]) for i in range(5)])
        back = vg.load_cvx(path)
        np.testing.assert_array_equal(back, occ)
