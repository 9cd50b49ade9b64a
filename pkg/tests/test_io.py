import json
import struct

import numpy as np
import pytest

from seele import io
from seele.compiler import ClusteredScene, CompileParams
from seele.errors import CorruptionError, DataError, SchemaError
from seele.model import sigmoid

from support import make_camera, random_scene, scene_to_ply_bytes, write_scene_ply


def minimal_ply(n=1, drop=None, rest=45, corrupt_record=None):
    props = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    props += [f"f_rest_{i}" for i in range(rest)]
    props += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    if drop:
        props.remove(drop)
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {n}\n"
    header += "".join(f"property float {p}\n" for p in props)
    header += "end_header\n"
    body = bytearray()
    for i in range(n):
        values = [0.0] * len(props)
        values[props.index("rot_0")] = 1.0
        if corrupt_record == i:
            values[0] = float("nan")
        body += struct.pack(f"<{len(props)}f", *values)
    return header.encode("ascii") + bytes(body)


class TestLoadPly:
    def test_single_zero_vertex(self, tmp_path):
        path = tmp_path / "one.ply"
        path.write_bytes(minimal_ply())
        scene = io.load_ply(path)
        assert len(scene.gaussians) == 1
        assert scene.sh_degree == 3
        g = scene.gaussians[0]
        assert g.opacity == pytest.approx(sigmoid(0.0))
        np.testing.assert_allclose(g.rotation, [1, 0, 0, 0], atol=0)

    def test_missing_opacity_names_property(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(minimal_ply(drop="opacity"))
        with pytest.raises(SchemaError, match="opacity"):
            io.load_ply(path)

    def test_non_finite_names_record(self, tmp_path):
        path = tmp_path / "nan.ply"
        path.write_bytes(minimal_ply(n=3, corrupt_record=2))
        with pytest.raises(DataError, match="record 2"):
            io.load_ply(path)

    @pytest.mark.parametrize("rest,degree", [(0, 0), (9, 1), (24, 2), (45, 3)])
    def test_degree_inference(self, tmp_path, rest, degree):
        path = tmp_path / "deg.ply"
        path.write_bytes(minimal_ply(rest=rest))
        assert io.load_ply(path).sh_degree == degree

    def test_round_trip_hundred_vertices(self, tmp_path):
        rng = np.random.default_rng(42)
        arrays = random_scene(rng, 100, sh_degree=3)
        path = tmp_path / "scene.ply"
        write_scene_ply(arrays, path, sh_degree=3)
        scene = io.load_ply(path)
        loaded = scene.arrays()
        np.testing.assert_allclose(loaded.positions, arrays.positions, atol=1e-6)
        np.testing.assert_allclose(loaded.log_scales, arrays.log_scales, atol=1e-6)
        np.testing.assert_allclose(loaded.rotations, arrays.rotations, atol=1e-6)
        np.testing.assert_allclose(loaded.opacities, arrays.opacities, atol=1e-6)
        np.testing.assert_allclose(loaded.sh, arrays.sh, atol=1e-6)

    def test_extreme_opacity_logits_stay_in_open_interval(self, tmp_path):
        raw = bytearray(minimal_ply(n=2))
        # Patch the opacity field of both records in place.
        props = 6 + 45 + 1 + 3 + 4
        header_len = len(raw) - 2 * props * 4
        for record, logit_value in ((0, 100.0), (1, -800.0)):
            offset = header_len + (record * props + 6 + 45) * 4
            raw[offset : offset + 4] = struct.pack("<f", logit_value)
        path = tmp_path / "extreme.ply"
        path.write_bytes(bytes(raw))
        scene = io.load_ply(path)
        for g in scene.gaussians:
            assert 0.0 < g.opacity < 1.0


class TestCameras:
    def test_empty_array(self, tmp_path):
        path = tmp_path / "cams.json"
        path.write_text("[]")
        assert io.load_cameras(path) == []

    def test_orientation_normalized(self, tmp_path):
        path = tmp_path / "cams.json"
        path.write_text(
            json.dumps(
                [
                    {
                        "position": [0, 0, 0],
                        "orientation_wxyz": [2, 0, 0, 0],
                        "fov_x": 1.0,
                        "fov_y": 1.0,
                        "width": 64,
                        "height": 64,
                    }
                ]
            )
        )
        poses = io.load_cameras(path)
        np.testing.assert_allclose(poses[0].orientation, [1, 0, 0, 0], atol=0)
        assert poses[0].near_clip == pytest.approx(0.2)

    def test_degenerate_orientation(self, tmp_path):
        path = tmp_path / "cams.json"
        path.write_text(
            json.dumps(
                [
                    {
                        "position": [0, 0, 0],
                        "orientation_wxyz": [0, 0, 0, 0],
                        "fov_x": 1.0,
                        "fov_y": 1.0,
                        "width": 64,
                        "height": 64,
                    }
                ]
            )
        )
        with pytest.raises(DataError):
            io.load_cameras(path)

    def test_round_trip_random_poses(self, tmp_path):
        rng = np.random.default_rng(5)
        poses = []
        for _ in range(10):
            q = rng.normal(size=4)
            poses.append(
                make_camera(
                    position=rng.normal(size=3), orientation=q / np.linalg.norm(q)
                )
            )
        path = tmp_path / "cams.json"
        io.write_cameras(poses, path)
        loaded = io.load_cameras(path)
        for a, b in zip(poses, loaded):
            np.testing.assert_allclose(a.position, b.position, atol=1e-6)
            np.testing.assert_allclose(a.orientation, b.orientation, atol=1e-6)
            assert a.fov_x == pytest.approx(b.fov_x, abs=1e-6)


def build_partition(arrays, n_clusters=2, shared=(), exclusives=None, discarded=()):
    all_ids = set(range(len(arrays)))
    exclusives = exclusives or [[] for _ in range(n_clusters)]
    used = set(shared) | set(discarded)
    for ids in exclusives:
        used |= set(ids)
    assert used == all_ids
    return ClusteredScene(
        shared_ids=np.asarray(sorted(shared), dtype=np.int64),
        exclusive_ids=[np.asarray(sorted(ids), dtype=np.int64) for ids in exclusives],
        discarded_ids=np.asarray(sorted(discarded), dtype=np.int64),
        centroids=np.arange(n_clusters * 6, dtype=np.float64).reshape(n_clusters, 6),
        params=CompileParams(num_clusters=n_clusters),
        pose_assignments=np.zeros(0, dtype=np.int64),
    )


class TestClusteredContainer:
    def make(self, tmp_path, n=12):
        rng = np.random.default_rng(9)
        arrays = random_scene(rng, n, sh_degree=3)
        partition = build_partition(
            arrays,
            shared=range(0, 4),
            exclusives=[range(4, 8), range(8, 11)],
            discarded=[11],
        )
        return arrays, io.write_clustered_scene(partition, arrays, tmp_path / "scene")

    def test_manifest_round_trip(self, tmp_path):
        _, written = self.make(tmp_path)
        handle = io.load_clustered_scene(written.directory)
        assert handle.num_clusters == 2
        np.testing.assert_allclose(
            handle.centroids, np.arange(12, dtype=np.float64).reshape(2, 6), atol=0
        )
        man = handle.manifest
        assert man["shared"]["count"] == 4
        assert [c["count"] for c in man["clusters"]] == [4, 3]
        assert man["discarded_count"] == 1
        assert man["k"] == 32 and man["beta"] == 1.0

    def test_lazy_byte_accounting(self, tmp_path):
        _, written = self.make(tmp_path)
        handle = io.load_clustered_scene(written.directory)
        assert handle.resident_bytes() == 0
        handle.shared()
        handle.cluster(0)
        expected = (4 + 4) * io.BYTES_PER_GAUSSIAN
        assert handle.resident_bytes() == expected
        handle.evict(0)
        assert handle.resident_bytes() == 4 * io.BYTES_PER_GAUSSIAN

    def test_chunk_payload_round_trip(self, tmp_path):
        arrays, written = self.make(tmp_path)
        handle = io.load_clustered_scene(written.directory)
        chunk = handle.cluster(0)
        np.testing.assert_array_equal(chunk.ids, np.arange(4, 8))
        np.testing.assert_allclose(chunk.positions, arrays.positions[4:8], atol=1e-5)
        np.testing.assert_allclose(chunk.opacities, arrays.opacities[4:8], atol=1e-5)

    def test_truncated_chunk(self, tmp_path):
        _, written = self.make(tmp_path)
        chunk_path = written.directory / "cluster_001.bin"
        chunk_path.write_bytes(chunk_path.read_bytes()[:-8])
        handle = io.load_clustered_scene(written.directory)
        with pytest.raises(CorruptionError, match="1"):
            handle.cluster(1)

    def test_manifest_count_mismatch(self, tmp_path):
        _, written = self.make(tmp_path)
        manifest = json.loads((written.directory / "manifest.json").read_text())
        manifest["num_clusters"] = 3
        (written.directory / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CorruptionError):
            io.load_clustered_scene(written.directory)

    def test_partition_validator(self, tmp_path):
        _, written = self.make(tmp_path)
        handle = io.load_clustered_scene(written.directory)
        io.validate_clustered_scene(handle)

    def test_partition_validator_catches_duplicates(self, tmp_path):
        arrays, written = self.make(tmp_path)
        # Rewrite cluster 1 with ids overlapping the shared chunk.
        dup = arrays.take(np.array([0, 1, 2]))
        (written.directory / "cluster_001.bin").write_bytes(io._encode_chunk(dup))
        manifest = json.loads((written.directory / "manifest.json").read_text())
        manifest["clusters"][1]["count"] = 3
        (written.directory / "manifest.json").write_text(json.dumps(manifest))
        handle = io.load_clustered_scene(written.directory)
        with pytest.raises(CorruptionError, match="appears in chunks"):
            io.validate_clustered_scene(handle)


class TestImages:
    def test_all_zero_is_black(self, tmp_path):
        path = tmp_path / "black.png"
        io.write_image(np.zeros((20, 24, 3)), path)
        loaded = io.load_image(path)
        assert loaded.shape == (20, 24, 3)
        assert loaded.max() == 0.0

    def test_unit_value_is_255(self, tmp_path):
        data = io.quantize_image(np.ones((4, 4, 3)))
        assert data.max() == data.min() == 255

    def test_half_rounds_up(self):
        data = io.quantize_image(np.full((2, 2, 3), 0.5))
        assert int(data[0, 0, 0]) == 128

    def test_clamps_out_of_range(self):
        data = io.quantize_image(np.array([[[-0.5, 1.5, 0.25]]]))
        assert data.tolist() == [[[0, 255, 64]]]

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.random((16, 16, 3))
        path = tmp_path / "img.ppm"
        io.write_image(img, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n16 16\n255\n")
        quantized = io.quantize_image(img)
        assert raw[len(b"P6\n16 16\n255\n"):] == quantized.tobytes()

    def test_png_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.random((16, 16, 3))
        path = tmp_path / "img.png"
        io.write_image(img, path)
        loaded = io.load_image(path)
        np.testing.assert_array_equal(
            io.quantize_image(loaded), io.quantize_image(img)
        )
