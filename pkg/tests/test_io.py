import numpy as np
import pytest

from panoptic4d import kitti_io
from panoptic4d.errors import ArityError, FormatError, ParameterError
from panoptic4d.geometry import Pose, rot_z
from panoptic4d.sequence import ClassMap, load_sequence, save_sequence
from panoptic4d.synth import SceneSpec, generate_sequence


class TestPackLabel:
    def test_known_value(self):
        assert kitti_io.pack_label(10, 3) == 196618

    def test_zero(self):
        assert kitti_io.pack_label(0, 0) == 0
        assert kitti_io.unpack_label(0) == (0, 0)

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            s = int(rng.integers(0, 2**16))
            i = int(rng.integers(0, 2**16))
            assert kitti_io.unpack_label(kitti_io.pack_label(s, i)) == (s, i)

    def test_overflow(self):
        with pytest.raises(ParameterError):
            kitti_io.pack_label(2**16, 0)
        with pytest.raises(ParameterError):
            kitti_io.pack_label(0, 2**16)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(1)
        sem = rng.integers(0, 2**16, size=50)
        inst = rng.integers(0, 2**16, size=50)
        raw = kitti_io.pack_labels(sem, inst)
        for k in range(50):
            assert int(raw[k]) == kitti_io.pack_label(int(sem[k]), int(inst[k]))
        s2, i2 = kitti_io.unpack_labels(raw)
        np.testing.assert_array_equal(s2, sem)
        np.testing.assert_array_equal(i2, inst)


class TestScanFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(5, 3)).astype(np.float32)
        path = str(tmp_path / "scan.bin")
        kitti_io.write_scan(path, pts)
        back, intensity = kitti_io.read_scan(path)
        np.testing.assert_array_equal(back, pts)
        np.testing.assert_array_equal(intensity, np.zeros(5, dtype=np.float32))

    def test_byte_identical_rewrite(self, tmp_path):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(20, 3))
        a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        kitti_io.write_scan(a, pts)
        back, inten = kitti_io.read_scan(a)
        kitti_io.write_scan(b, back, inten)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_malformed_length(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 17)
        with pytest.raises(FormatError) as exc:
            kitti_io.read_scan(str(path))
        assert exc.value.byte_offset == 16


class TestLabelFiles:
    def test_round_trip_and_count_check(self, tmp_path):
        path = str(tmp_path / "x.label")
        sem = np.array([1, 2, 3], dtype=np.int64)
        inst = np.array([0, 7, 7], dtype=np.int64)
        kitti_io.write_labels(path, sem, inst)
        s, i = kitti_io.read_labels(path, expected_count=3)
        np.testing.assert_array_equal(s, sem)
        np.testing.assert_array_equal(i, inst)
        with pytest.raises(ArityError):
            kitti_io.read_labels(path, expected_count=4)
        with pytest.raises(ArityError):
            kitti_io.read_labels(path, expected_count=2)

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.label"
        path.write_bytes(b"\x01\x02\x03")
        with pytest.raises(FormatError):
            kitti_io.read_labels(str(path))


class TestPoseFiles:
    def test_round_trip_exact(self, tmp_path):
        poses = [
            Pose(rot_z(0.3), [1.25, -3.5, 0.125]),
            Pose(rot_z(-1.2), [100.0, 0.001, -7.0]),
        ]
        path = str(tmp_path / "poses.txt")
        kitti_io.write_poses(path, poses)
        back = kitti_io.read_poses(path)
        assert len(back) == 2
        for a, b in zip(poses, back):
            np.testing.assert_array_equal(a.rotation, b.rotation)
            np.testing.assert_array_equal(a.translation, b.translation)
        # rewrite is byte-identical
        path2 = str(tmp_path / "poses2.txt")
        kitti_io.write_poses(path2, back)
        assert open(path).read() == open(path2).read()

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("1 0 0 0 1 0\n")
        with pytest.raises(FormatError):
            kitti_io.read_poses(str(path))


class TestSequenceRoundTrip:
    def test_save_load(self, tmp_path):
        seq = generate_sequence(SceneSpec(seed=5, num_frames=3))
        out = str(tmp_path / "seq")
        save_sequence(seq, out)
        back = load_sequence(out, seq.class_map)
        assert back.num_frames == 3
        for a, b in zip(seq.scans, back.scans):
            np.testing.assert_array_equal(
                a.points.astype(np.float32), b.points.astype(np.float32)
            )
            np.testing.assert_array_equal(a.semantic, b.semantic)
            np.testing.assert_array_equal(a.instance, b.instance)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FormatError):
            load_sequence(str(tmp_path / "nope"), ClassMap((1,), (3,)))

    def test_pose_count_mismatch(self, tmp_path):
        seq = generate_sequence(SceneSpec(seed=6, num_frames=3))
        out = str(tmp_path / "seq")
        save_sequence(seq, out)
        kitti_io.write_poses(kitti_io.poses_path(out), seq.poses[:2])
        with pytest.raises(ArityError):
            load_sequence(out, seq.class_map)
