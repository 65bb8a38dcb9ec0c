"""Binary scan / label / pose file I/O in the SemanticKITTI directory layout.

Formats:
  - scan (.bin): little-endian float32 records of (x, y, z, intensity).
  - label (.label): little-endian uint32 records, semantic in the lower 16
    bits, instance in the upper 16 bits.
  - poses.txt: one scan per line, 12 whitespace-separated floats, the
    row-major 3x4 [R|t] matrix of the KITTI odometry convention.

Directory layout of a sequence:
  <sequence>/velodyne/NNNNNN.bin
  <sequence>/labels/NNNNNN.label
  <sequence>/poses.txt
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ArityError, FormatError, ParameterError
from .geometry import Pose

SCAN_RECORD_BYTES = 16  # four float32 per point
LABEL_RECORD_BYTES = 4


def pack_label(semantic: int, instance: int) -> int:
    """Pack (semantic, instance) into one uint32: instance * 65536 + semantic."""
    if not 0 <= semantic < 2**16:
        raise ParameterError(f"semantic id {semantic} does not fit in 16 bits")
    if not 0 <= instance < 2**16:
        raise ParameterError(f"instance id {instance} does not fit in 16 bits")
    return instance * 65536 + semantic


def unpack_label(raw: int) -> tuple[int, int]:
    """Inverse of pack_label: returns (semantic, instance)."""
    if not 0 <= raw < 2**32:
        raise ParameterError(f"label value {raw} does not fit in 32 bits")
    return raw & 0xFFFF, raw >> 16


def pack_labels(semantic: np.ndarray, instance: np.ndarray) -> np.ndarray:
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if semantic.shape != instance.shape:
        raise ArityError("semantic and instance arrays differ in length")
    if semantic.size and (semantic.min() < 0 or semantic.max() >= 2**16):
        raise ParameterError("semantic ids must fit in 16 bits")
    if instance.size and (instance.min() < 0 or instance.max() >= 2**16):
        raise ParameterError("instance ids must fit in 16 bits")
    return (instance.astype(np.uint32) << 16) | semantic.astype(np.uint32)


def unpack_labels(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw, dtype=np.uint32)
    return (raw & 0xFFFF).astype(np.int64), (raw >> 16).astype(np.int64)


def write_scan(path: str, points: np.ndarray, intensity: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    rec = np.zeros((points.shape[0], 4), dtype="<f4")
    rec[:, :3] = points
    if intensity is not None:
        intensity = np.asarray(intensity, dtype=np.float32).reshape(-1)
        if intensity.shape[0] != points.shape[0]:
            raise ArityError("intensity length does not match point count")
        rec[:, 3] = intensity
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def read_scan(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a .bin scan; returns (points (N,3) float32, intensity (N,) float32)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) % SCAN_RECORD_BYTES != 0:
        raise FormatError(
            f"scan file {path} is not a whole number of 16-byte records",
            byte_offset=len(blob) - len(blob) % SCAN_RECORD_BYTES,
        )
    rec = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
    return rec[:, :3].copy(), rec[:, 3].copy()


def write_labels(path: str, semantic: np.ndarray, instance: np.ndarray) -> None:
    raw = pack_labels(semantic, instance)
    with open(path, "wb") as f:
        f.write(raw.astype("<u4").tobytes())


def read_labels(path: str, expected_count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read a .label file; returns (semantic, instance) int64 arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) % LABEL_RECORD_BYTES != 0:
        raise FormatError(
            f"label file {path} is not a whole number of 4-byte records",
            byte_offset=len(blob) - len(blob) % LABEL_RECORD_BYTES,
        )
    raw = np.frombuffer(blob, dtype="<u4")
    if expected_count is not None and raw.shape[0] != expected_count:
        raise ArityError(
            f"label file {path} has {raw.shape[0]} records, expected {expected_count}"
        )
    return unpack_labels(raw)


def write_poses(path: str, poses: list[Pose]) -> None:
    lines = []
    for pose in poses:
        mat = np.hstack([pose.rotation, pose.translation.reshape(3, 1)])
        lines.append(" ".join("%.17g" % v for v in mat.reshape(-1)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_poses(path: str) -> list[Pose]:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != 12:
                raise FormatError(
                    f"pose line {lineno} of {path} has {len(vals)} fields, expected 12"
                )
            try:
                mat = np.array([float(v) for v in vals]).reshape(3, 4)
            except ValueError as exc:
                raise FormatError(f"pose line {lineno} of {path}: {exc}") from exc
            poses.append(Pose(mat[:, :3], mat[:, 3]))
    return poses


def scan_path(sequence_dir: str, frame: int) -> str:
    return os.path.join(sequence_dir, "velodyne", f"{frame:06d}.bin")


def label_path(sequence_dir: str, frame: int) -> str:
    return os.path.join(sequence_dir, "labels", f"{frame:06d}.label")


def poses_path(sequence_dir: str) -> str:
    return os.path.join(sequence_dir, "poses.txt")


def list_frames(sequence_dir: str) -> list[int]:
    """Frame indices present under velodyne/, sorted ascending."""
    scan_dir = os.path.join(sequence_dir, "velodyne")
    if not os.path.isdir(scan_dir):
        raise FormatError(f"{sequence_dir} has no velodyne/ directory")
    frames = []
    for name in os.listdir(scan_dir):
        if name.endswith(".bin"):
            try:
                frames.append(int(name[:-4]))
            except ValueError:
                raise FormatError(f"unexpected scan file name {name!r}")
    return sorted(frames)
