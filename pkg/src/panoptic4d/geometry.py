"""Point-cloud primitives: rigid transforms, scan superposition, voxelization,
farthest point sampling, and trajectory bounding boxes.

All operations are pure functions over immutable inputs; none of them keeps
shared mutable state, so concurrent calls are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArityError,
    EmptyInstanceError,
    InvalidPoseError,
    ParameterError,
)

ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """Rigid body transform: world_point = rotation @ point + translation.

    rotation must be orthonormal with determinant +1 (within 1e-6).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def validate(self) -> None:
        r = self.rotation
        if r.shape != (3, 3):
            raise InvalidPoseError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL):
            raise InvalidPoseError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidPoseError("rotation determinant is not +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


def rot_z(angle_rad: float) -> np.ndarray:
    """Rotation matrix about the +z axis."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class LidarScan:
    """One LiDAR sweep in the sensor frame, with optional per-point labels."""

    points: np.ndarray  # (N, 3) meters, sensor frame
    frame_index: int
    semantic: np.ndarray | None = None  # (N,) int
    instance: np.ndarray | None = None  # (N,) int, 0 for stuff

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.frame_index < 0:
            raise ParameterError("frame_index must be >= 0")
        for name in ("semantic", "instance"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64).reshape(-1)
                if arr.shape[0] != self.points.shape[0]:
                    raise ArityError(
                        f"{name} has {arr.shape[0]} entries for {self.points.shape[0]} points"
                    )
                setattr(self, name, arr)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def has_labels(self) -> bool:
        return self.semantic is not None and self.instance is not None


@dataclass
class SuperimposedCloud:
    """Several ego-pose-aligned scans concatenated into one global-frame point set."""

    points: np.ndarray  # (M, 3) global frame
    frame_of: np.ndarray  # (M,) source frame index
    source_point: np.ndarray  # (M, 2) rows of (scan position in window, point index)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned (min, max) corners of the cloud."""
        if self.num_points == 0:
            raise EmptyInstanceError("extent of an empty cloud is undefined")
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass
class VoxelGrid:
    """Regular cubic voxelization of a superimposed cloud.

    point_to_voxel and voxel_to_points are mutually inverse; voxel_coords rows
    are unique and listed in first-occurrence order of the input points.
    """

    voxel_coords: np.ndarray  # (K0, 3) int
    voxel_size: float
    point_to_voxel: np.ndarray  # (M,) int
    voxel_to_points: list[np.ndarray] = field(repr=False)
    voxel_centroids: np.ndarray = field(repr=False)  # (K0, 3) meters
    voxel_frame: np.ndarray = field(repr=False)  # (K0,) mean frame index

    @property
    def num_voxels(self) -> int:
        return self.voxel_coords.shape[0]


@dataclass(frozen=True)
class TrajectoryBox:
    """Axis-aligned box of an instance trajectory, normalized to [0, 1]."""

    center: np.ndarray  # (3,) x, y, z
    dims: np.ndarray  # (3,) w, h, d

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.center), np.asarray(self.dims)])


def apply_pose(scan: LidarScan, pose: Pose) -> np.ndarray:
    """Transform a scan's points into the global frame.

    Raises InvalidPoseError if the rotation is not a proper rotation.
    """
    pose.validate()
    return pose.apply(scan.points)


def superimpose(scans: list[LidarScan], poses: list[Pose]) -> SuperimposedCloud:
    """Concatenate pose-transformed scans into one spatio-temporal point set."""
    if len(scans) != len(poses):
        raise ArityError(f"{len(scans)} scans but {len(poses)} poses")
    if not scans:
        raise ParameterError("need at least one scan")
    parts, frames, sources = [], [], []
    for slot, (scan, pose) in enumerate(zip(scans, poses)):
        pts = apply_pose(scan, pose)
        parts.append(pts)
        frames.append(np.full(scan.num_points, scan.frame_index, dtype=np.int64))
        src = np.empty((scan.num_points, 2), dtype=np.int64)
        src[:, 0] = slot
        src[:, 1] = np.arange(scan.num_points)
        sources.append(src)
    return SuperimposedCloud(
        points=np.concatenate(parts, axis=0) if parts else np.zeros((0, 3)),
        frame_of=np.concatenate(frames),
        source_point=np.concatenate(sources, axis=0),
    )


def unique_rows_first_occurrence(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique rows in order of first occurrence, plus the inverse mapping."""
    uniq, first_pos, inverse = np.unique(
        coords, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.reshape(-1)
    # np.unique sorts lexicographically; remap to first-occurrence order.
    order = np.argsort(first_pos, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return uniq[order], rank[inverse]


def voxelize(cloud: SuperimposedCloud, voxel_size: float) -> VoxelGrid:
    """Assign each point to the voxel floor(p / voxel_size), componentwise.

    Voxels are enumerated in first-occurrence order. Centroids and mean frame
    indices are averaged over member points.
    """
    if voxel_size <= 0:
        raise ParameterError(f"voxel_size must be > 0, got {voxel_size}")
    coords = np.floor(cloud.points / voxel_size).astype(np.int64)
    voxel_coords, point_to_voxel = unique_rows_first_occurrence(coords)

    k = voxel_coords.shape[0]
    counts = np.bincount(point_to_voxel, minlength=k).astype(np.float64)
    centroids = np.zeros((k, 3))
    for axis in range(3):
        centroids[:, axis] = np.bincount(
            point_to_voxel, weights=cloud.points[:, axis], minlength=k
        )
    centroids /= counts[:, None]
    frame = np.bincount(
        point_to_voxel, weights=cloud.frame_of.astype(np.float64), minlength=k
    ) / counts

    member_order = np.argsort(point_to_voxel, kind="stable")
    boundaries = np.cumsum(counts.astype(np.int64))[:-1]
    voxel_to_points = [np.sort(g) for g in np.split(member_order, boundaries)]
    return VoxelGrid(
        voxel_coords=voxel_coords,
        voxel_size=float(voxel_size),
        point_to_voxel=point_to_voxel,
        voxel_to_points=voxel_to_points,
        voxel_centroids=centroids,
        voxel_frame=frame,
    )


def farthest_point_sampling(points: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    The first pick is seed_index; every later pick maximizes the minimum
    distance to the points already chosen, ties broken by lowest index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    if not 0 <= seed_index < n:
        raise ParameterError(f"seed_index must be in [0, {n}), got {seed_index}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    min_dist = np.linalg.norm(points - points[seed_index], axis=1)
    for i in range(1, k):
        # np.argmax returns the first maximum, which is the lowest index.
        nxt = int(np.argmax(min_dist))
        chosen[i] = nxt
        min_dist = np.minimum(min_dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def trajectory_box(
    points: np.ndarray,
    extent_min: np.ndarray,
    extent_max: np.ndarray,
) -> TrajectoryBox:
    """Axis-aligned bounds of an instance point set, normalized to a reference extent.

    center = (box midpoint - extent_min) / extent_size, dims = box size / extent_size.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyInstanceError("cannot build a trajectory box from zero points")
    extent_min = np.asarray(extent_min, dtype=np.float64).reshape(3)
    extent_max = np.asarray(extent_max, dtype=np.float64).reshape(3)
    size = extent_max - extent_min
    if np.any(size <= 0):
        raise ParameterError("reference extent must have positive size on each axis")
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = ((lo + hi) / 2.0 - extent_min) / size
    dims = (hi - lo) / size
    return TrajectoryBox(center=center, dims=dims)
