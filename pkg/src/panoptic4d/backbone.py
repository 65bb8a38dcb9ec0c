"""Multi-scale voxel feature extractor.

A U-shaped pooling/MLP network over integer voxel coordinates: the encoder
repeatedly merges voxels into parents at 2x coarser coordinates (mean over
children, then a learned transform), the decoder broadcasts coarse features
back to children and fuses them with the encoder skip. The output is one
feature set per resolution with the finest level refined last, behind an
interface that a convolutional backbone could also satisfy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError
from .geometry import VoxelGrid, unique_rows_first_occurrence
from .nn import MLP, collect_parameters

SEED_DIM = 5  # corner offset (3) + normalized mean frame + log member count


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    widths: tuple[int, ...] = (32, 64, 96, 128)
    seed_dim: int = SEED_DIM

    def __post_init__(self):
        if self.depth < 1:
            raise ParameterError("backbone depth must be >= 1")
        if len(self.widths) != self.depth:
            raise ParameterError(
                f"got {len(self.widths)} widths for depth {self.depth}"
            )
        if any(w <= 0 for w in self.widths) or self.seed_dim <= 0:
            raise ParameterError("backbone widths must be positive")


@dataclass
class PyramidLevel:
    coords: np.ndarray  # (K_r, 3) int voxel coordinates at this resolution
    features: Tensor  # (K_r, D_r)
    positions: np.ndarray  # (K_r, 3) meters, mean of member voxel centroids
    frame: np.ndarray  # (K_r,) mean frame index
    parent_map: np.ndarray | None  # (K_r,) index into the next coarser level


@dataclass
class FeaturePyramid:
    """levels[0] is the finest resolution and aligns 1:1 with the VoxelGrid."""

    levels: list[PyramidLevel]

    @property
    def depth(self) -> int:
        return len(self.levels)


def seed_features(grid: VoxelGrid, window_frames: list[int]) -> np.ndarray:
    """Per-voxel input features: position inside the voxel, time, and density.

    The geometric part is translation invariant (offset of the centroid from
    the voxel corner, in voxel units); the mean frame index is normalized to
    [0, 1] over the window; the member count enters log-scaled.
    """
    if not window_frames:
        raise ParameterError("window_frames must be non-empty")
    corner = grid.voxel_coords * grid.voxel_size
    offset = (grid.voxel_centroids - corner) / grid.voxel_size
    f0, f1 = min(window_frames), max(window_frames)
    span = max(1, f1 - f0)
    frame_feat = (grid.voxel_frame - f0) / span
    counts = np.array([len(g) for g in grid.voxel_to_points], dtype=np.float64)
    return np.column_stack([offset, frame_feat, np.log1p(counts)])


class Backbone:
    def __init__(self, rng: np.random.Generator, config: BackboneConfig = BackboneConfig()):
        self.config = config
        widths = config.widths
        self.encoders = []
        prev = config.seed_dim
        for w in widths:
            self.encoders.append(MLP(rng, [prev, w, w]))
            prev = w
        # One fuse MLP per non-coarsest level: concat(skip, parent) -> width.
        self.decoders = [
            MLP(rng, [widths[r] + widths[r + 1], widths[r], widths[r]])
            for r in range(config.depth - 1)
        ]

    def parameters(self) -> dict[str, Tensor]:
        mods: dict[str, object] = {}
        for r, enc in enumerate(self.encoders):
            mods[f"enc{r}"] = enc
        for r, dec in enumerate(self.decoders):
            mods[f"dec{r}"] = dec
        return collect_parameters(mods)

    def extract(self, grid: VoxelGrid, seed: Tensor) -> FeaturePyramid:
        if seed.shape[0] != grid.num_voxels:
            raise ShapeError(
                f"seed has {seed.shape[0]} rows for {grid.num_voxels} voxels"
            )
        depth = self.config.depth

        coords = [grid.voxel_coords]
        positions = [grid.voxel_centroids]
        frames = [grid.voxel_frame]
        parent_maps: list[np.ndarray] = []
        for r in range(1, depth):
            parents, inverse = unique_rows_first_occurrence(coords[r - 1] // 2)
            parent_maps.append(inverse)
            k = parents.shape[0]
            counts = np.bincount(inverse, minlength=k).astype(np.float64)
            pos = np.zeros((k, 3))
            for axis in range(3):
                pos[:, axis] = np.bincount(inverse, weights=positions[r - 1][:, axis], minlength=k)
            coords.append(parents)
            positions.append(pos / counts[:, None])
            frames.append(np.bincount(inverse, weights=frames[r - 1], minlength=k) / counts)

        encoded = [self.encoders[0](seed)]
        for r in range(1, depth):
            pooled = ad.segment_mean(encoded[r - 1], parent_maps[r - 1], coords[r].shape[0])
            encoded.append(self.encoders[r](pooled))

        decoded = [None] * depth
        decoded[depth - 1] = encoded[depth - 1]
        for r in range(depth - 2, -1, -1):
            broadcast = ad.gather_rows(decoded[r + 1], parent_maps[r])
            decoded[r] = self.decoders[r](ad.concat([encoded[r], broadcast], axis=1))

        levels = []
        for r in range(depth):
            levels.append(
                PyramidLevel(
                    coords=coords[r],
                    features=decoded[r],
                    positions=positions[r],
                    frame=frames[r],
                    parent_map=parent_maps[r] if r < depth - 1 else None,
                )
            )
        return FeaturePyramid(levels=levels)
