"""The assembled network: window preparation, backbone, query refinement, and
mask predictions, plus checkpoint save/load with an embedded config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, FeaturePyramid, seed_features
from .decoder import (
    DecoderConfig,
    FourierEncoder,
    QueryRefiner,
    QuerySet,
    WindowContext,
    init_queries,
)
from .errors import ParameterError
from .geometry import LidarScan, Pose, SuperimposedCloud, VoxelGrid, superimpose, voxelize
from .heads import MaskModule, MaskModuleOutput, Targets, build_targets
from .sequence import ClassMap


@dataclass(frozen=True)
class ModelConfig:
    voxel_size: float = 0.05
    window: int = 2  # scans superimposed per spatio-temporal cloud
    num_queries: int = 100
    dim: int = 64
    num_heads: int = 4
    num_rounds: int = 3
    ffn_width: int = 128
    mask_threshold: float = 0.5
    num_frequencies: int = 6
    freq_base: float = 2.0
    backbone_depth: int = 4
    backbone_widths: tuple[int, ...] = (32, 64, 96, 128)
    thing_classes: tuple[int, ...] = (1, 2)
    stuff_classes: tuple[int, ...] = (3, 4)
    query_seed: int = 0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ParameterError("voxel_size must be positive")
        if self.window < 1:
            raise ParameterError("window must be >= 1")
        if self.num_queries < 1:
            raise ParameterError("need at least one query")

    def class_map(self) -> ClassMap:
        return ClassMap(thing_ids=self.thing_classes, stuff_ids=self.stuff_classes)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            dim=self.dim,
            num_heads=self.num_heads,
            num_rounds=self.num_rounds,
            ffn_width=self.ffn_width,
            mask_threshold=self.mask_threshold,
            num_frequencies=self.num_frequencies,
            freq_base=self.freq_base,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(depth=self.backbone_depth, widths=self.backbone_widths)


@dataclass
class WindowData:
    """One prepared inference/training window."""

    frames: list[int]
    scans: list[LidarScan]
    cloud: SuperimposedCloud
    grid: VoxelGrid
    seed: np.ndarray  # (K0, SEED_DIM)
    ctx: WindowContext

    def point_labels(self) -> tuple[np.ndarray, np.ndarray]:
        """Per superimposed point (semantic, instance) pulled from the scans."""
        sem = np.concatenate([s.semantic for s in self.scans])
        inst = np.concatenate([s.instance for s in self.scans])
        return sem, inst


def prepare_window(
    scans: list[LidarScan], poses: list[Pose], voxel_size: float
) -> WindowData:
    cloud = superimpose(scans, poses)
    grid = voxelize(cloud, voxel_size)
    frames = [s.frame_index for s in scans]
    ext_min, ext_max = cloud.extent()
    ctx = WindowContext(
        extent_min=ext_min,
        extent_max=ext_max,
        frame_lo=min(frames),
        frame_hi=max(frames),
    )
    return WindowData(
        frames=frames,
        scans=scans,
        cloud=cloud,
        grid=grid,
        seed=seed_features(grid, frames),
        ctx=ctx,
    )


@dataclass
class ForwardResult:
    outputs: list[MaskModuleOutput]  # one per refinement step plus the initial one
    queries: QuerySet
    pyramid: FeaturePyramid

    @property
    def final(self) -> MaskModuleOutput:
        return self.outputs[-1]


class PanopticModel:
    """Backbone + query refinement + mask module over one window."""

    def __init__(self, config: ModelConfig, init_seed: int = 0):
        self.config = config
        self.class_map = config.class_map()
        rng = np.random.Generator(np.random.PCG64(init_seed))
        dec_cfg = config.decoder_config()
        self.backbone = Backbone(rng, config.backbone_config())
        self.fourier = FourierEncoder(rng, dec_cfg.pos_enc())
        self.refiner = QueryRefiner(rng, dec_cfg, config.backbone_widths)
        self.mask_module = MaskModule(
            rng,
            dim=config.dim,
            finest_width=config.backbone_widths[0],
            num_classes=self.class_map.num_classes,
        )
        self.query_bias = Tensor(np.zeros(config.dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"query_bias": self.query_bias}
        for prefix, module in (
            ("backbone", self.backbone),
            ("fourier", self.fourier),
            ("refiner", self.refiner),
            ("mask", self.mask_module),
        ):
            for name, p in module.parameters().items():
                params[f"{prefix}.{name}"] = p
        return params

    def forward(self, window: WindowData) -> ForwardResult:
        pyramid = self.backbone.extract(window.grid, Tensor(window.seed))
        queries = init_queries(
            window.grid,
            self.config.num_queries,
            self.fourier,
            self.query_bias,
            window.ctx,
            seed=self.config.query_seed,
        )
        final_queries, outputs = self.refiner.refine(
            queries, pyramid, self.mask_module, self.fourier, window.ctx
        )
        return ForwardResult(outputs=outputs, queries=final_queries, pyramid=pyramid)

    def window_targets(self, window: WindowData) -> Targets:
        sem, inst = window.point_labels()
        return build_targets(window.cloud, window.grid, sem, inst, self.class_map)

    # external class ids <-> contiguous class indices used by the heads
    def class_id_of_index(self, index: int) -> int:
        return self.class_map.all_ids[index]

    def class_ids(self) -> np.ndarray:
        return np.array(self.class_map.all_ids, dtype=np.int64)
