"""Instance queries over space-time and their iterative refinement.

Queries are anchored at farthest-point-sampled voxel centroids. Each
refinement step walks the feature pyramid coarse to fine: cross-attention is
restricted to voxels the previous mask prediction considers foreground (with
full attention as the fallback for empty rows), followed by self-attention
between queries and a feed-forward block, all pre-norm residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FeaturePyramid
from .errors import ParameterError, ShapeError
from .geometry import VoxelGrid, farthest_point_sampling
from .nn import MLP, LayerNorm, Linear, collect_parameters


@dataclass(frozen=True)
class WindowContext:
    """Normalization frame of one superimposed window: spatial extent and time span."""

    extent_min: np.ndarray  # (3,)
    extent_max: np.ndarray  # (3,)
    frame_lo: int
    frame_hi: int

    @property
    def extent_size(self) -> np.ndarray:
        return np.maximum(self.extent_max - self.extent_min, 1e-12)

    @property
    def frame_span(self) -> int:
        return max(1, self.frame_hi - self.frame_lo)

    # Coordinates map into [0, 1/2] instead of [0, 1]: with integer frequency
    # banks, phase 2*pi*f aliases with phase 0, which would give the first and
    # last frame of a window identical encodings. Half a period keeps the base
    # frequency injective over the window.
    def normalize_positions(self, positions: np.ndarray) -> np.ndarray:
        return 0.5 * (positions - self.extent_min) / self.extent_size

    def normalize_frames(self, frames: np.ndarray) -> np.ndarray:
        return (
            0.5 * (np.asarray(frames, dtype=np.float64) - self.frame_lo) / self.frame_span
        )


@dataclass(frozen=True)
class PosEncConfig:
    num_frequencies: int = 6
    freq_base: float = 2.0
    dim: int = 64

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ParameterError("need at least one frequency")
        if self.freq_base <= 1.0:
            raise ParameterError("freq_base must be > 1 for a geometric bank")


def fourier_features(
    positions: np.ndarray,
    frames: np.ndarray,
    ctx: WindowContext,
    config: PosEncConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw sin/cos banks before projection: (spatial (n, 6F), temporal (n, 2F)).

    Positions and frame indices are normalized to [0, 1] by the window context,
    so every entry lies in [-1, 1].
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    p = ctx.normalize_positions(positions)
    t = ctx.normalize_frames(np.asarray(frames).reshape(-1))
    freqs = config.freq_base ** np.arange(config.num_frequencies)
    ang_p = 2.0 * np.pi * p[:, :, None] * freqs[None, None, :]  # (n, 3, F)
    spatial = np.concatenate(
        [np.sin(ang_p).reshape(len(p), -1), np.cos(ang_p).reshape(len(p), -1)], axis=1
    )
    ang_t = 2.0 * np.pi * t[:, None] * freqs[None, :]
    temporal = np.concatenate([np.sin(ang_t), np.cos(ang_t)], axis=1)
    return spatial, temporal


class FourierEncoder:
    """Projected spatio-temporal positional encoding: W_s @ spatial + W_t @ temporal."""

    def __init__(self, rng: np.random.Generator, config: PosEncConfig):
        self.config = config
        f = config.num_frequencies
        self.spatial_proj = Linear(rng, 6 * f, config.dim)
        self.temporal_proj = Linear(rng, 2 * f, config.dim)

    def __call__(self, positions: np.ndarray, frames: np.ndarray, ctx: WindowContext) -> Tensor:
        spatial, temporal = fourier_features(positions, frames, ctx, self.config)
        return ad.add(self.spatial_proj(Tensor(spatial)), self.temporal_proj(Tensor(temporal)))

    def parameters(self) -> dict[str, Tensor]:
        return collect_parameters({"spatial": self.spatial_proj, "temporal": self.temporal_proj})


@dataclass
class QuerySet:
    features: Tensor  # (N_q, D)
    anchor_positions: np.ndarray  # (N_q, 3) meters
    anchor_frames: np.ndarray  # (N_q,)

    @property
    def num_queries(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 64
    num_heads: int = 4
    num_rounds: int = 3
    ffn_width: int = 128
    mask_threshold: float = 0.5
    num_frequencies: int = 6
    freq_base: float = 2.0

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ParameterError(
                f"dim {self.dim} is not divisible by {self.num_heads} heads"
            )
        if self.num_rounds < 0:
            raise ParameterError("num_rounds must be >= 0")

    def pos_enc(self) -> PosEncConfig:
        return PosEncConfig(
            num_frequencies=self.num_frequencies, freq_base=self.freq_base, dim=self.dim
        )


class MultiHeadAttention:
    """Standard multi-head attention with an optional boolean key mask per query."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int):
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, query_in: Tensor, key_in: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if query_in.shape[1] != self.dim or key_in.shape[1] != self.dim:
            raise ShapeError(
                f"attention expects dim {self.dim}, got {query_in.shape} and {key_in.shape}"
            )
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (query_in.shape[0], key_in.shape[0]):
                raise ShapeError(
                    f"attention mask shape {mask.shape} does not match "
                    f"({query_in.shape[0]}, {key_in.shape[0]})"
                )
        q = self.wq(query_in)
        k = self.wk(key_in)
        v = self.wv(key_in)
        scale = 1.0 / np.sqrt(self.head_dim)
        heads = []
        for h in range(self.num_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            attn = ad.softmax(scores, mask=mask, axis=-1)
            heads.append(ad.matmul(attn, vh))
        return self.wo(ad.concat(heads, axis=1))

    def parameters(self) -> dict[str, Tensor]:
        return collect_parameters({"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo})


class DecoderBlock:
    """One refinement step: masked cross-attention, self-attention, FFN (pre-norm)."""

    def __init__(self, rng: np.random.Generator, config: DecoderConfig):
        d = config.dim
        self.cross = MultiHeadAttention(rng, d, config.num_heads)
        self.self_attn = MultiHeadAttention(rng, d, config.num_heads)
        self.norm_cross = LayerNorm(d)
        self.norm_self = LayerNorm(d)
        self.norm_ffn = LayerNorm(d)
        self.ffn = MLP(rng, [d, config.ffn_width, d])

    def cross_attend(self, queries: Tensor, keys: Tensor, mask: np.ndarray | None) -> Tensor:
        if mask is not None:
            mask = mask.copy()
            empty = ~mask.any(axis=1)
            # Queries whose predicted mask is empty fall back to full attention.
            mask[empty, :] = True
        return ad.add(queries, self.cross(self.norm_cross(queries), keys, mask))

    def self_attend(self, queries: Tensor) -> Tensor:
        normed = self.norm_self(queries)
        return ad.add(queries, self.self_attn(normed, normed))

    def feed_forward(self, queries: Tensor) -> Tensor:
        return ad.add(queries, self.ffn(self.norm_ffn(queries)))

    def __call__(self, queries: Tensor, keys: Tensor, mask: np.ndarray | None) -> Tensor:
        queries = self.cross_attend(queries, keys, mask)
        queries = self.self_attend(queries)
        return self.feed_forward(queries)

    def parameters(self) -> dict[str, Tensor]:
        return collect_parameters(
            {
                "cross": self.cross,
                "self": self.self_attn,
                "ncross": self.norm_cross,
                "nself": self.norm_self,
                "nffn": self.norm_ffn,
                "ffn": self.ffn,
            }
        )


def init_queries(
    grid: VoxelGrid,
    num_queries: int,
    encoder: FourierEncoder,
    query_bias: Tensor,
    ctx: WindowContext,
    seed: int = 0,
) -> QuerySet:
    """Anchor queries at FPS-selected voxel centroids; features are the anchor
    positional encodings plus a shared learned bias."""
    if num_queries > grid.num_voxels:
        raise ParameterError(
            f"{num_queries} queries requested but only {grid.num_voxels} voxels"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    seed_index = int(rng.integers(grid.num_voxels))
    anchors = farthest_point_sampling(grid.voxel_centroids, num_queries, seed_index)
    positions = grid.voxel_centroids[anchors]
    frames = grid.voxel_frame[anchors]
    features = ad.add(encoder(positions, frames, ctx), query_bias)
    return QuerySet(features=features, anchor_positions=positions, anchor_frames=frames)


def propagate_foreground(
    fg_finest: np.ndarray, pyramid: FeaturePyramid, level: int
) -> np.ndarray:
    """Lift a (N_q, K_0) boolean foreground map to level r: a coarse voxel is
    foreground for a query if any of its finest descendants is."""
    fg = fg_finest.astype(np.uint8)
    for r in range(level):
        parent = pyramid.levels[r].parent_map
        k_next = pyramid.levels[r + 1].coords.shape[0]
        acc = np.zeros((k_next, fg.shape[0]), dtype=np.uint8)
        np.maximum.at(acc, parent, fg.T)
        fg = acc.T
    return fg.astype(bool)


class QueryRefiner:
    """The full decoder: per-level key projections and per (round, level) blocks."""

    def __init__(
        self,
        rng: np.random.Generator,
        config: DecoderConfig,
        level_widths: tuple[int, ...],
    ):
        self.config = config
        self.level_projs = [Linear(rng, w, config.dim) for w in level_widths]
        self.blocks = [
            [DecoderBlock(rng, config) for _ in level_widths]
            for _ in range(config.num_rounds)
        ]

    def parameters(self) -> dict[str, Tensor]:
        mods: dict[str, object] = {}
        for r, proj in enumerate(self.level_projs):
            mods[f"proj{r}"] = proj
        for i, round_blocks in enumerate(self.blocks):
            for r, block in enumerate(round_blocks):
                mods[f"round{i}.level{r}"] = block
        return collect_parameters(mods)

    def level_keys(self, pyramid: FeaturePyramid, encoder: FourierEncoder, ctx: WindowContext) -> list[Tensor]:
        keys = []
        for r, level in enumerate(pyramid.levels):
            pos = encoder(level.positions, level.frame, ctx)
            keys.append(ad.add(self.level_projs[r](level.features), pos))
        return keys

    def refine(
        self,
        queries: QuerySet,
        pyramid: FeaturePyramid,
        mask_module,
        encoder: FourierEncoder,
        ctx: WindowContext,
    ):
        """Iteratively refine queries; returns (final QuerySet, all mask outputs).

        Output count is num_rounds * num_levels + 1: the prediction from the
        initial queries plus one after every level step, for deep supervision.
        """
        if pyramid.depth != len(self.level_projs):
            raise ShapeError(
                f"pyramid depth {pyramid.depth} != decoder depth {len(self.level_projs)}"
            )
        keys = self.level_keys(pyramid, encoder, ctx)
        features = queries.features
        outputs = [mask_module(features, pyramid)]
        # sigmoid(x) > tau is exactly x > logit(tau)
        tau = self.config.mask_threshold
        threshold_logit = np.log(tau / (1.0 - tau))
        for round_blocks in self.blocks:
            for r in range(pyramid.depth - 1, -1, -1):
                fg0 = outputs[-1].heatmap_logits.values > threshold_logit
                mask = propagate_foreground(fg0, pyramid, r)
                features = round_blocks[r](features, keys[r], mask)
                outputs.append(mask_module(features, pyramid))
        final = QuerySet(
            features=features,
            anchor_positions=queries.anchor_positions,
            anchor_frames=queries.anchor_frames,
        )
        return final, outputs
