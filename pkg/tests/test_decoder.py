import numpy as np
import pytest

import panoptic4d.autodiff as ad
from panoptic4d.autodiff import Tensor, finite_difference_check
from panoptic4d.backbone import Backbone, BackboneConfig, seed_features
from panoptic4d.decoder import (
    DecoderConfig,
    DecoderBlock,
    FourierEncoder,
    MultiHeadAttention,
    PosEncConfig,
    QueryRefiner,
    WindowContext,
    fourier_features,
    init_queries,
    propagate_foreground,
)
from panoptic4d.errors import ParameterError
from panoptic4d.geometry import farthest_point_sampling
from panoptic4d.heads import MaskModule

from oracles import greedy_fps
from test_backbone import grid_from_points


CTX = WindowContext(
    extent_min=np.zeros(3), extent_max=np.full(3, 10.0), frame_lo=0, frame_hi=1
)


def small_setup(seed=0, depth=2, widths=(6, 8), dim=8, heads=2, rounds=1, nq=3, npts=25):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 10, size=(npts, 3))
    cloud, grid = grid_from_points(pts, voxel_size=1.0)
    cfg = DecoderConfig(dim=dim, num_heads=heads, num_rounds=rounds, ffn_width=16)
    bb = Backbone(rng, BackboneConfig(depth=depth, widths=widths))
    enc = FourierEncoder(rng, PosEncConfig(num_frequencies=2, dim=dim))
    refiner = QueryRefiner(rng, cfg, widths)
    mask_module = MaskModule(rng, dim=dim, finest_width=widths[0], num_classes=2)
    bias = Tensor(rng.normal(size=dim), requires_grad=True)
    pyramid = bb.extract(grid, Tensor(seed_features(grid, [0])))
    queries = init_queries(grid, nq, enc, bias, CTX, seed=0)
    return rng, grid, cfg, bb, enc, refiner, mask_module, bias, pyramid, queries


class TestFourier:
    def test_zero_phase(self):
        spatial, temporal = fourier_features(
            np.zeros((1, 3)), np.zeros(1), CTX, PosEncConfig(num_frequencies=2, dim=8)
        )
        np.testing.assert_allclose(spatial[0, :6], 0.0, atol=1e-12)  # sin block
        np.testing.assert_allclose(spatial[0, 6:], 1.0, atol=1e-12)  # cos block
        np.testing.assert_allclose(temporal[0], [0, 0, 1, 1], atol=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(0)
        spatial, temporal = fourier_features(
            rng.uniform(0, 10, size=(50, 3)),
            rng.integers(0, 2, size=50),
            CTX,
            PosEncConfig(num_frequencies=6, dim=16),
        )
        assert np.abs(spatial).max() <= 1.0 + 1e-12
        assert np.abs(temporal).max() <= 1.0 + 1e-12

    def test_temporal_only_difference(self):
        rng = np.random.default_rng(1)
        enc = FourierEncoder(rng, PosEncConfig(num_frequencies=3, dim=8))
        pos = np.array([[2.0, 3.0, 4.0], [2.0, 3.0, 4.0]])
        out = enc(pos, np.array([0.0, 1.0]), CTX)
        spatial, _ = fourier_features(pos, np.array([0.0, 1.0]), CTX, enc.config)
        np.testing.assert_array_equal(spatial[0], spatial[1])
        # the projected encodings differ only through the temporal summand
        t_only = enc.temporal_proj(
            Tensor(fourier_features(pos, np.array([0.0, 1.0]), CTX, enc.config)[1])
        ).values
        diff = out.values[0] - out.values[1]
        np.testing.assert_allclose(diff, t_only[0] - t_only[1], atol=1e-12)


class TestInitQueries:
    def test_exhaustion_and_determinism(self):
        rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, _ = small_setup(npts=30)
        k0 = grid.num_voxels
        qs = init_queries(grid, k0, enc, bias, CTX, seed=5)
        assert sorted(map(tuple, qs.anchor_positions.tolist())) == sorted(
            map(tuple, grid.voxel_centroids.tolist())
        )
        a = init_queries(grid, 4, enc, bias, CTX, seed=7)
        b = init_queries(grid, 4, enc, bias, CTX, seed=7)
        np.testing.assert_array_equal(a.anchor_positions, b.anchor_positions)

    def test_matches_fps_oracle(self):
        rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, _ = small_setup(npts=30)
        rng2 = np.random.Generator(np.random.PCG64(3))
        seed_index = int(rng2.integers(grid.num_voxels))
        expected = greedy_fps(grid.voxel_centroids, 5, seed_index)
        got = farthest_point_sampling(grid.voxel_centroids, 5, seed_index)
        assert got.tolist() == expected
        qs = init_queries(grid, 5, enc, bias, CTX, seed=3)
        np.testing.assert_allclose(qs.anchor_positions, grid.voxel_centroids[expected])

    def test_too_many_queries(self):
        rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, _ = small_setup(npts=10)
        with pytest.raises(ParameterError):
            init_queries(grid, grid.num_voxels + 1, enc, bias, CTX)


class TestAttention:
    def test_all_true_mask_equals_unmasked(self):
        rng = np.random.default_rng(2)
        attn = MultiHeadAttention(rng, 8, 2)
        q = Tensor(rng.normal(size=(3, 8)))
        k = Tensor(rng.normal(size=(7, 8)))
        full = attn(q, k).values
        masked = attn(q, k, mask=np.ones((3, 7), dtype=bool)).values
        np.testing.assert_array_equal(full, masked)

    def test_single_allowed_key_copies_value(self):
        rng = np.random.default_rng(3)
        attn = MultiHeadAttention(rng, 8, 2)
        q = Tensor(rng.normal(size=(2, 8)))
        k = Tensor(rng.normal(size=(5, 8)))
        mask = np.zeros((2, 5), dtype=bool)
        mask[0, 3] = True
        mask[1, 3] = True
        out = attn(q, k, mask=mask).values
        v = attn.wv(k).values
        expected = v[3] @ attn.wo.w.values + attn.wo.b.values
        np.testing.assert_allclose(out[0], expected, atol=1e-12)
        np.testing.assert_allclose(out[1], expected, atol=1e-12)

    def test_empty_row_fallback_in_block(self):
        rng = np.random.default_rng(4)
        cfg = DecoderConfig(dim=8, num_heads=2, num_rounds=1, ffn_width=16)
        block = DecoderBlock(rng, cfg)
        q = Tensor(rng.normal(size=(3, 8)))
        k = Tensor(rng.normal(size=(6, 8)))
        mask = np.ones((3, 6), dtype=bool)
        mask[1, :] = False  # must behave like an all-true row
        with_fallback = block.cross_attend(q, k, mask).values
        all_true = block.cross_attend(q, k, np.ones((3, 6), dtype=bool)).values
        np.testing.assert_array_equal(with_fallback[1], all_true[1])

    def test_attention_rows_sum_to_one_on_allowed(self):
        rng = np.random.default_rng(5)
        z = Tensor(rng.normal(size=(4, 6)))
        mask = rng.random((4, 6)) < 0.4
        mask[:, 2] = True
        s = ad.softmax(z, mask=mask).values
        np.testing.assert_allclose(s.sum(axis=1), np.ones(4), atol=1e-12)
        assert np.all(s[~mask] == 0)

    def test_single_query_self_attention(self):
        rng = np.random.default_rng(6)
        attn = MultiHeadAttention(rng, 8, 2)
        q = Tensor(rng.normal(size=(1, 8)))
        out = attn(q, q).values
        v = attn.wv(q).values
        expected = v[0] @ attn.wo.w.values + attn.wo.b.values
        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_zero_value_projection_gives_residual_identity(self):
        rng = np.random.default_rng(7)
        cfg = DecoderConfig(dim=8, num_heads=2, num_rounds=1, ffn_width=16)
        block = DecoderBlock(rng, cfg)
        block.self_attn.wv.w.values[...] = 0.0
        block.self_attn.wv.b.values[...] = 0.0
        block.self_attn.wo.b.values[...] = 0.0
        q = Tensor(rng.normal(size=(4, 8)))
        out = block.self_attend(q).values
        np.testing.assert_allclose(out, q.values, atol=1e-12)


class TestRefine:
    def test_zero_rounds(self):
        rng, grid, cfg0, bb, enc, refiner, mm, bias, pyramid, queries = small_setup()
        cfg = DecoderConfig(dim=8, num_heads=2, num_rounds=0, ffn_width=16)
        refiner0 = QueryRefiner(rng, cfg, (6, 8))
        final, outputs = refiner0.refine(queries, pyramid, mm, enc, CTX)
        assert len(outputs) == 1
        assert final.features is queries.features

    def test_output_count(self):
        rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, queries = small_setup(
            rounds=2, depth=2
        )
        final, outputs = refiner.refine(queries, pyramid, mm, enc, CTX)
        assert len(outputs) == 2 * 2 + 1

    def test_all_foreground_equals_unmasked(self):
        rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, queries = small_setup()

        class AllForeground:
            def __init__(self, inner):
                self.inner = inner

            def __call__(self, features, pyr):
                out = self.inner(features, pyr)
                out.heatmap_logits = Tensor(np.full(out.heatmap_logits.shape, 50.0))
                return out

        fg_mm = AllForeground(mm)
        final_a, _ = refiner.refine(queries, pyramid, fg_mm, enc, CTX)

        class Unmasked(QueryRefiner):
            def refine_unmasked(self, queries, pyramid, mask_module, encoder, ctx):
                keys = self.level_keys(pyramid, encoder, ctx)
                feats = queries.features
                outs = [mask_module(feats, pyramid)]
                for blocks in self.blocks:
                    for r in range(pyramid.depth - 1, -1, -1):
                        feats = blocks[r](feats, keys[r], None)
                        outs.append(mask_module(feats, pyramid))
                return feats

        um = Unmasked.__new__(Unmasked)
        um.config = refiner.config
        um.level_projs = refiner.level_projs
        um.blocks = refiner.blocks
        feats_b = um.refine_unmasked(queries, pyramid, fg_mm, enc, CTX)
        np.testing.assert_allclose(final_a.features.values, feats_b.values, atol=1e-12)

    def test_query_permutation_equivariance(self):
        for seed in range(3):
            rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, queries = small_setup(
                seed=seed, nq=4
            )
            final, outputs = refiner.refine(queries, pyramid, mm, enc, CTX)
            perm = np.random.default_rng(seed).permutation(4)
            from panoptic4d.decoder import QuerySet

            permuted = QuerySet(
                features=Tensor(queries.features.values[perm]),
                anchor_positions=queries.anchor_positions[perm],
                anchor_frames=queries.anchor_frames[perm],
            )
            final_p, outputs_p = refiner.refine(permuted, pyramid, mm, enc, CTX)
            np.testing.assert_allclose(
                final_p.features.values, final.features.values[perm], atol=1e-9
            )
            np.testing.assert_allclose(
                outputs_p[-1].heatmap_logits.values,
                outputs[-1].heatmap_logits.values[perm],
                atol=1e-9,
            )

    def test_gradient_flows_to_backbone(self):
        rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, queries = small_setup(npts=15)
        params = bb.parameters()
        some = {k: params[k] for k in list(params)[:2]}

        def loss():
            pyr = bb.extract(grid, Tensor(seed_features(grid, [0])))
            qs = init_queries(grid, 3, enc, bias, CTX, seed=0)
            final, outputs = refiner.refine(qs, pyr, mm, enc, CTX)
            return ad.tmean(outputs[-1].heatmap_logits)

        err = finite_difference_check(loss, list(some.values()), h=1e-6)
        assert err < 1e-3

    def test_temporal_sensitivity(self):
        rng = np.random.default_rng(8)
        enc = FourierEncoder(rng, PosEncConfig(num_frequencies=3, dim=8))
        pos = np.array([[1.0, 2.0, 3.0]])
        a = enc(pos, np.array([0.0]), CTX).values
        b = enc(pos, np.array([1.0]), CTX).values
        assert not np.allclose(a, b)


class TestPropagateForeground:
    def test_or_semantics(self):
        rng, grid, cfg, bb, enc, refiner, mm, bias, pyramid, queries = small_setup(npts=40)
        k0 = grid.num_voxels
        fg = np.zeros((2, k0), dtype=bool)
        fg[0, 0] = True
        up = propagate_foreground(fg, pyramid, 1)
        parent = pyramid.levels[0].parent_map
        assert up[0, parent[0]]
        assert up[1].sum() == 0
        # every foreground parent has at least one foreground child
        full = np.ones((1, k0), dtype=bool)
        np.testing.assert_array_equal(
            propagate_foreground(full, pyramid, 1),
            np.ones((1, pyramid.levels[1].coords.shape[0]), dtype=bool),
        )
