"""
Tests for the depth-guided image encoder: window layout, LMSA, GDA and the full forward pass
"""

import dataclasses

import numpy as np
import pytest

from config import GcfatConfig
from errors import DimensionError
from model.gcfat import (
    GlobalQuery,
    gcfat_forward,
    gcfat_specs,
    gda,
    gda_specs,
    lmsa,
    lmsa_block,
    lmsa_specs,
    make_global_query,
    merge_windows,
    partition_windows,
    patch_embed,
    resample_nearest,
)
from model.numerics import ParamSet, Tensor, layer_norm
from utils.scene import DepthMap, PointCloud, depth_map


def _random_params(specs, rng) -> ParamSet:
    return ParamSet({name: rng.normal(size=spec.shape) for name, spec in specs.items()})


def _ln(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _attend(q, k, v, heads, key_mask):
    d = q.shape[1] // heads
    out = np.zeros((q.shape[0], v.shape[1]))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        s = np.where(key_mask[None, :], s, -np.inf)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        out[:, sl] = a @ v[:, sl]
    return out


def _windows(h, w, hp, wp):
    """Yield (pixels, mask) per window, windows and slots both row-major."""
    for a in range(-(-h // hp)):
        for b in range(-(-w // wp)):
            pixels, mask = [], []
            for i in range(hp):
                for j in range(wp):
                    r, c = a * hp + i, b * wp + j
                    pixels.append((r, c))
                    mask.append(r < h and c < w)
            yield pixels, np.array(mask)


def _gather(feat, pixels, mask):
    x = np.zeros((len(pixels), feat.shape[-1]))
    for s, ((r, c), real) in enumerate(zip(pixels, mask)):
        if real:
            x[s] = feat[r, c]
    return x


def _scatter(out, y, pixels, mask):
    for s, ((r, c), real) in enumerate(zip(pixels, mask)):
        if real:
            out[r, c] = y[s]


def _gda_oracle(feat, query, cfg, p, prefix):
    h, w, c = feat.shape
    hp, wp = cfg.window
    q = query[0].transpose(1, 2, 0).reshape(hp * wp, c)
    out = np.zeros_like(feat)
    for pixels, mask in _windows(h, w, hp, wp):
        x = _gather(feat, pixels, mask)
        k = x @ p[f"{prefix}.k.weight"] + p[f"{prefix}.k.bias"]
        v = x @ p[f"{prefix}.v.weight"] + p[f"{prefix}.v.bias"]
        y = _ln(x + _attend(q, k, v, cfg.num_heads, mask), p[f"{prefix}.norm.gain"], p[f"{prefix}.norm.bias"], cfg.eps)
        _scatter(out, y, pixels, mask)
    return out


def _lmsa_oracle(feat, cfg, p, prefix):
    h, w, c = feat.shape
    out = np.zeros_like(feat)
    lin = lambda x, name: x @ p[f"{prefix}.{name}.weight"] + p[f"{prefix}.{name}.bias"]
    for pixels, mask in _windows(h, w, *cfg.window):
        x = _gather(feat, pixels, mask)
        ctx = _attend(lin(x, "q"), lin(x, "k"), lin(x, "v"), cfg.num_heads, mask)
        y = _ln(x + lin(ctx, "proj"), p[f"{prefix}.norm.gain"], p[f"{prefix}.norm.bias"], cfg.eps)
        y = y + lin(np.maximum(lin(y, "mlp.0"), 0.0), "mlp.1")
        _scatter(out, y, pixels, mask)
    return out


def _random_case(rng):
    heads = int(rng.integers(1, 3))
    c = heads * int(rng.integers(1, 5))
    window = tuple(int(v) for v in rng.integers(1, 4, size=2))
    cfg = GcfatConfig(embed_dim=c, num_heads=heads, window=window, mlp_ratio=2)
    h, w = (int(v) for v in rng.integers(1, 8, size=2))
    return cfg, rng.normal(size=(h, w, c))


def _depth_for(camera, rng, n=60) -> DepthMap:
    u = rng.uniform(0, camera.width, n)
    v = rng.uniform(0, camera.height, n)
    pts = camera.backproject(u, v, rng.uniform(5.0, 20.0, n))
    return depth_map(PointCloud(np.column_stack([pts, np.full(n, 0.5)])), camera)


class TestWindowLayout:
    def test_round_trip(self, rng):
        for _ in range(30):
            h, w = (int(v) for v in rng.integers(1, 9, size=2))
            window = tuple(int(v) for v in rng.integers(1, 4, size=2))
            feat = Tensor(rng.normal(size=(h, w, 3)))
            part = partition_windows(feat, window)
            np.testing.assert_array_equal(merge_windows(part.windows, part).data, feat.data)

    def test_padding_mask(self):
        part = partition_windows(Tensor(np.ones((3, 3, 2))), (2, 2))
        assert part.num_windows == 4
        np.testing.assert_array_equal(part.mask.sum(axis=1), [4, 2, 2, 1])
        np.testing.assert_array_equal(part.windows.data[3, 1:], np.zeros((3, 2)))

    def test_patch_embed_constant_image(self, tiny_gcfat, rng):
        params = _random_params(gcfat_specs(tiny_gcfat), rng)
        tokens = patch_embed(np.full((16, 16, 3), 0.3), params, tiny_gcfat).data
        assert tokens.shape == (4, 4, 8)
        np.testing.assert_allclose(tokens, np.broadcast_to(tokens[0, 0], tokens.shape), atol=1e-14)


class TestGda:
    def test_numpy_oracle(self, rng):
        for _ in range(100):
            cfg, feat = _random_case(rng)
            params = _random_params(gda_specs("g", cfg.embed_dim), rng)
            query = rng.normal(size=(1, cfg.embed_dim) + cfg.window)
            out = gda(Tensor(feat), GlobalQuery(Tensor(query)), cfg, params, prefix="g")
            p = {k: v.data for k, v in params.items()}
            np.testing.assert_allclose(out.data, _gda_oracle(feat, query, cfg, p, "g"), rtol=0, atol=1e-10)

    def test_affinity_rows_sum_to_one(self, rng):
        cfg = GcfatConfig(embed_dim=8, num_heads=2, window=(3, 2))
        params = _random_params(gda_specs("g", 8), rng)
        query = GlobalQuery(Tensor(rng.normal(size=(1, 8, 3, 2))))
        _, affinity = gda(Tensor(rng.normal(size=(5, 5, 8))), query, cfg, params, prefix="g", return_affinity=True)
        assert len(affinity) == 6
        for alpha in affinity:
            assert alpha.shape == (2, 6, 6)
            np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-12)
            assert (alpha.data >= 0).all()

    def test_affinity_is_a_distribution_for_random_shapes(self):
        for seed in range(1000):
            case_rng = np.random.default_rng(seed)
            cfg, feat = _random_case(case_rng)
            spread = float(case_rng.choice([0.1, 1.0, 10.0]))
            params = _random_params(gda_specs("g", cfg.embed_dim), case_rng)
            query = GlobalQuery(Tensor(spread * case_rng.normal(size=(1, cfg.embed_dim) + cfg.window)))
            _, affinity = gda(Tensor(feat), query, cfg, params, prefix="g", return_affinity=True)
            for alpha in affinity:
                assert (alpha.data >= 0).all()
                np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_zero_query_gives_uniform_weights(self, rng):
        cfg = GcfatConfig(embed_dim=4, num_heads=1, window=(2, 2))
        params = _random_params(gda_specs("g", 4), rng)
        query = GlobalQuery(Tensor(np.zeros((1, 4, 2, 2))))
        _, affinity = gda(Tensor(rng.normal(size=(3, 3, 4))), query, cfg, params, prefix="g", return_affinity=True)
        part = partition_windows(Tensor(np.zeros((3, 3, 4))), (2, 2))
        for alpha, mask in zip(affinity, part.mask):
            expected = np.broadcast_to(mask / mask.sum(), (1, 4, 4))
            np.testing.assert_allclose(alpha.data, expected, atol=1e-15)

    def test_single_slot_window(self, rng):
        cfg = GcfatConfig(embed_dim=4, num_heads=2, window=(1, 1))
        params = _random_params(gda_specs("g", 4), rng)
        feat = rng.normal(size=(3, 2, 4))
        out = gda(Tensor(feat), GlobalQuery(Tensor(rng.normal(size=(1, 4, 1, 1)))), cfg, params, prefix="g")
        v = feat @ params["g.v.weight"].data + params["g.v.bias"].data
        expected = _ln(feat + v, params["g.norm.gain"].data, params["g.norm.bias"].data, cfg.eps)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_window_order_is_irrelevant(self, rng):
        cfg = GcfatConfig(embed_dim=4, num_heads=2, window=(2, 2))
        params = _random_params(gda_specs("g", 4), rng)
        feat = Tensor(rng.normal(size=(5, 6, 4)))
        query = GlobalQuery(Tensor(rng.normal(size=(1, 4, 2, 2))))
        forward = gda(feat, query, cfg, params, prefix="g")
        backward = gda(feat, query, cfg, params, prefix="g", window_order=list(reversed(range(9))))
        assert np.array_equal(forward.data, backward.data)

    def test_bad_window_order(self, rng):
        cfg = GcfatConfig(embed_dim=4, num_heads=2, window=(2, 2))
        params = _random_params(gda_specs("g", 4), rng)
        query = GlobalQuery(Tensor(np.zeros((1, 4, 2, 2))))
        with pytest.raises(DimensionError):
            gda(Tensor(np.ones((4, 4, 4))), query, cfg, params, prefix="g", window_order=[0, 0, 1, 2])

    def test_query_shape_checked(self, rng):
        cfg = GcfatConfig(embed_dim=4, num_heads=2, window=(2, 2))
        params = _random_params(gda_specs("g", 4), rng)
        with pytest.raises(DimensionError):
            gda(Tensor(np.ones((4, 4, 4))), GlobalQuery(Tensor(np.zeros((1, 4, 3, 3)))), cfg, params, prefix="g")

    def test_dropout_only_in_training(self, rng):
        params = _random_params(gda_specs("g", 4), rng)
        feat = Tensor(rng.normal(size=(4, 4, 4)))
        query = GlobalQuery(Tensor(rng.normal(size=(1, 4, 2, 2))))
        infer = GcfatConfig(embed_dim=4, num_heads=2, window=(2, 2), attn_drop=0.5)
        np.testing.assert_array_equal(
            gda(feat, query, infer, params, seed=1, prefix="g").data,
            gda(feat, query, infer, params, seed=2, prefix="g").data,
        )
        train = GcfatConfig(embed_dim=4, num_heads=2, window=(2, 2), attn_drop=0.5, training=True)
        a = gda(feat, query, train, params, seed=1, prefix="g").data
        np.testing.assert_array_equal(a, gda(feat, query, train, params, seed=1, prefix="g").data)
        assert not np.allclose(a, gda(feat, query, infer, params, seed=1, prefix="g").data)


class TestLmsa:
    def test_numpy_oracle(self, rng):
        for _ in range(100):
            cfg, feat = _random_case(rng)
            params = _random_params(lmsa_specs("l", cfg.embed_dim, cfg.mlp_ratio), rng)
            out = lmsa_block(Tensor(feat), cfg, params, "l")
            p = {k: v.data for k, v in params.items()}
            np.testing.assert_allclose(out.data, _lmsa_oracle(feat, cfg, p, "l"), rtol=0, atol=1e-10)

    def test_window_order_is_irrelevant(self, rng):
        cfg = GcfatConfig(embed_dim=4, num_heads=2, window=(2, 3))
        params = _random_params(lmsa_specs("l", 4, 2), rng)
        feat = Tensor(rng.normal(size=(5, 5, 4)))
        shuffled = [int(i) for i in rng.permutation(6)]
        assert np.array_equal(
            lmsa_block(feat, cfg, params, "l").data,
            lmsa_block(feat, cfg, params, "l", window_order=shuffled).data,
        )

    def test_local_stack_matches_forward_without_depth_query(self, tiny_gcfat, rng):
        cfg = dataclasses.replace(tiny_gcfat, use_depth_query=False)
        params = _random_params(gcfat_specs(cfg), rng)
        img = rng.uniform(size=(16, 16, 3))
        local = lmsa(patch_embed(img, params, cfg), cfg, params)
        normed = layer_norm(local, params["gcfat.norm.gain"], params["gcfat.norm.bias"], cfg.eps)
        expected = resample_nearest(normed, cfg.fusion_hw).data
        np.testing.assert_array_equal(gcfat_forward(img, DepthMap.empty(16, 16), cfg, params).data, expected)

    def test_single_stage_is_one_block(self, rng):
        cfg = GcfatConfig(embed_dim=4, num_heads=2, window=(2, 2), depths=(1,))
        params = _random_params(gcfat_specs(cfg, prefix="g"), rng)
        feat = Tensor(rng.normal(size=(4, 5, 4)))
        np.testing.assert_array_equal(
            lmsa(feat, cfg, params, prefix="g").data, lmsa_block(feat, cfg, params, "g.stage0.block0.lmsa").data
        )


class TestGlobalQuery:
    def test_empty_depth_gives_zero_query(self, tiny_gcfat, rng):
        params = _random_params(gcfat_specs(tiny_gcfat), rng)
        q_g = make_global_query(DepthMap.empty(16, 16), tiny_gcfat, params)
        assert q_g.shape == (1, 8, 2, 2)
        np.testing.assert_array_equal(q_g.data.data, np.zeros((1, 8, 2, 2)))

    def test_tokens_layout(self):
        data = np.arange(12.0).reshape(1, 3, 2, 2)
        q_g = GlobalQuery(Tensor(data))
        np.testing.assert_array_equal(q_g.tokens().data, data[0].transpose(1, 2, 0).reshape(4, 3))
        np.testing.assert_array_equal(GlobalQuery.from_tokens(q_g.tokens(), (2, 2)).data.data, data)
        assert q_g.replicate(3).shape == (3, 3, 2, 2)

    def test_query_depends_on_depth(self, tiny_gcfat, small_camera, rng):
        params = _random_params(gcfat_specs(tiny_gcfat), rng)
        q_g = make_global_query(_depth_for(small_camera, rng), tiny_gcfat, params)
        assert np.abs(q_g.data.data).max() > 0


class TestForward:
    def test_output_shape_and_finite(self, tiny_gcfat, small_camera, rng):
        params = _random_params(gcfat_specs(tiny_gcfat), rng)
        out = gcfat_forward(rng.uniform(size=(16, 16, 3)), _depth_for(small_camera, rng), tiny_gcfat, params)
        assert out.shape == (4, 4, 8)
        assert np.isfinite(out.data).all()

    def test_disabled_gives_zeros(self, rng):
        cfg = GcfatConfig(enabled=False, fusion_hw=(3, 5), embed_dim=6, num_heads=2)
        out = gcfat_forward(rng.uniform(size=(16, 16, 3)), DepthMap.empty(16, 16), cfg, ParamSet({}))
        np.testing.assert_array_equal(out.data, np.zeros((3, 5, 6)))

    def test_depth_changes_features(self, tiny_gcfat, small_camera, rng):
        params = _random_params(gcfat_specs(tiny_gcfat), rng)
        img = rng.uniform(size=(16, 16, 3))
        with_depth = gcfat_forward(img, _depth_for(small_camera, rng), tiny_gcfat, params).data
        without = gcfat_forward(img, DepthMap.empty(16, 16), tiny_gcfat, params).data
        assert not np.allclose(with_depth, without)

    def test_window_order_callable(self, tiny_gcfat, small_camera, rng):
        params = _random_params(gcfat_specs(tiny_gcfat), rng)
        img = rng.uniform(size=(16, 16, 3))
        depth = _depth_for(small_camera, rng)
        reference = gcfat_forward(img, depth, tiny_gcfat, params).data
        reversed_order = gcfat_forward(
            img, depth, tiny_gcfat, params, window_order=lambda n: list(reversed(range(n)))
        ).data
        assert np.array_equal(reference, reversed_order)
