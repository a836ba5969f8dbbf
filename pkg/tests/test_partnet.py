import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partalign import ndgrad as nd
from partalign import partnet as pn
from partalign import synthdata as sd
from partalign.ndgrad import Tensor
from conftest import tiny_model


def test_desk_backbone_shape():
    m = pn.build_model()
    T = pn.backbone_forward(np.random.default_rng(0).random((2, 40, 20, 3)), m.params, m.backbone)
    assert T.shape == (2, 10, 5, 64)
    assert m.backbone.feature_hw == (10, 5)
    assert np.all(np.isfinite(T.data))


def test_zero_image_zero_params_gives_zero_map():
    m = pn.build_model()
    for p in m.params.values():
        p.data[...] = 0.0
    T = pn.backbone_forward(np.zeros((1, 40, 20, 3)), m.params, m.backbone)
    assert not T.data.any()


def test_backbone_rejects_wrong_extent():
    m = pn.build_model()
    with pytest.raises(ValueError, match="do not match"):
        pn.backbone_forward(np.zeros((1, 32, 16, 3)), m.params, m.backbone)


def test_zero_detector_maps():
    m = tiny_model(parts=3)
    m.params["detector.w"].data[...] = 0
    T = Tensor(np.random.default_rng(0).random((2, 6, 3, 6)))
    sig = pn.detect_part_maps(T, m.params, "sigmoid").data
    np.testing.assert_array_equal(sig, 0.5)
    soft = pn.detect_part_maps(T, m.params, "softmax").data
    np.testing.assert_allclose(soft, 1 / 18, rtol=1e-12)


def test_detector_matches_pointwise_formula():
    m = tiny_model(parts=3)
    rng = np.random.default_rng(1)
    m.params["detector.w"].data[...] = rng.normal(size=m.params["detector.w"].shape)
    m.params["detector.b"].data[...] = rng.normal(size=3)
    T = rng.random((6, 3, 6))
    w, b = m.params["detector.w"].data[0, 0], m.params["detector.b"].data
    for k in range(3):
        got = pn.detect_part_map(Tensor(T), k, m.params).data
        expect = np.empty((6, 3))
        for x in range(6):
            for y in range(3):
                expect[x, y] = 1 / (1 + np.exp(-(sum(w[c, k] * T[x, y, c] for c in range(6)) + b[k])))
        np.testing.assert_allclose(got, expect, rtol=1e-12)
    with pytest.raises(IndexError):
        pn.detect_part_map(Tensor(T), 3, m.params)


def test_part_feature_special_cases():
    rng = np.random.default_rng(2)
    T = Tensor(rng.random((4, 3, 5)))
    Wk = Tensor(rng.normal(size=(2, 5)))
    np.testing.assert_allclose(pn.part_feature(T, np.ones((4, 3)), Wk).data,
                               Wk.data @ T.data.mean(axis=(0, 1)), rtol=1e-12)
    assert not pn.part_feature(T, np.zeros((4, 3)), Wk).data.any()
    hot = np.zeros((4, 3))
    hot[1, 2] = 1.0
    np.testing.assert_allclose(pn.part_feature(T, hot, Tensor(np.eye(5))).data, T.data[1, 2] / 12, rtol=1e-12)


def test_fused_pooling_equals_per_part_features():
    m = tiny_model(parts=3, width=6)
    m.params["detector.w"].data[...] = np.random.default_rng(3).normal(size=m.params["detector.w"].shape)
    T = pn.backbone_forward(np.random.default_rng(4).random((2, 12, 6, 3)), m.params, m.backbone)
    maps = pn.detect_part_maps(T, m.params)
    fused = pn.pool_parts(T, maps, m.params["reduce.w"]).data
    for n in range(2):
        Tn = Tensor(T.data[n])
        parts = [pn.part_feature(Tn, pn.detect_part_map(Tn, k, m.params), Tensor(m.params["reduce.w"].data[k])).data
                 for k in range(3)]
        np.testing.assert_allclose(fused[n], np.concatenate(parts), rtol=1e-12, atol=1e-15)


def test_embed_unit_norm_and_deterministic():
    m = pn.build_model()
    x = np.random.default_rng(5).random((3, 40, 20, 3))
    e1, e2 = pn.embed(x, m).data, pn.embed(x, m).data
    np.testing.assert_allclose(np.linalg.norm(e1, axis=1), 1.0, atol=1e-10)
    np.testing.assert_array_equal(e1, e2)
    same = pn.embed(np.stack([x[0], x[0]]), m).data
    assert ((same[0] - same[1]) ** 2).sum() == 0.0


def test_single_all_ones_part_equals_pool_head():
    # K=1 with the detector saturated to 1 everywhere reduces to global pooling
    part = tiny_model(parts=1, width=8)
    part.params["detector.w"].data[...] = 0.0
    part.params["detector.b"].data[...] = 800.0
    pool = tiny_model(head="pool", width=8)
    for name in ("conv0.w", "conv0.b", "conv1.w", "conv1.b"):
        pool.params[name].data[...] = part.params[name].data
    pool.params["reduce.w"].data[...] = part.params["reduce.w"].data[0]
    x = np.random.default_rng(6).random((3, 12, 6, 3))
    np.testing.assert_array_equal(pn.part_maps(x, part), 1.0)
    np.testing.assert_allclose(pn.embed(x, part).data, pn.embed(x, pool).data, rtol=1e-13, atol=1e-15)

    fixed = tiny_model(head="fixed-mask", parts=1, width=8)
    for name in fixed.params:
        fixed.params[name].data = part.params[name].data.copy()
    np.testing.assert_allclose(pn.embed(x, fixed, np.ones((3, 6, 3, 1))).data, pn.embed(x, pool).data,
                               rtol=1e-13, atol=1e-15)


def test_fixed_masks_equal_to_learned_maps_reproduce_embed():
    m = tiny_model(parts=3, width=6)
    m.params["detector.w"].data[...] = np.random.default_rng(7).normal(size=m.params["detector.w"].shape)
    x = np.random.default_rng(8).random((2, 12, 6, 3))
    maps = pn.part_maps(x, m)
    fixed = pn.Model(m.backbone, pn.PartNetConfig(head="fixed-mask", parts=3, width=6),
                     {k: v for k, v in m.params.items() if not k.startswith("detector")})
    np.testing.assert_allclose(pn.embed(x, fixed, maps).data, pn.embed(x, m).data, rtol=1e-12)


def test_fixed_mask_count_mismatch():
    m = tiny_model(head="fixed-mask", parts=3)
    with pytest.raises(ValueError, match="masks"):
        pn.embed(np.zeros((1, 12, 6, 3)), m, np.ones((1, 6, 3, 2)))


def test_fixed_mask_regression_on_generator_masks():
    ds = sd.generate(2, 2, seed=11)
    m = pn.build_model(head=pn.PartNetConfig(head="fixed-mask", parts=3), seed=3)
    e = pn.embed(ds.images, m, ds.masks).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-10)
    np.testing.assert_array_equal(e, pn.embed(ds.images, m, ds.masks).data)
    # masks are constants: no gradient path reaches them, and the embedding depends on them
    other = pn.embed(ds.images, m, ds.masks[::-1]).data
    assert not np.allclose(e, other)


@pytest.mark.parametrize("kind,count,expected", [("stripe", 2, 2), ("grid", 2, 4), ("stripe", 5, 5), ("grid", 5, 25)])
def test_baseline_masks_partition(kind, count, expected):
    h, w = (4, 2) if count == 2 else (10, 5)
    masks = pn.make_baseline_masks(kind, h, w, count)
    assert masks.shape == (h, w, expected)
    np.testing.assert_array_equal(masks.sum(-1), 1.0)
    for a in range(expected):
        for b in range(a + 1, expected):
            assert not (masks[..., a] * masks[..., b]).any()


def test_stripe_and_grid_small_cases():
    s = pn.make_baseline_masks("stripe", 4, 2, 2)
    np.testing.assert_array_equal(s[:2, :, 0], 1)
    np.testing.assert_array_equal(s[2:, :, 1], 1)
    g = pn.make_baseline_masks("grid", 4, 2, 2)
    assert all(g[..., i].sum() == 2 for i in range(4))
    np.testing.assert_array_equal(g[:2, :1, 0], 1)


def test_indivisible_extents_front_load_remainder():
    s = pn.make_baseline_masks("stripe", 7, 3, 3)
    assert [int(s[..., i].sum() / 3) for i in range(3)] == [3, 2, 2]
    with pytest.raises(ValueError):
        pn.make_baseline_masks("grid", 4, 2, 3)


def test_pool_and_fc_heads():
    T = Tensor(np.full((1, 3, 2, 4), 0.5))
    W = np.random.default_rng(9).normal(size=(3, 4))
    cfg = pn.PartNetConfig(head="pool", width=3)
    got = pn.pool_head(T, {"reduce.w": Tensor(W)}, cfg).data[0]
    v = W @ np.full(4, 0.5)
    np.testing.assert_allclose(got, v / np.linalg.norm(v), rtol=1e-12)

    Tr = Tensor(np.random.default_rng(10).random((1, 3, 2, 4)))
    sel = np.zeros((2, 24))
    sel[0, 5] = sel[1, 17] = 1.0
    fc = pn.fc_head(Tr, {"reduce.w": Tensor(sel)}, pn.PartNetConfig(head="fc", width=2)).data[0]
    flat = Tr.data.reshape(-1)
    np.testing.assert_allclose(fc, flat[[5, 17]] / np.linalg.norm(flat[[5, 17]]), rtol=1e-12)


@pytest.mark.parametrize("head", ["partnet", "stripe", "grid", "pool", "fc"])
def test_all_heads_unit_norm(head):
    m = pn.build_model(head=pn.PartNetConfig(head=head))
    e = pn.embed(np.random.default_rng(11).random((2, 40, 20, 3)), m).data
    assert e.shape == (2, m.head.embedding_dim)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-10)


def test_embedding_widths():
    assert pn.PartNetConfig(parts=8).embedding_dim == 64
    assert pn.PartNetConfig(parts=1).embedding_dim == 64
    assert pn.PartNetConfig(head="stripe", stripes=5).embedding_dim == 65
    assert pn.PartNetConfig(head="grid", grid=5).embedding_dim == 75
    assert pn.PartNetConfig(head="pool").embedding_dim == 64


def test_bad_config_names():
    with pytest.raises(ValueError, match="choose from"):
        pn.PartNetConfig(head="bogus")
    with pytest.raises(ValueError, match="choose from"):
        pn.PartNetConfig(attention="tanh")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["sigmoid", "softmax"]))
def test_part_map_contract(seed, attention):
    rng = np.random.default_rng(seed)
    m = tiny_model(parts=3, attention=attention, seed=seed % 1000)
    m.params["detector.w"].data[...] = rng.normal(scale=3, size=m.params["detector.w"].shape)
    maps = pn.part_maps(rng.random((2, 12, 6, 3)), m)
    if attention == "sigmoid":
        assert np.all((maps > 0) & (maps < 1))
    else:
        np.testing.assert_allclose(maps.sum(axis=(1, 2)), 1.0, atol=1e-12)


def _shift_cells(img, cells, factor):
    out = np.roll(img, cells * factor, axis=0)
    return out


def test_spatial_heads_more_shift_sensitive_than_part_head():
    """A one-cell vertical shift moves stripe/grid embeddings more than the learned-part embedding.

    Uses detectors that respond to the figure (not to position), which is
    what the part head can represent and the fixed partitions cannot.
    """
    ds = sd.generate(6, 4, sd.Nuisance(shift_frac=0.1, clutter=0, noise=0.0), seed=21)
    factor = 4
    backbone = pn.BackboneConfig()
    d_part, d_stripe, d_grid = [], [], []
    for seed in range(3):
        part = pn.build_model(backbone, pn.PartNetConfig(parts=5, width=65), seed=seed)
        # detectors keyed on backbone activation strength: position-free by construction
        part.params["detector.w"].data[...] = np.random.default_rng(seed).normal(
            scale=0.5, size=part.params["detector.w"].shape)
        stripe = pn.build_model(backbone, pn.PartNetConfig(head="stripe", stripes=5, width=65), seed=seed)
        grid = pn.build_model(backbone, pn.PartNetConfig(head="grid", grid=5, width=75), seed=seed)
        for name in ("conv0.w", "conv0.b", "conv1.w", "conv1.b", "conv2.w", "conv2.b"):
            stripe.params[name].data = part.params[name].data.copy()
            grid.params[name].data = part.params[name].data.copy()
        stripe.params["reduce.w"].data = part.params["reduce.w"].data.copy()
        base = ds.images
        moved = np.stack([_shift_cells(im, 1, factor) for im in base])
        for model, bucket in ((part, d_part), (stripe, d_stripe), (grid, d_grid)):
            a, b = pn.embed(base, model).data, pn.embed(moved, model).data
            bucket.append(((a - b) ** 2).sum(axis=1).mean())
    assert np.mean(d_stripe) > np.mean(d_part)
    assert np.mean(d_grid) > np.mean(d_part)


def test_full_pipeline_gradcheck_small():
    from partalign import tripletloss as tl
    m = tiny_model(parts=2, width=6, seed=2)
    rng = np.random.default_rng(12)
    m.params["detector.w"].data[...] = rng.normal(size=m.params["detector.w"].shape)
    images = rng.random((6, 12, 6, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])

    def f():
        return tl.triplet_loss_tensor(pn.embed(images, m), labels, 0.2)

    report = nd.gradcheck(f, m.params, h=1e-5, tol=1e-4)
    assert report.ok, report.summary()
