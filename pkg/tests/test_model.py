"""Transformer tests: window attention against a masked-global oracle,
embedding-sum exactness, joint keyframe attention, gradients, multiply counts.
"""

import math

import numpy as np
import pytest

import framefill.tensor as tc
from framefill.errors import ContractError, GeometryError
from framefill.model import (
    MIX_LABEL,
    SCORE_LABEL,
    ModelConfig,
    embed,
    forward,
    init_parameters,
    joint_keyframe_attention,
    parameter_names,
    score_multiplies,
    spatial_window_attention,
    tube_window_attention,
)
from framefill.tokenizer import TokenGrid


def attn_params(c, rng, prefix="attn", dtype=np.float64):
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{name}"] = tc.tensor(rng.normal(0.0, 0.5, (c, c)), dtype=dtype)
    for name in ("bq", "bk", "bv", "bo"):
        p[f"{prefix}.{name}"] = tc.tensor(rng.normal(0.0, 0.5, c), dtype=dtype)
    return p


def masked_global_attention(x, params, heads, allowed):
    """Reference: full multi-head attention over every position, with pairs
    outside `allowed` forced to -inf before the softmax.
    """
    p, c = x.shape
    dh = c // heads
    q = (x @ params["attn.wq"].data + params["attn.bq"].data)
    k = (x @ params["attn.wk"].data + params["attn.bk"].data)
    v = (x @ params["attn.wv"].data + params["attn.bv"].data)
    q = q.reshape(p, heads, dh).transpose(1, 0, 2)
    k = k.reshape(p, heads, dh).transpose(1, 0, 2)
    v = v.reshape(p, heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    scores = np.where(allowed[None], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    mixed = (weights @ v).transpose(1, 0, 2).reshape(p, c)
    return mixed @ params["attn.wo"].data + params["attn.bo"].data


GEOMETRIES = [
    # (n, h, w, heads, c, window_h, window_w)
    (1, 2, 2, 1, 4, 1, 1),
    (3, 4, 4, 2, 8, 2, 2),
    (2, 4, 4, 4, 8, 1, 4),
    (4, 2, 6, 2, 8, 2, 3),
    (2, 4, 4, 2, 8, 4, 4),  # one window covering the whole grid
    (3, 3, 3, 1, 6, 1, 3),
]


@pytest.mark.parametrize("n,h,w,heads,c,wh,ww", GEOMETRIES)
def test_spatial_attention_matches_masked_global(n, h, w, heads, c, wh, ww):
    rng = np.random.default_rng(101)
    x = rng.normal(0.0, 1.0, (n, h, w, c))
    params = attn_params(c, rng)
    out = spatial_window_attention(tc.tensor(x, np.float64), params, "attn", heads)
    frame = np.repeat(np.arange(n), h * w)
    allowed = frame[:, None] == frame[None, :]
    expected = masked_global_attention(x.reshape(-1, c), params, heads, allowed)
    np.testing.assert_allclose(
        out.data.reshape(-1, c), expected, rtol=1e-10, atol=1e-10
    )


@pytest.mark.parametrize("n,h,w,heads,c,wh,ww", GEOMETRIES)
def test_tube_attention_matches_masked_global(n, h, w, heads, c, wh, ww):
    rng = np.random.default_rng(202)
    x = rng.normal(0.0, 1.0, (n, h, w, c))
    params = attn_params(c, rng)
    out = tube_window_attention(tc.tensor(x, np.float64), params, "attn", heads, wh, ww)
    rows = np.tile(np.repeat(np.arange(h), w), n)
    cols = np.tile(np.arange(w), n * h)
    same_window = (rows[:, None] // wh == rows[None, :] // wh) & (
        cols[:, None] // ww == cols[None, :] // ww
    )
    expected = masked_global_attention(x.reshape(-1, c), params, heads, same_window)
    np.testing.assert_allclose(
        out.data.reshape(-1, c), expected, rtol=1e-10, atol=1e-10
    )


def test_tube_attention_rejects_nondividing_window():
    rng = np.random.default_rng(3)
    x = tc.tensor(rng.normal(size=(2, 4, 4, 4)), np.float64)
    params = attn_params(4, rng)
    with pytest.raises(GeometryError):
        tube_window_attention(x, params, "attn", 1, 3, 2)


def small_config(**overrides):
    base = dict(
        n_frames=3,
        grid_h=4,
        grid_w=4,
        color_vocab=7,
        structure_vocab=5,
        embed_dim=8,
        heads=2,
        blocks=1,
        window_h=2,
        window_w=2,
        conv_factor=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def grids_for(config, rng, n=None):
    n = config.n_frames if n is None else n
    shape = (n, config.grid_h, config.grid_w)
    color = TokenGrid(
        rng.integers(0, config.color_vocab, shape),
        rng.random(shape) < 0.4,
        config.color_vocab,
    )
    structure = TokenGrid(
        rng.integers(0, config.structure_vocab, shape),
        np.zeros(shape, bool),
        config.structure_vocab,
    )
    return color, structure


def test_embedding_sum_is_exact():
    config = small_config()
    rng = np.random.default_rng(7)
    params = init_parameters(config, rng)
    color, structure = grids_for(config, rng)
    n, h, w = color.shape
    keep = (rng.random((n, h, w)) < 0.5).astype(np.float32)

    out = embed(color, structure, params, config, struct_keep=keep)
    assert out.shape == (n, h, w, config.embed_dim)

    ids = np.where(color.mask, config.color_vocab, color.indices).reshape(-1)
    ec = params["color_embed"].data[ids]
    es = params["struct_embed"].data[structure.indices.reshape(-1)]
    es = es * keep.reshape(-1, 1)
    ps = params["pos_spatial"].data[np.tile(np.arange(h * w), n)]
    pt = params["pos_temporal"].data[np.repeat(np.arange(n), h * w)]
    expected = ((ec + es) + (ps + pt)).reshape(n, h, w, config.embed_dim)
    assert np.array_equal(out.data, expected)

    # a dropped position carries no structure term at all
    dropped = np.argwhere(keep.reshape(-1) == 0.0)[0][0]
    bare = (ec + (ps + pt))[dropped]
    assert np.array_equal(out.data.reshape(-1, config.embed_dim)[dropped], bare)


def test_embed_rejects_masked_structure_and_bad_shapes():
    config = small_config()
    rng = np.random.default_rng(8)
    params = init_parameters(config, rng)
    color, structure = grids_for(config, rng)
    holey = TokenGrid(
        structure.indices, np.ones(structure.shape, bool), structure.vocab
    )
    with pytest.raises(ContractError):
        embed(color, holey, params, config)
    with pytest.raises(GeometryError):
        embed(color, structure, params, config, struct_keep=np.ones((1, 2, 3)))
    short = TokenGrid(
        structure.indices[:2], np.zeros((2, 4, 4), bool), structure.vocab
    )
    with pytest.raises(GeometryError):
        embed(color, short, params, config)


def test_config_validation():
    with pytest.raises(ContractError):
        small_config(embed_dim=7)  # not divisible by 2 heads
    with pytest.raises(GeometryError):
        small_config(grid_h=5)  # odd grid with conv_factor 2
    with pytest.raises(ContractError):
        small_config(conv_factor=3)
    with pytest.raises(GeometryError):
        small_config(window_h=3)  # does not fit the 2x2 post-conv grid
    with pytest.raises(GeometryError):
        small_config(conv_factor=1, window_h=3)  # 4 % 3 != 0
    cfg = small_config()
    assert cfg.mask_id == cfg.color_vocab
    assert cfg.inner_grid == (2, 2)
    assert small_config(conv_factor=1).inner_grid == (4, 4)


def test_init_parameters_order_and_values():
    config = small_config(blocks=2)
    params = init_parameters(config, np.random.default_rng(0))
    assert list(params) == parameter_names(config)
    assert params["color_embed"].shape == (config.color_vocab + 1, config.embed_dim)
    assert np.array_equal(
        params["block0.spatial.norm.gain"].data, np.ones(8, np.float32)
    )
    assert not params["block1.mlp2.b1"].data.any()
    assert not params["head.bias"].data.any()
    again = init_parameters(config, np.random.default_rng(0))
    for name in params:
        assert np.array_equal(params[name].data, again[name].data)
    other = init_parameters(config, np.random.default_rng(1))
    assert not np.array_equal(params["head.weight"].data, other["head.weight"].data)


@pytest.mark.parametrize("conv_factor", [1, 2])
def test_forward_shape_and_determinism(conv_factor):
    config = small_config(conv_factor=conv_factor)
    rng = np.random.default_rng(11)
    params = init_parameters(config, rng)
    color, structure = grids_for(config, rng)
    logits = forward(color, structure, params, config)
    assert logits.shape == (3, 4, 4, config.color_vocab)
    assert np.isfinite(logits.data).all()

    rng2 = np.random.default_rng(11)
    params2 = init_parameters(config, rng2)
    color2, structure2 = grids_for(config, rng2)
    logits2 = forward(color2, structure2, params2, config)
    assert np.array_equal(logits.data, logits2.data)


def test_forward_ignores_placeholder_ids_under_mask():
    config = small_config()
    rng = np.random.default_rng(13)
    params = init_parameters(config, rng)
    color, structure = grids_for(config, rng)
    assert color.mask.any()
    logits = forward(color, structure, params, config)

    scrambled = color.copy()
    scrambled.indices[scrambled.mask] = 0
    logits2 = forward(scrambled, structure, params, config)
    assert np.array_equal(logits.data, logits2.data)


def test_forward_uses_structure_unless_dropped():
    config = small_config()
    rng = np.random.default_rng(17)
    params = init_parameters(config, rng)
    color, structure = grids_for(config, rng)
    other_structure = TokenGrid(
        (structure.indices + 1) % config.structure_vocab,
        np.zeros(structure.shape, bool),
        config.structure_vocab,
    )
    base = forward(color, structure, params, config)
    swapped = forward(color, other_structure, params, config)
    assert not np.array_equal(base.data, swapped.data)

    drop = np.zeros(color.shape, np.float32)
    dropped_a = forward(color, structure, params, config, struct_keep=drop)
    dropped_b = forward(color, other_structure, params, config, struct_keep=drop)
    assert np.array_equal(dropped_a.data, dropped_b.data)


def full_model_loss_fn(config, color, structure, targets, names):
    masked_rows = np.flatnonzero(color.mask.reshape(-1))

    def loss_fn(leaves):
        tied = dict(zip(names, leaves))
        logits = forward(color, structure, tied, config)
        flat = tc.reshape(logits, (color.mask.size, config.color_vocab))
        return tc.cross_entropy(tc.gather_rows(flat, masked_rows), targets)

    return loss_fn


def test_full_model_gradients_against_finite_differences():
    config = small_config(n_frames=2)
    rng = np.random.default_rng(23)
    base = init_parameters(config, rng, dtype=np.float64)
    color, structure = grids_for(config, rng)
    targets = rng.integers(0, config.color_vocab, int(color.mask.sum()))
    names = list(base)
    loss_fn = full_model_loss_fn(config, color, structure, targets, names)

    # random parameter points: the whole gradient against a directional
    # central difference (componentwise FD cannot resolve 1e-7 on partials
    # near its own roundoff floor, ~4e-11 absolute at eps=1e-5)
    for trial in range(4):
        prng = np.random.default_rng(1000 + trial)
        points = [prng.normal(0.0, 0.3, base[n].shape) for n in names]
        rel = tc.grad_check_direction(
            loss_fn, points, rng=np.random.default_rng(trial)
        )
        assert rel < 1e-7, f"point {trial}: {rel}"

    # componentwise sweep at the coarser tolerance
    prng = np.random.default_rng(5000)
    points = [prng.normal(0.0, 0.3, base[n].shape) for n in names]
    worst = tc.grad_check(loss_fn, points, max_checks=48, rng=np.random.default_rng(1))
    assert worst < 1e-4


def test_joint_keyframe_single_frame_is_self_attention():
    rng = np.random.default_rng(31)
    x = rng.normal(0.0, 1.0, (5, 6))
    out, weights = joint_keyframe_attention(
        tc.tensor(x, np.float64),
        [tc.tensor(x, np.float64)],
        [tc.tensor(x, np.float64)],
        return_weights=True,
    )
    scores = x @ x.T / math.sqrt(6)
    scores = scores - scores.max(axis=-1, keepdims=True)
    ref_w = np.exp(scores)
    ref_w /= ref_w.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(weights.data, ref_w, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.data, ref_w @ x, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, rtol=1e-12)


def test_joint_keyframe_duplicated_set_halves_weights():
    rng = np.random.default_rng(37)
    q = tc.tensor(rng.normal(size=(4, 6)), np.float64)
    k1, k2 = (tc.tensor(rng.normal(size=(3, 6)), np.float64) for _ in range(2))
    v1, v2 = (tc.tensor(rng.normal(size=(3, 6)), np.float64) for _ in range(2))
    out, weights = joint_keyframe_attention(q, [k1, k2], [v1, v2], return_weights=True)
    out2, weights2 = joint_keyframe_attention(
        q, [k1, k2, k1, k2], [v1, v2, v1, v2], return_weights=True
    )
    np.testing.assert_allclose(out2.data, out.data, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(
        weights2.data[:, :6], 0.5 * weights.data, rtol=1e-12, atol=1e-12
    )
    np.testing.assert_allclose(
        weights2.data[:, 6:], 0.5 * weights.data, rtol=1e-12, atol=1e-12
    )
    np.testing.assert_allclose(weights2.data.sum(axis=-1), 1.0, rtol=1e-12)


def test_joint_keyframe_gradients_flow_through_concat():
    rng = np.random.default_rng(41)
    points = [rng.normal(size=(3, 4)) for _ in range(5)]

    def fn(leaves):
        q, k1, k2, v1, v2 = leaves
        return tc.sum_all(joint_keyframe_attention(q, [k1, k2], [v1, v2]))

    assert tc.grad_check(fn, points) < 1e-7


def test_joint_keyframe_contracts():
    rng = np.random.default_rng(43)
    q = tc.tensor(rng.normal(size=(4, 6)), np.float64)
    k = tc.tensor(rng.normal(size=(3, 6)), np.float64)
    v = tc.tensor(rng.normal(size=(3, 6)), np.float64)
    with pytest.raises(ContractError):
        joint_keyframe_attention(q, [], [])
    with pytest.raises(ContractError):
        joint_keyframe_attention(q, [k, k], [v])
    with pytest.raises(GeometryError):
        joint_keyframe_attention(q, [k], [tc.tensor(rng.normal(size=(2, 6)), np.float64)])
    with pytest.raises(GeometryError):
        joint_keyframe_attention(q, [tc.tensor(rng.normal(size=(3, 5)), np.float64)], [v])


def test_attention_ops_are_frame_permutation_equivariant():
    rng = np.random.default_rng(404)
    x = rng.normal(0.0, 1.0, (5, 4, 4, 8))
    params = attn_params(8, rng)
    perm = np.array([3, 0, 4, 2, 1])

    base = spatial_window_attention(tc.tensor(x, np.float64), params, "attn", 2)
    shuffled = spatial_window_attention(tc.tensor(x[perm], np.float64), params, "attn", 2)
    np.testing.assert_allclose(shuffled.data, base.data[perm], rtol=1e-12, atol=1e-12)

    # tube windows span every frame symmetrically, so the op commutes with
    # frame reorderings too (only the summation order shifts)
    base = tube_window_attention(tc.tensor(x, np.float64), params, "attn", 2, 2, 2)
    shuffled = tube_window_attention(
        tc.tensor(x[perm], np.float64), params, "attn", 2, 2, 2
    )
    np.testing.assert_allclose(shuffled.data, base.data[perm], rtol=1e-12, atol=1e-12)


def test_forward_frame_permutation_equivariance_without_temporal_embedding():
    config = small_config(n_frames=4)
    rng = np.random.default_rng(55)
    params = init_parameters(config, rng, dtype=np.float64)
    color, structure = grids_for(config, rng)
    perm = np.array([2, 0, 3, 1])
    p_color = TokenGrid(color.indices[perm], color.mask[perm], color.vocab)
    p_structure = TokenGrid(structure.indices[perm], structure.mask[perm], structure.vocab)

    # only the temporal position table distinguishes frame order
    base = forward(color, structure, params, config)
    out = forward(p_color, p_structure, params, config)
    assert not np.allclose(out.data, base.data[perm], rtol=1e-6, atol=1e-6)

    params["pos_temporal"] = tc.tensor(
        np.zeros_like(params["pos_temporal"].data), np.float64
    )
    base = forward(color, structure, params, config)
    out = forward(p_color, p_structure, params, config)
    np.testing.assert_allclose(out.data, base.data[perm], rtol=1e-10, atol=1e-10)


def test_spatial_attention_is_framewise_local():
    rng = np.random.default_rng(77)
    x = rng.normal(0.0, 1.0, (4, 4, 4, 8))
    params = attn_params(8, rng)
    bumped = x.copy()
    bumped[2] += rng.normal(0.0, 1.0, (4, 4, 8))
    base = spatial_window_attention(tc.tensor(x, np.float64), params, "attn", 2)
    out = spatial_window_attention(tc.tensor(bumped, np.float64), params, "attn", 2)
    assert np.array_equal(out.data[[0, 1, 3]], base.data[[0, 1, 3]])
    assert not np.array_equal(out.data[2], base.data[2])


def test_tube_attention_is_windowwise_local():
    rng = np.random.default_rng(78)
    x = rng.normal(0.0, 1.0, (3, 4, 6, 8))
    params = attn_params(8, rng)
    bumped = x.copy()
    bumped[:, :2, :3] += rng.normal(0.0, 1.0, (3, 2, 3, 8))  # window (0, 0) only
    base = tube_window_attention(tc.tensor(x, np.float64), params, "attn", 2, 2, 3)
    out = tube_window_attention(tc.tensor(bumped, np.float64), params, "attn", 2, 2, 3)
    assert np.array_equal(out.data[:, 2:, :], base.data[:, 2:, :])
    assert np.array_equal(out.data[:, :2, 3:], base.data[:, :2, 3:])
    assert not np.array_equal(out.data[:, :2, :3], base.data[:, :2, :3])


def test_score_multiply_analytics_match_instrumented_counts():
    config = small_config(blocks=2)
    rng = np.random.default_rng(47)
    params = init_parameters(config, rng)
    color, structure = grids_for(config, rng)
    n = color.shape[0]

    counter = tc.MultiplyCounter()
    with tc.count_multiplies(counter):
        forward(color, structure, params, config)
    expected = config.blocks * (
        score_multiplies("spatial", config, n) + score_multiplies("tube", config, n)
    )
    assert counter[SCORE_LABEL] == expected
    assert counter[MIX_LABEL] == expected  # A V costs the same as Q K^T
    assert counter["default"] > 0  # projections, MLPs, convs, head


def test_tube_to_global_ratio_is_window_fraction():
    for config, n in [
        (small_config(), 3),
        (small_config(grid_h=8, grid_w=8, window_h=2, window_w=4), 4),
        (small_config(conv_factor=1, window_h=2, window_w=2), 2),
    ]:
        ih, iw = config.inner_grid
        tube = score_multiplies("tube", config, n)
        glob = score_multiplies("global", config, n)
        assert tube * ih * iw == glob * config.window_h * config.window_w
    with pytest.raises(ContractError):
        score_multiplies("sideways", small_config())
