import itertools

import numpy as np
import pytest

from studmerge.tubes import (
    TubeConfig,
    TubeSet,
    default_tube_configs,
    extract_patches,
    patch_sum,
    resize_kernel,
    resize_kernel_adjoint,
    sinusoidal_encoding,
    space_to_depth,
    token_count,
    tokenize,
)


def trilinear_oracle(base, target):
    """Interpolate point by point from the 8 surrounding grid values."""
    src = base.shape[:3]
    out = np.zeros(tuple(target) + base.shape[3:])
    for idx in itertools.product(*(range(t) for t in target)):
        coord = [
            (n - 1) / 2.0 if t == 1 else i * (n - 1) / (t - 1)
            for i, n, t in zip(idx, src, target)
        ]
        lo = [min(int(np.floor(c)), n - 1) for c, n in zip(coord, src)]
        fr = [c - l for c, l in zip(coord, lo)]
        acc = 0.0
        for corner in itertools.product((0, 1), repeat=3):
            w = 1.0
            pos = []
            for c, l, f, n in zip(corner, lo, fr, src):
                w *= f if c else 1 - f
                pos.append(min(l + c, n - 1))
            acc = acc + w * base[tuple(pos)]
        out[idx] = acc
    return out


def test_token_count_examples():
    dims = (64, 224, 224)
    assert token_count(dims, TubeConfig((16, 16, 16), (16, 16, 16))) == 784
    assert token_count(dims, TubeConfig((1, 16, 16), (64, 16, 16))) == 196
    assert token_count(dims, TubeConfig(dims, (5, 7, 9))) == 1


def test_token_count_floor_semantics_and_offsets():
    cfg = TubeConfig((8, 8, 8), (16, 16, 16), (4, 0, 0))
    # t: (64 - 4 - 8) // 16 + 1 = 4 ; h, w: (224 - 8) // 16 + 1 = 14
    assert token_count((64, 224, 224), cfg) == 4 * 14 * 14


def test_kernel_must_fit():
    with pytest.raises(ValueError):
        token_count((4, 8, 8), TubeConfig((8, 8, 8), (8, 8, 8)))
    with pytest.raises(ValueError):
        token_count((8, 8, 8), TubeConfig((8, 8, 8), (8, 8, 8), (1, 0, 0)))


def test_invalid_configs():
    with pytest.raises(ValueError):
        TubeConfig((0, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        TubeConfig((1, 1, 1), (1, 1, 1), (-1, 0, 0))
    with pytest.raises(ValueError):
        TubeSet(embed_dim=0)


def test_default_tube_set_token_budget():
    ts = TubeSet()
    assert [c.label for c in ts.configs] == ["image", "video", "elongated", "spatial"]
    assert ts.token_count((64, 224, 224)) == 1176


def test_resize_identity_and_constant():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(8, 8, 8, 1, 3))
    np.testing.assert_array_equal(resize_kernel(base, (8, 8, 8)), base)
    const = np.full((8, 8, 8, 2, 2), 0.37)
    for target in [(1, 16, 16), (16, 4, 4), (3, 5, 7)]:
        np.testing.assert_allclose(resize_kernel(const, target), 0.37, atol=1e-12)


@pytest.mark.parametrize("target", [(4, 16, 16), (32, 4, 4), (1, 16, 16), (2, 3, 5)])
def test_resize_matches_brute_force_trilinear(target):
    t, h, w = np.meshgrid(*(np.arange(8.0),) * 3, indexing="ij")
    ramp = (0.5 * t - 0.25 * h + 0.125 * w)[..., None, None]
    rng = np.random.default_rng(1)
    noisy = rng.normal(size=(8, 8, 8, 1, 2))
    for base in (ramp, noisy):
        np.testing.assert_allclose(resize_kernel(base, target), trilinear_oracle(base, target),
                                   atol=1e-6)


def test_resize_adjoint_is_transpose():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(8, 8, 8, 1, 2))
    g = rng.normal(size=(16, 4, 4, 1, 2))
    lhs = np.sum(resize_kernel(base, (16, 4, 4)) * g)
    rhs = np.sum(base * resize_kernel_adjoint(g, base.shape))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_space_to_depth_rearrangement():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    x = np.array([[[[a], [b]], [[c], [d]]]])  # (1, 2, 2, 1)
    np.testing.assert_array_equal(space_to_depth(x, 2, project=False)[0, 0, 0], [a, b, c, d])
    np.testing.assert_array_equal(space_to_depth(x, 2)[0, 0, 0], [(a + b) / 2, (c + d) / 2])


@pytest.mark.parametrize("shape", [(3, 4, 6, 1), (2, 8, 2, 3), (1, 10, 10, 2)])
def test_space_to_depth_shapes(shape):
    x = np.random.default_rng(0).normal(size=shape)
    r = space_to_depth(x, 2, project=False)
    assert r.shape == (shape[0], shape[1] // 2, shape[2] // 2, 4 * shape[3])
    assert r.size == x.size
    p = space_to_depth(x, 2)
    assert p.shape[-1] == 2 * shape[3]
    assert p.size * 2 == x.size
    with pytest.raises(ValueError):
        space_to_depth(np.zeros((1, 3, 4, 1)), 2)


def test_zero_clip_gives_positional_encoding_only():
    ts = TubeSet(embed_dim=6)
    kernel = np.random.default_rng(0).normal(size=ts.base_kernel_shape)
    seq = tokenize(np.zeros((32, 64, 64, 1)), ts, kernel)
    content = tokenize(np.zeros((32, 64, 64, 1)), ts, kernel, positional=False)
    assert np.all(content.tokens == 0)
    np.testing.assert_array_equal(seq.tokens, sinusoidal_encoding(seq.positions, 6))
    assert len(seq) == ts.token_count((32, 64, 64))
    assert np.all((seq.positions >= 0) & (seq.positions <= 1))


def test_one_hot_kernel_samples_voxels():
    clip = np.arange(64, dtype=float).reshape(4, 4, 4, 1)
    ts = TubeSet([TubeConfig((2, 2, 2), (2, 2, 2), label="cube")], embed_dim=1)
    base = np.zeros(ts.base_kernel_shape)
    base[0, 0, 0, 0, 0] = 1.0
    seq = tokenize(clip, ts, base, positional=False)
    # placements in (t, h, w) row-major order sample voxel (2i, 2j, 2k)
    expected = [clip[2 * i, 2 * j, 2 * k, 0] for i in range(2) for j in range(2) for k in range(2)]
    np.testing.assert_array_equal(seq.tokens[:, 0], expected)


def test_tokenize_linear_in_content():
    rng = np.random.default_rng(3)
    ts = TubeSet(embed_dim=4)
    kernel = rng.normal(size=ts.base_kernel_shape)
    x, y = rng.random((2, 32, 64, 64, 1))
    content = lambda c: tokenize(c, ts, kernel, positional=False).tokens
    pe = tokenize(np.zeros_like(x), ts, kernel).tokens
    full = tokenize(2.0 * x - 0.5 * y, ts, kernel).tokens
    np.testing.assert_allclose(full - pe, 2.0 * content(x) - 0.5 * content(y), atol=1e-5)


def test_token_count_independent_of_content_and_blocks_permute():
    rng = np.random.default_rng(4)
    cfgs = default_tube_configs()
    a = TubeSet(cfgs, embed_dim=3)
    b = TubeSet(list(reversed(cfgs)), embed_dim=3)
    kernel = rng.normal(size=a.base_kernel_shape)
    clip = rng.random((32, 64, 64, 1))
    sa, sb = tokenize(clip, a, kernel), tokenize(clip, b, kernel)
    assert len(sa) == len(tokenize(np.ones_like(clip), a, kernel)) == a.token_count(clip.shape)
    for label in a.configs:
        ia = [i for i, l in enumerate(sa.source_labels) if l == label.label]
        ib = [i for i, l in enumerate(sb.source_labels) if l == label.label]
        np.testing.assert_array_equal(sa.tokens[ia], sb.tokens[ib])


def test_patch_sum_matches_extracted_patches():
    rng = np.random.default_rng(5)
    clip = rng.random((20, 30, 26, 2))
    for cfg in [TubeConfig((3, 5, 4), (4, 6, 5), (1, 2, 0)), TubeConfig((8, 8, 8), (2, 3, 8))]:
        np.testing.assert_allclose(patch_sum(clip, cfg), extract_patches(clip, cfg).sum(0))


def test_space_to_depth_stage_in_tube_set():
    ts = TubeSet([TubeConfig((2, 4, 4), (2, 4, 4))], embed_dim=2, space_to_depth=True)
    assert ts.base_kernel_shape == (8, 8, 8, 2, 2)
    assert ts.token_count((4, 16, 16)) == 2 * 2 * 2
    kernel = np.ones(ts.base_kernel_shape)
    assert len(tokenize(np.ones((4, 16, 16, 1)), ts, kernel)) == 8
