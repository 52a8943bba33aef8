import numpy as np
import pytest
from conftest import central_difference
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vgsplat.appearance import (
    ColorMLP,
    DirHashGrid,
    color,
    color_backward,
    encode,
    encode_backward,
    hash_index,
    level_resolutions,
    perturb_direction,
    sphere_slots,
    view_direction,
)

vec3 = arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-2)


def _grid(**kw):
    kw.setdefault("log2_T", 14)
    g = DirHashGrid(**kw)
    g.tables = np.random.default_rng(5).normal(size=g.tables.shape)
    return g


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_default_resolutions():
    res = level_resolutions(8, 8, 64)
    assert res[0] == 8 and res[-1] == 64
    assert np.all(np.diff(res) > 0)
    assert DirHashGrid(log2_T=10).out_dim == 16


def test_hash_zero_cell():
    assert hash_index(np.zeros(3, dtype=np.int64)) == 0


def test_hash_hand_example():
    q = np.array([0.5, -0.5, 0.25])
    s = 2.0 / 8
    cell = np.floor(q / s).astype(np.int64)
    assert cell.tolist() == [2, -2, 1]
    # the same combiner on Python integers
    wrap = 1 << 32
    h = ((2 * 1) % wrap) ^ (((-2) % wrap) * 2654435761 % wrap) ^ ((1 * 805459861) % wrap)
    assert hash_index(cell, 19) == h % (1 << 19)
    assert 0 <= hash_index(cell, 19) < 1 << 19


@given(arrays(np.int64, 3, elements=st.integers(-200, 200)))
def test_hash_range_and_purity(cell):
    a = hash_index(cell, 12)
    assert 0 <= a < 4096
    assert a == hash_index(cell.copy(), 12)


def test_view_direction_examples():
    np.testing.assert_array_equal(view_direction([0, 0, 1.0], [0, 0, 0]), [0, 0, 1.0])
    np.testing.assert_allclose(view_direction([3.0, 4.0, 0.0], [0, 0, 0]), [0.6, 0.8, 0.0], atol=1e-15)
    with pytest.raises(ValueError):
        view_direction([1.0, 1, 1], [1.0, 1, 1])


def test_view_direction_unit_norm():
    rng = np.random.default_rng(0)
    d = view_direction(rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3)))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


def test_perturb():
    d = _unit(np.random.default_rng(1).normal(size=(50, 3)))
    np.testing.assert_array_equal(perturb_direction(d, 0.0, None), d)
    a = perturb_direction(d, 0.1, np.random.default_rng(2))
    b = perturb_direction(d, 0.1, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        perturb_direction(d, -1.0, None)


def test_encode_rejects_non_unit():
    with pytest.raises(ValueError):
        encode(_grid(), np.array([[1.0, 1.0, 0.0]]))


def _corner_point(res, cell):
    return np.asarray(cell, dtype=np.float64) * 2.0 / res


def test_corner_exact():
    g = _grid(levels=1, base_res=8, max_res=8)
    # (0.5, 0, 0) lies on a lattice node at resolution 8 and is not unit; bypass the check
    p = _corner_point(8, [2, 0, 0])
    feats, _ = encode(g, p[None], check_unit=False)
    np.testing.assert_array_equal(feats[0], g.tables[0, hash_index(np.array([2, 0, 0]), g.log2_T)])


def test_unit_direction_on_node():
    g = _grid(levels=1, base_res=8, max_res=8)
    feats, ctx = encode(g, np.array([[0.0, 0.0, 1.0]]))
    np.testing.assert_array_equal(feats[0], g.tables[0, hash_index(np.array([0, 0, 4]), g.log2_T)])
    w = ctx.weight[0, 0]
    assert sorted(w.tolist())[-1] == 1.0 and np.sum(w != 0) == 1


def test_cell_center_mean():
    g = _grid(levels=1, base_res=8, max_res=8)
    cell = np.array([1, -2, 3])
    center = (cell + 0.5) * 2.0 / 8
    feats, _ = encode(g, center[None], check_unit=False)
    corners = cell + np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    expected = g.tables[0, hash_index(corners, g.log2_T)].mean(axis=0)
    np.testing.assert_allclose(feats[0], expected, atol=1e-12)


@settings(max_examples=50)
@given(arrays(np.float64, 8, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(0, 1)))
def test_trilinear_polynomial_reproduced(coef, frac):
    g = _grid(levels=1, base_res=8, max_res=8, n_features=1)
    cell = np.array([1, 2, -3])

    def poly(p):
        x, y, z = p
        return (coef[0] + coef[1] * x + coef[2] * y + coef[3] * z + coef[4] * x * y + coef[5] * x * z
                + coef[6] * y * z + coef[7] * x * y * z)

    corners = cell + np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
    slots = hash_index(corners, g.log2_T)
    assert len(set(slots.tolist())) == 8
    for c, s in zip(corners, slots):
        g.tables[0, s, 0] = poly(c * 0.25)
    q = (cell + np.clip(frac, 0, 1 - 1e-12)) * 0.25
    feats, _ = encode(g, q[None], check_unit=False)
    np.testing.assert_allclose(feats[0, 0], poly(q), atol=1e-12)


def test_continuity_across_boundary():
    g = _grid()
    # z-component crosses the level-0 boundary at 0.75 (cell edge 0.25)
    y = 0.3
    for eps in (1e-12, 1e-13):
        a = _unit([np.sqrt(1 - 0.75**2 - y**2), y, 0.75 - eps])
        b = _unit([np.sqrt(1 - 0.75**2 - y**2), y, 0.75 + eps])
        fa, ca = encode(g, a[None])
        fb, cb = encode(g, b[None])
        assert not np.array_equal(ca.index[0, 0], cb.index[0, 0])
        assert np.max(np.abs(fa - fb)) <= 1e-9


def test_lipschitz_inside_cell():
    g = _grid()
    rng = np.random.default_rng(3)
    d = _unit(rng.normal(size=(200, 3)))
    d2 = _unit(d + 1e-7 * rng.normal(size=d.shape))
    fa, _ = encode(g, d)
    fb, _ = encode(g, d2)
    step = np.linalg.norm(d - d2, axis=1)
    # trilinear slope is bounded by table range times resolution
    k = 2 * np.abs(g.tables).max() * 64 * 3
    assert np.all(np.linalg.norm(fa - fb, axis=1) <= k * step * np.sqrt(16) + 1e-12)


def test_backward_partition_of_unity():
    g = _grid()
    d = _unit(np.random.default_rng(4).normal(size=(30, 3)))
    _, ctx = encode(g, d)
    np.testing.assert_allclose(ctx.weight.sum(axis=2), 1.0, atol=1e-12)
    up = np.random.default_rng(5).normal(size=(30, g.out_dim))
    sg = encode_backward(ctx, up, g)
    dense = sg.to_dense(g.tables.shape)
    per_level = dense.sum(axis=1)
    np.testing.assert_allclose(per_level, up.sum(0).reshape(g.levels, g.n_features), atol=1e-10)


def test_backward_at_corner():
    g = _grid(levels=1, base_res=8, max_res=8)
    _, ctx = encode(g, np.array([[0.0, 0.0, 1.0]]))
    dense = encode_backward(ctx, np.array([[2.0, -1.0]])).to_dense(g.tables.shape)
    slot = hash_index(np.array([0, 0, 4]), g.log2_T)
    np.testing.assert_array_equal(dense[0, slot], [2.0, -1.0])
    assert np.count_nonzero(dense) == 2


def test_backward_stale_context():
    g = _grid()
    _, ctx = encode(g, np.array([[0.0, 1.0, 0.0]]))
    g.version += 1
    with pytest.raises(ValueError):
        encode_backward(ctx, np.zeros((1, g.out_dim)), g)


def test_table_gradient_finite_difference():
    g = _grid(log2_T=10)
    d = _unit(np.random.default_rng(6).normal(size=(3, 3)))
    w = np.random.default_rng(7).normal(size=(3, g.out_dim))
    _, ctx = encode(g, d)
    dense = encode_backward(ctx, w).to_dense(g.tables.shape)
    slots = np.unique(ctx.index[:, 2].ravel())[:4]
    for s in slots:
        sub = g.tables[2, s]

        def f():
            return float(np.sum(encode(g, d)[0] * w))

        fd = central_difference(f, sub, 1e-5)
        np.testing.assert_allclose(dense[2, s], fd, rtol=1e-4, atol=1e-8)


def test_sphere_slots_contain_touched():
    g = DirHashGrid(log2_T=16)
    slots = sphere_slots(g)
    d = _unit(np.random.default_rng(8).normal(size=(5000, 3)))
    _, ctx = encode(g, d)
    for lvl in range(g.levels):
        touched = np.unique(ctx.index[:, lvl].ravel())
        assert np.all(np.isin(touched, slots[lvl]))
    # the shell covers far fewer slots than the full level-0 cube
    assert len(slots[0]) < 9**3


def test_mlp_zero_weights_half():
    mlp = ColorMLP(4, 8)
    for k in mlp.params:
        mlp.params[k][...] = 0.0
    rgb, _ = color(mlp, np.ones((2, 2)), np.ones((2, 2)))
    np.testing.assert_array_equal(rgb, 0.5)


def test_mlp_dimension_mismatch():
    with pytest.raises(ValueError):
        color(ColorMLP(5, 8), np.ones((1, 2)), np.ones((1, 2)))


def test_mlp_direction_sensitivity():
    mlp = ColorMLP(4, 16, seed=1)
    a, _ = color(mlp, np.ones((1, 2)), np.array([[0.1, 0.2]]))
    b, _ = color(mlp, np.ones((1, 2)), np.array([[0.3, -0.2]]))
    assert not np.allclose(a, b)


def test_mlp_gradients_finite_difference():
    rng = np.random.default_rng(9)
    mlp = ColorMLP(6, 8, seed=2)
    fe = rng.normal(size=(5, 3))
    de = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 3))

    def f():
        return float(np.sum(color(mlp, fe, de)[0] * w))

    rgb, cache = color(mlp, fe, de)
    grads, dfe, dde = color_backward(mlp, cache, w)
    for name, arr in mlp.params.items():
        np.testing.assert_allclose(grads[name], central_difference(f, arr, 1e-6), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(dfe, central_difference(f, fe, 1e-6), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(dde, central_difference(f, de, 1e-6), rtol=1e-4, atol=1e-8)


@given(vec3)
def test_encode_deterministic(v):
    g = _grid(log2_T=10)
    d = _unit(v)[None]
    np.testing.assert_array_equal(encode(g, d)[0], encode(g, d)[0])
