import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reinforced_features.errors import FormatError, OutOfBounds, ShapeMismatch, StaleCache
from reinforced_features.model import (
    AdamState,
    DescriptorField,
    HeatMap,
    ModelParams,
    adam_step,
    backward,
    descriptor_at,
    depth_to_space,
    forward,
    init_params,
    load_checkpoint,
    log_softmax,
    log_softmax_backward,
    save_checkpoint,
    space_to_depth,
)
from reinforced_features.rng import make_rng

GOLDEN = "1518bf421d26f88e3beb80a711b36ff681c56c922b6287cf7c38cc33785374c3"


def _digest(heat, fields):
    m = hashlib.sha256()
    for h in heat:
        m.update(h.logp.tobytes())
    for f in fields:
        m.update(f.grid.tobytes())
    return m.hexdigest()


def test_forward_golden():
    img = make_rng(11).random((2, 16, 16))
    heat, fields, _ = forward(img, init_params(0))
    assert _digest(heat, fields) == GOLDEN


def test_forward_repeatable():
    img = make_rng(3).random((32, 32))
    a = forward(img, init_params(5))
    b = forward(img, init_params(5))
    assert _digest(a[0], a[1]) == _digest(b[0], b[1])


def test_zero_image_uniform_heatmap():
    (h,), _, _ = forward(np.zeros((16, 16)), init_params(1))
    assert np.allclose(h.prob, 1.0 / 256, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_outputs_normalised(seed):
    img = make_rng(seed).random((2, 16, 20))
    heat, fields, _ = forward(img, init_params(seed % 7))
    for h, f in zip(heat, fields):
        assert h.shape == (16, 20)
        assert abs(h.prob.sum() - 1.0) < 1e-6
        assert (h.prob >= 0).all()
        assert np.allclose(np.linalg.norm(f.dense(), axis=-1), 1.0, atol=1e-6)


def test_forward_shape_errors():
    with pytest.raises(ShapeMismatch):
        forward(np.zeros((15, 16)), init_params(0))
    with pytest.raises(ShapeMismatch):
        forward(np.zeros((1, 1, 16, 16)), init_params(0))


def test_parameter_budget():
    assert init_params(0).size <= 50_000


def test_weights_on_float32_grid():
    p = init_params(4)
    for name in p.names():
        assert np.array_equal(p[name], p[name].astype(np.float32).astype(np.float64))


def test_depth_to_space_roundtrip():
    x = make_rng(0).normal(size=(2, 16, 3, 5))
    assert np.array_equal(space_to_depth(depth_to_space(x)), x)
    y = depth_to_space(x)
    # channel r*4+c of cell (i, j) lands on pixel (4i+r, 4j+c)
    assert y[1, 4 * 2 + 3, 4 * 4 + 1] == x[1, 3 * 4 + 1, 2, 4]


# ------------------------------------------------------------ descriptors


def _field(seed=0, hc=4, wc=5, d=3, stride=4):
    g = make_rng(seed).normal(size=(hc, wc, d))
    return DescriptorField(g, stride, (hc * stride, wc * stride))


def _unit(v):
    return v / np.linalg.norm(v)


def test_descriptor_on_node():
    f = _field()
    # node (row 2, col 3) sits at pixel 4*k + 1.5
    assert np.allclose(descriptor_at(f, (4 * 3 + 1.5, 4 * 2 + 1.5)), _unit(f.grid[2, 3]), atol=1e-12)


def test_descriptor_midpoint():
    f = _field(1)
    x = (4 * 1 + 1.5 + 2.0, 4 * 2 + 1.5)
    assert np.allclose(descriptor_at(f, x), _unit(0.5 * (f.grid[2, 1] + f.grid[2, 2])), atol=1e-12)


def _bilinear_oracle(grid, stride, x, y):
    hc, wc, _ = grid.shape
    gx = min(max((x + 0.5) / stride - 0.5, 0.0), wc - 1)
    gy = min(max((y + 0.5) / stride - 0.5, 0.0), hc - 1)
    out = np.zeros(grid.shape[2])
    for r in range(hc):
        for c in range(wc):
            w = max(0.0, 1 - abs(gx - c)) * max(0.0, 1 - abs(gy - r))
            out += w * grid[r, c]
    return _unit(out)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 19), st.floats(0, 15))
def test_descriptor_matches_bilinear_oracle(seed, x, y):
    f = _field(seed)
    assert np.allclose(descriptor_at(f, (x, y)), _bilinear_oracle(f.grid, 4, x, y), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-3, 1e3))
def test_descriptor_scale_invariant(seed, c):
    f = _field(seed)
    g = DescriptorField(f.grid * c, f.stride, f.image_shape)
    pts = make_rng(seed).uniform(0, 15, (6, 2))
    assert np.allclose(f.lookup(pts), g.lookup(pts), atol=1e-9)


def test_descriptor_out_of_bounds():
    f = _field()
    with pytest.raises(OutOfBounds):
        descriptor_at(f, (-0.1, 3.0))
    with pytest.raises(OutOfBounds):
        descriptor_at(f, (3.0, 16.0))


def test_lookup_backward_matches_differences():
    f = _field(3)
    pts = make_rng(4).uniform(0, 15, (5, 2))
    gu = make_rng(5).normal(size=(5, 3))
    gg = f.lookup_backward(pts, gu)
    eps = 1e-6
    num = np.zeros_like(f.grid)
    for idx in np.ndindex(f.grid.shape):
        g = f.grid.copy()
        g[idx] += eps
        up = np.sum(gu * DescriptorField(g, 4, f.image_shape).lookup(pts))
        g[idx] -= 2 * eps
        dn = np.sum(gu * DescriptorField(g, 4, f.image_shape).lookup(pts))
        num[idx] = (up - dn) / (2 * eps)
    assert np.allclose(gg, num, atol=1e-7)


# ------------------------------------------------------------ softmax


def test_log_softmax_jacobian():
    logits = make_rng(6).normal(size=(3, 4))
    logp = log_softmax(logits)
    soft = np.exp(logp).ravel()
    for p in range(12):
        g = np.zeros(12)
        g[p] = 1.0
        row = log_softmax_backward(g.reshape(3, 4), logp).ravel()
        assert np.allclose(row, np.eye(12)[p] - soft, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_heatmap_gradient_sums_to_zero(seed):
    r = make_rng(seed)
    logp = log_softmax(r.normal(size=(8, 8)))
    g = log_softmax_backward(r.normal(size=(8, 8)), logp)
    assert abs(g.sum()) < 1e-8


def test_heatmap_from_prob():
    h = HeatMap.from_prob([[0.25, 0.75]])
    assert np.allclose(h.prob, [[0.25, 0.75]])


# ------------------------------------------------------------ backward


def test_zero_upstream_gives_zero_gradient():
    p = init_params(0)
    _, _, cache = forward(make_rng(0).random((2, 16, 16)), p)
    grads = backward(cache, None, None)
    assert all(not g.any() for g in grads.values())
    assert list(grads) == p.names()


def test_backward_finite_differences_small():
    # a linear functional of the outputs, differenced on a handful of weights
    p = init_params(2)
    img = make_rng(9).random((1, 8, 8))
    r = make_rng(10)
    a = r.normal(size=(1, 8, 8))
    b = r.normal(size=(1, 2, 2, p.desc_dim))

    def value(q):
        heat, fields, _ = forward(img, q)
        return float(np.sum(a * heat[0].logp) + np.sum(b * fields[0].grid))

    _, _, cache = forward(img, p)
    grads = backward(cache, a, b)
    picks = [("heat.w", (3, 5, 1, 1)), ("desc.b", (7,)), ("conv2.w", (4, 2, 0, 2)), ("conv1.b", (5,))]
    for name, idx in picks:
        q = p.copy()
        q[name][idx] += 1e-5
        up = value(q)
        q[name][idx] -= 2e-5
        dn = value(q)
        num = (up - dn) / 2e-5
        assert grads[name][idx] == pytest.approx(num, rel=1e-4, abs=1e-7)


def test_stale_cache():
    p = init_params(0)
    _, _, cache = forward(np.zeros((8, 8)), p)
    adam_step(p, {k: np.zeros_like(v) for k, v in p.tensors.items()}, AdamState(), 0.1)
    with pytest.raises(StaleCache):
        backward(cache, None, None)


# ------------------------------------------------------------ adam


def test_adam_first_step():
    p = ModelParams({"w": np.array([0.5])})
    adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.1)
    assert p["w"][0] == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-7)


def test_adam_two_steps_closed_form():
    p = ModelParams({"w": np.array([0.0])})
    s = AdamState()
    g, lr = 0.5, 0.01
    adam_step(p, {"w": np.array([g])}, s, lr)
    adam_step(p, {"w": np.array([g])}, s, lr)
    m2 = 0.9 * 0.1 * g + 0.1 * g
    v2 = 0.999 * 0.001 * g * g + 0.001 * g * g
    assert s.t == 2
    assert s.m["w"][0] == pytest.approx(m2, rel=1e-12)
    assert s.v["w"][0] == pytest.approx(v2, rel=1e-12)
    # constant gradients: each bias-corrected step is lr * g / (|g| + eps)
    assert p["w"][0] == pytest.approx(-2 * lr, rel=1e-6)


def test_adam_zero_gradient_is_noop():
    p = init_params(0)
    before = p.flat()
    adam_step(p, {k: np.zeros_like(v) for k, v in p.tensors.items()}, AdamState(), 1e-3)
    assert np.array_equal(before, p.flat())


def test_adam_shape_mismatch():
    p = init_params(0)
    with pytest.raises(ShapeMismatch):
        adam_step(p, {"conv1.b": np.zeros(3)}, AdamState(), 1e-3)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p)
    q = load_checkpoint(path)
    assert q.names() == p.names()
    for n in p.names():
        assert np.array_equal(p[n], q[n])


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_params(0))
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_params(0))
    path.write_bytes(b"X" + path.read_bytes()[1:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_params(0))
    data = bytearray(path.read_bytes())
    data[8] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)
