import numpy as np
import pytest

from conftest import fd_jacobian, rel_close
from ntklab.errors import ConfigError, DimensionError, LayoutError
from ntklab.model import (
    NetworkSpec,
    backward,
    build_layout,
    embed,
    forward,
    forward_cached,
    head_jacobian,
    init_params,
    jacobian,
    load_matrix,
    load_params,
    param_count,
    save_matrix,
    save_params,
)
from ntklab.numerics import make_rng


def reference_forward(params, x):
    """Layer equation evaluated neuron by neuron with explicit loops."""
    spec = params.spec
    sw, sb = spec.sigma_w, spec.sigma_b
    out = []
    for sample in x:
        h = sample
        if spec.conv_front:
            c0 = spec.conv_front[0]
            img = sample.reshape(c0.in_channels, c0.image_h, c0.image_w)
            for i, c in enumerate(spec.conv_front):
                w = params.block(f"conv{i}.w")
                b = params.block(f"conv{i}.b")
                nxt = np.zeros((c.out_channels, c.out_h, c.out_w))
                for o in range(c.out_channels):
                    for r in range(c.out_h):
                        for s in range(c.out_w):
                            patch = img[:, r : r + c.kernel_h, s : s + c.kernel_w]
                            u = sw * np.sum(w[o] * patch) / np.sqrt(c.fan_in) + sb * b[o]
                            nxt[o, r, s] = max(u, 0.0)
                img = nxt
            h = img.ravel()
        names = [f"dense{i}" for i in range(len(spec.hidden_widths))] + ["head"]
        for k, name in enumerate(names):
            w = params.block(f"{name}.w")
            b = params.block(f"{name}.b")
            u = np.array([sw * sum(w[i, j] * h[j] for j in range(w.shape[1])) / np.sqrt(w.shape[1]) + sb * b[i] for i in range(w.shape[0])])
            h = u if k == len(names) - 1 else np.maximum(u, 0.0)
        out.append(h)
    return np.array(out)


def test_param_count():
    spec = NetworkSpec(2, (4,), 3)
    assert param_count(spec) == 4 * 2 + 4 + 3 * 4 + 3 == 27
    p = init_params(spec, make_rng(0))
    assert p.size == 27
    blocks = sorted(build_layout(spec).values())
    assert blocks[0].offset == 0
    for a, b in zip(blocks, blocks[1:]):
        assert a.offset + a.size == b.offset


def test_init_deterministic():
    spec = NetworkSpec(3, (5,), 2)
    assert init_params(spec, make_rng(7)).theta.tobytes() == init_params(spec, make_rng(7)).theta.tobytes()


def test_zero_hook_gives_zero_output():
    spec = NetworkSpec(3, (5, 4), 2, sigma_b=0.0)
    p = init_params(spec, make_rng(1), init_hook=np.zeros(param_count(spec)))
    assert np.all(forward(p, make_rng(2).standard_normal((4, 3))) == 0)


def test_hook_mapping_and_mismatch():
    spec = NetworkSpec(3, (5,), 2)
    p = init_params(spec, make_rng(1), init_hook={"head.b": [1.0, 2.0]})
    np.testing.assert_array_equal(p.block("head.b"), [1.0, 2.0])
    with pytest.raises(LayoutError, match="expected 2"):
        init_params(spec, make_rng(1), init_hook={"head.b": [1.0]})
    with pytest.raises(LayoutError, match="expected"):
        init_params(spec, make_rng(1), init_hook=np.zeros(3))
    with pytest.raises(LayoutError):
        init_params(spec, make_rng(1), init_hook=lambda s, lay: {"nope": 0})


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec(3, (0,), 2)
    with pytest.raises(ConfigError):
        NetworkSpec(10, (), 2, conv_front=((2, 1, 3, 3, 4, 4),))


def test_linear_scaling():
    d = 4
    spec = NetworkSpec(d, (), d, sigma_w=1.0, sigma_b=0.0)
    p = init_params(spec, make_rng(0), init_hook={"head.w": np.eye(d), "head.b": np.zeros(d)})
    x = make_rng(1).standard_normal((3, d))
    np.testing.assert_allclose(forward(p, x), x / np.sqrt(d))


@pytest.mark.parametrize("fixture", ["small_net", "conv_net"])
def test_forward_matches_reference(fixture, request):
    p = request.getfixturevalue(fixture)
    x = make_rng(3).standard_normal((3, p.spec.input_dim))
    np.testing.assert_allclose(forward(p, x), reference_forward(p, x), rtol=1e-12, atol=1e-12)


def test_forward_dimension_error(small_net):
    with pytest.raises(DimensionError):
        forward(small_net, np.zeros((2, 5)))


def test_sigma_w_homogeneity():
    spec = NetworkSpec(5, (16,), 3, sigma_w=1.0, sigma_b=0.0)
    p = init_params(spec, make_rng(4))
    x = make_rng(5).standard_normal((4, 5))
    q = init_params(NetworkSpec(5, (16,), 3, sigma_w=2.5, sigma_b=0.0), make_rng(4))
    np.testing.assert_allclose(forward(q, x), 2.5**2 * forward(p, x), rtol=1e-12)


def test_linear_model_jacobian():
    d, p_out = 4, 2
    spec = NetworkSpec(d, (), p_out, sigma_w=1.0, sigma_b=0.5)
    p = init_params(spec, make_rng(0))
    x = make_rng(1).standard_normal((1, d))
    j = jacobian(p, x)
    w_cols = p.layout["head.w"].slice
    b_cols = p.layout["head.b"].slice
    for q in range(p_out):
        expect = np.zeros((p_out, d))
        expect[q] = x[0] / np.sqrt(d)
        np.testing.assert_allclose(j[q, w_cols], expect.ravel())
        np.testing.assert_allclose(j[q, b_cols], 0.5 * np.eye(p_out)[q])


@pytest.mark.parametrize("fixture", ["small_net", "conv_net"])
def test_jacobian_finite_difference(fixture, request):
    p = request.getfixturevalue(fixture)
    x = make_rng(8).standard_normal((2, p.spec.input_dim))
    j = jacobian(p, x)
    assert j.shape == (2 * p.spec.output_dim, p.size)
    fd = fd_jacobian(lambda t: forward(p.with_theta(t), x), p.theta)
    assert rel_close(j, fd, 1e-4, atol_floor=1e-6)


def test_jacobian_batch_stacking(conv_net):
    x = make_rng(9).standard_normal((2, conv_net.spec.input_dim))
    j = jacobian(conv_net, x)
    np.testing.assert_allclose(j, np.vstack([jacobian(conv_net, x[:1]), jacobian(conv_net, x[1:])]), atol=1e-14)


def test_head_jacobian_is_column_restriction(conv_net):
    x = make_rng(10).standard_normal((3, conv_net.spec.input_dim))
    np.testing.assert_allclose(head_jacobian(conv_net, x), jacobian(conv_net, x)[:, conv_net.head_columns()], atol=1e-14)


def test_linearization(small_net):
    x = make_rng(11).standard_normal((4, 6))
    delta = make_rng(12).standard_normal(small_net.size)
    delta *= 1e-3 / np.linalg.norm(delta)
    actual = forward(small_net.with_theta(small_net.theta + delta), x) - forward(small_net, x)
    predicted = (jacobian(small_net, x) @ delta).reshape(actual.shape)
    assert np.linalg.norm(actual - predicted) / np.linalg.norm(actual) < 1e-2


def test_backward_embedding_cotangent(conv_net):
    x = make_rng(13).standard_normal((2, conv_net.spec.input_dim))
    g = make_rng(14).standard_normal((2, conv_net.spec.embedding_dim))
    analytic = backward(conv_net, forward_cached(conv_net, x), None, grad_embedding=g)
    fd = fd_jacobian(lambda t: np.sum(g * embed(conv_net.with_theta(t), x)), conv_net.theta)[0]
    assert rel_close(analytic, fd, 1e-4, atol_floor=1e-6)


def test_width_doubling_quadruples_hidden_block():
    spec = NetworkSpec(4, (8, 8), 2, conv_front=())
    wide = spec.widened(2)
    assert build_layout(wide)["dense1.w"].size == 4 * build_layout(spec)["dense1.w"].size
    conv = NetworkSpec(2 * 5 * 5, (8,), 3, conv_front=((3, 2, 3, 3, 5, 5), (4, 3, 2, 2, 3, 3)))
    assert build_layout(conv.widened(2))["conv1.w"].size == 4 * build_layout(conv)["conv1.w"].size


def test_checkpoint_roundtrip(conv_net, tmp_path):
    path = tmp_path / "p.ntkp"
    save_params(conv_net, path)
    assert path.read_bytes()[:4] == b"NTKP"
    loaded = load_params(path)
    assert loaded.spec == conv_net.spec
    assert loaded.theta.tobytes() == conv_net.theta.tobytes()
    m = make_rng(0).standard_normal((3, 4))
    save_matrix(m, tmp_path / "m.bin")
    assert load_matrix(tmp_path / "m.bin").tobytes() == m.tobytes()
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(LayoutError):
        load_params(tmp_path / "bad")
