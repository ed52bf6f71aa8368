import numpy as np
import pytest

from ccm import network
from ccm import tensor as T
from ccm.network import UNetConfig, forward, init, time_embed
from ccm.tensor import ShapeError, Tensor, grad_check

SMALL = UNetConfig(out_channels=3, base_width=16, channel_mults=(1, 2), depth=1, time_embed_dim=16)


def randomized_params(cfg, seed, dtype=np.float64):
    """Initial parameters with the zeroed output layer and the affine terms made random."""
    params = init(cfg, seed, dtype=dtype)
    rng = np.random.default_rng(seed + 99)
    for name, p in params.items():
        if name.startswith("out.conv") or name.endswith((".beta", ".bias")):
            p.data[...] = 0.3 * rng.standard_normal(p.shape)
        elif name.endswith(".gamma"):
            p.data[...] = 1.0 + 0.3 * rng.standard_normal(p.shape)
    return params


def test_init_is_deterministic():
    a, b = init(SMALL, 7), init(SMALL, 7)
    assert a.keys() == b.keys()
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


def test_init_differs_across_seeds():
    a, b = init(SMALL, 1), init(SMALL, 2)
    assert any(a[k].data.tobytes() != b[k].data.tobytes() for k in a)


def test_final_conv_is_zero():
    p = init(SMALL, 3)
    assert not p["out.conv.weight"].data.any()
    assert not p["out.conv.bias"].data.any()


def test_param_names_follow_documented_layout():
    names = set(init(UNetConfig(), 0))
    for required in ("time.lin1.weight", "conv_in.bias", "down0.res0.conv1.weight",
                     "down1.res0.skip.weight", "mid.res0.norm2.gamma", "up0.res0.temb.weight",
                     "out.norm.beta", "out.conv.weight"):
        assert required in names
    assert "down0.res0.skip.weight" not in names


def test_zero_final_layer_gives_zero_output():
    rng = np.random.default_rng(0)
    p = init(UNetConfig(), 0)
    out = forward(UNetConfig(), p, rng.uniform(-5, 5, (3, 16, 16)), rng.uniform(-1, 1, (3, 16, 16)), 3.7)
    assert out.shape == (3, 16, 16)
    assert not out.data.any()


def test_batched_forward_shape_and_per_sample_levels():
    rng = np.random.default_rng(1)
    p = randomized_params(SMALL, 0, np.float32)
    r = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    v = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    t = np.array([0.01, 0.5, 2.0, 80.0])
    out = forward(SMALL, p, r, v, t)
    assert out.shape == (4, 3, 8, 8)
    single = forward(SMALL, p, r[2], v[2], 2.0)
    np.testing.assert_allclose(out.data[2], single.data, rtol=1e-5, atol=1e-5)


def test_swapping_target_and_condition_changes_output():
    rng = np.random.default_rng(2)
    p = randomized_params(SMALL, 0, np.float32)
    a = rng.standard_normal((3, 8, 8)).astype(np.float32)
    b = rng.standard_normal((3, 8, 8)).astype(np.float32)
    assert not np.allclose(forward(SMALL, p, a, b, 1.0).data, forward(SMALL, p, b, a, 1.0).data)


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    p = randomized_params(SMALL, 0, np.float32)
    a, b = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    assert forward(SMALL, p, a, b, 0.7).data.tobytes() == forward(SMALL, p, a, b, 0.7).data.tobytes()


def test_forward_rejects_bad_extents():
    p = init(SMALL, 0)
    with pytest.raises(ShapeError):
        forward(SMALL, p, np.zeros((3, 8, 8)), np.zeros((3, 8, 6)), 1.0)
    with pytest.raises(ShapeError):
        forward(SMALL, p, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), 1.0)
    with pytest.raises(ShapeError):
        forward(SMALL, p, np.zeros((3, 7, 7)), np.zeros((3, 7, 7)), 1.0)


def test_time_embed_at_one():
    e = time_embed(1.0, 8).data
    np.testing.assert_array_equal(e, [0, 0, 0, 0, 1, 1, 1, 1])


def test_time_embed_pure_and_distinct():
    assert time_embed(0.3, 16).data.tobytes() == time_embed(0.3, 16).data.tobytes()
    assert not np.array_equal(time_embed(0.3, 16).data, time_embed(0.6, 16).data)


def test_time_embed_rejects_odd_dim():
    with pytest.raises(ValueError):
        time_embed(1.0, 7)


def unet_max_grad_error(cfg=SMALL, per_tensor=3, seed=0):
    """Worst relative FD error over every parameter tensor and the noisy input at 8×8."""
    rng = np.random.default_rng(seed)
    params = randomized_params(cfg, seed)
    r = rng.standard_normal((2, 3, 8, 8))
    v = rng.standard_normal((2, 3, 8, 8))
    t = np.array([0.3, 4.0])
    weights = Tensor(rng.standard_normal((2, 3, 8, 8)), dtype=np.float64)

    def loss_with(name):
        def fn(x):
            p = dict(params)
            if name == "input":
                out = forward(cfg, p, x, Tensor(v, dtype=np.float64), t)
            else:
                p[name] = x
                out = forward(cfg, p, Tensor(r, dtype=np.float64), Tensor(v, dtype=np.float64), t)
            return T.tsum(T.mul(out, weights))
        return fn

    worst = 0.0
    targets = [("input", Tensor(r, dtype=np.float64))] + list(params.items())
    for name, x in targets:
        coords = rng.choice(x.data.size, size=min(per_tensor, x.data.size), replace=False)
        err = grad_check(loss_with(name), Tensor(x.data.copy(), dtype=np.float64), step=1e-6, coords=coords)
        worst = max(worst, err)
    return worst


def test_unet_gradients_match_finite_differences():
    assert unet_max_grad_error(per_tensor=2) < 1e-4


def test_groups_for_divides_channels():
    for c in (1, 3, 6, 8, 12, 16, 24, 64):
        g = network.groups_for(c)
        assert c % g == 0 and 1 <= g <= 8
