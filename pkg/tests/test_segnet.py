import numpy as np
import pytest

from bbuda import tensor as T
from bbuda.segnet import SegNet, SegNetConfig, init_parameters
from bbuda.synthdata import SOURCE_SPEC, generate_domain
from bbuda.tensor import ShapeError

from gradcheck import network_gradcheck


def test_forward_shape_contract():
    net = init_parameters(SegNetConfig(), seed=0).eval()
    out = net.forward(np.zeros((1, 4, 32, 32), np.float32))
    assert out.shape == (1, 4, 32, 32)


@pytest.mark.parametrize("depth,width,size", [(1, 2, 6), (2, 4, 8), (3, 8, 16), (4, 3, 16)])
def test_shape_preserved_for_valid_configs(depth, width, size):
    net = init_parameters(SegNetConfig(base_width=width, depth=depth, num_classes=3), 0).eval()
    assert net.forward(np.zeros((2, 4, size, size), np.float32)).shape == (2, 3, size, size)


def test_eval_forward_is_deterministic():
    net = init_parameters(SegNetConfig(), seed=1).eval()
    x = np.random.default_rng(0).random((1, 4, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x).data, net.forward(x).data)


def test_divisibility_and_channel_errors():
    net = init_parameters(SegNetConfig(), 0).eval()
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 4, 30, 32), np.float32))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 32, 32), np.float32))


@pytest.mark.parametrize("kw", [{"in_channels": 0}, {"num_classes": 1}, {"depth": 0},
                                {"dropout_rate": 1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SegNetConfig(**kw)


def test_parameter_count_is_a_function_of_config():
    cfg = SegNetConfig(base_width=6, depth=2)
    assert SegNet(cfg).num_parameters() == init_parameters(cfg, 5).num_parameters()
    # 15 conv blocks at the default depth: 2 per level down, 2 in the middle, 2 per level up, plus the head
    assert len([k for k in SegNet(SegNetConfig()).params if k.endswith("conv.weight")]) == 14


def test_same_seed_same_parameters_different_seed_differs():
    a, b, c = (init_parameters(SegNetConfig(), s) for s in (7, 7, 8))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_init_std_matches_he_scale():
    stds = {}
    for seed in range(5):
        net = init_parameters(SegNetConfig(), seed)
        for name, p in net.params.items():
            if name.endswith("conv.weight") or name == "head.weight":
                stds.setdefault(name, []).append((p.data.std(), np.sqrt(2.0 / np.prod(p.shape[1:]))))
    for name, pairs in stds.items():
        observed = np.mean([s for s, _ in pairs])
        expected = pairs[0][1]
        assert abs(observed - expected) <= 0.2 * expected, name
    net = init_parameters(SegNetConfig(), 0)
    for name in net.params:
        if name.endswith("bn.weight"):
            assert np.all(net.params[name].data == 1)
        if name.endswith("bn.bias") or name == "head.bias":
            assert np.all(net.params[name].data == 0)
    assert all(np.all(b == (1 if k.endswith("var") else 0)) for k, b in net.buffers.items())


def test_no_class_collapse_at_init():
    # fresh nets in evaluation mode on synthetic source images
    x = np.stack([s.image for s in generate_domain(SOURCE_SPEC, 8)])
    for seed in range(10):
        net = init_parameters(SegNetConfig(), seed).eval()
        means = T.softmax(net.forward(x)).data.mean(axis=(0, 2, 3))
        assert np.all((means >= 0.1) & (means <= 0.5)), (seed, means)


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(0)
    for seed in range(5):
        net = init_parameters(SegNetConfig(), seed).train()
        x = rng.random((2, 4, 32, 32)).astype(np.float32)
        net.zero_grad()
        probs = T.softmax(net.forward(x, rng=np.random.default_rng(seed)))
        T.cross_entropy(net.forward(x, rng=np.random.default_rng(seed)),
                        rng.integers(0, 4, (2, 32, 32))).backward()
        for name, p in net.params.items():
            assert p.grad is not None and np.any(p.grad != 0), (seed, name)
        assert probs.shape == (2, 4, 32, 32)


def test_training_forward_updates_running_stats_eval_does_not():
    net = init_parameters(SegNetConfig(base_width=4, depth=2), 0)
    x = np.random.default_rng(1).random((2, 4, 8, 8)).astype(np.float32)
    before = {k: b.copy() for k, b in net.buffers.items()}
    net.eval().forward(x)
    assert all(np.array_equal(before[k], net.buffers[k]) for k in before)
    net.train().forward(x, rng=np.random.default_rng(0))
    assert any(not np.array_equal(before[k], net.buffers[k]) for k in before)


def test_state_dict_round_trip():
    a = init_parameters(SegNetConfig(base_width=4, depth=2), 3)
    b = SegNet(a.config)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(2).random((1, 4, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(a.eval().forward(x).data, b.eval().forward(x).data)
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_full_objective_gradients_match_finite_differences():
    """Sampled entries of every parameter; the acceptance suite checks them all."""
    results = network_gradcheck(max_entries=12)
    bad = {k: v for k, v in results.items() if v[1] > 1.0}
    assert not bad, bad
    assert len(results) == len(init_parameters(SegNetConfig(base_width=4, depth=2), 0).params)
