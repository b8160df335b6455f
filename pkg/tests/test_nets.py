import math

import numpy as np
import pytest

from gramclust import nets
from gramclust.nets import SgdmConfig, init_convnet
from gramclust.robusttrain import train_erm
from gramclust.synthdata import GroupedDataset
from .gradcheck import check_gradients


def naive_forward(net, img):
    """Direct per-pixel convolution, channels-first, float64."""
    a = np.asarray(img, dtype=np.float64)
    acts = []
    for li in nets.LAYER_IDS:
        w = net.params[f"conv{li}.w"].astype(np.float64)  # [3, 3, cin, cout]
        b = net.params[f"conv{li}.b"].astype(np.float64)
        cin, h, wd = a.shape
        cout = w.shape[3]
        out = np.zeros((cout, h, wd))
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    s = b[o]
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < h and 0 <= jj < wd:
                                for c in range(cin):
                                    s += w[di, dj, c, o] * a[c, ii, jj]
                    out[o, i, j] = max(s, 0.0)
        a = out
        acts.append(out)
    pooled = a.mean(axis=(1, 2))
    return pooled @ net.params["fc.w"].astype(np.float64) + net.params["fc.b"], acts


def test_forward_matches_naive_convolution(rng):
    net = init_convnet(3, 4, seed=2)
    net.params["conv2.b"] = rng.normal(scale=0.1, size=16).astype(np.float32)
    img = rng.standard_normal((3, 6, 5)).astype(np.float32)
    ref, _ = naive_forward(net, img)
    assert np.allclose(nets.forward(net, img), ref, atol=1e-4)


def test_extract_matches_layer_by_layer(rng):
    net = init_convnet(3, 2, seed=3)
    img = rng.standard_normal((3, 5, 5)).astype(np.float32)
    _, acts = naive_forward(net, img)
    fms = nets.extract_features(net, img, [1, 2, 3])
    for fm, a in zip(fms, acts):
        assert fm.values.shape == (25, a.shape[0])
        assert np.allclose(fm.values, a.reshape(a.shape[0], -1).T, atol=1e-4)


def test_zero_weights_zero_logits(rng):
    net = init_convnet(3, 3, seed=0)
    net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
    assert np.array_equal(nets.forward(net, rng.standard_normal((2, 3, 8, 8))), np.zeros((2, 3)))


def test_scaling_head_scales_logits(rng):
    net = init_convnet(3, 2, seed=0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    a = nets.forward(net, x)
    net.params["fc.w"] = net.params["fc.w"] * 2
    assert np.allclose(nets.forward(net, x), 2 * a, rtol=1e-6)


def test_feature_shapes_and_zero_input():
    net = init_convnet(3, 2, seed=0)
    fms = nets.extract_features(net, np.zeros((3, 16, 16), np.float32), [1])
    assert fms[0].values.shape == (256, 8)
    assert not fms[0].values.any()


def test_errors():
    net = init_convnet(3, 2, seed=0)
    with pytest.raises(ValueError, match="unknown layer"):
        nets.extract_features(net, np.zeros((3, 8, 8)), [4])
    with pytest.raises(ValueError):
        nets.forward(net, np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        nets.loss_and_grads(net, np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int))


def test_uniform_logits_loss_is_ln2():
    losses, _ = nets.softmax_xent(np.zeros((3, 2)), np.array([0, 1, 0]))
    assert np.allclose(losses, math.log(2))


def test_huge_margin_loss_vanishes():
    losses, _ = nets.softmax_xent(np.array([[500.0, -500.0]]), np.array([0]))
    assert losses[0] < 1e-12


def test_gradients_match_finite_differences():
    checked, rechecked, failures = check_gradients(seed=0)
    assert checked == sum(v.size for v in init_convnet(3, 2, 0).params.values())
    assert failures == []


def test_weighted_loss_gradient_is_linear_in_weights(rng):
    net = init_convnet(3, 2, seed=5, dtype=np.float64)
    x, y = rng.standard_normal((4, 3, 6, 6)), np.array([0, 1, 0, 1])
    _, g1 = nets.loss_and_grads(net, x, y, weights=np.array([1.0, 0, 0, 0]))
    _, g2 = nets.loss_and_grads(net, x, y, weights=np.array([0, 1.0, 0, 0]))
    _, g12 = nets.loss_and_grads(net, x, y, weights=np.array([1.0, 1.0, 0, 0]))
    for k in g1:
        assert np.allclose(g12[k], g1[k] + g2[k])


def _grads_like(net, value):
    return {k: np.full_like(v, value) for k, v in net.params.items()}


def test_plain_sgd_step():
    net = init_convnet(3, 2, seed=0, dtype=np.float64)
    g = _grads_like(net, 0.5)
    new, _ = nets.sgdm_step(net, g, SgdmConfig(lr=0.1, l2=0.0, momentum=0.0), None)
    for k in net.params:
        assert np.allclose(new.params[k], net.params[k] - 0.05)


def test_pure_weight_decay():
    net = init_convnet(3, 2, seed=0, dtype=np.float64)
    new, _ = nets.sgdm_step(net, _grads_like(net, 0.0), SgdmConfig(lr=0.1, l2=0.5, momentum=0.0), None)
    for k in net.params:
        assert np.allclose(new.params[k], net.params[k] * (1 - 0.05))


def test_two_momentum_steps_match_unrolled_recursion(rng):
    cfg = SgdmConfig(lr=0.1, l2=0.01, momentum=0.9)
    net = init_convnet(3, 2, seed=0, dtype=np.float64)
    g1 = {k: rng.standard_normal(v.shape) for k, v in net.params.items()}
    g2 = {k: rng.standard_normal(v.shape) for k, v in net.params.items()}
    n1, state = nets.sgdm_step(net, g1, cfg, None)
    n2, _ = nets.sgdm_step(n1, g2, cfg, state)
    for k, t0 in net.params.items():
        v1 = g1[k] + cfg.l2 * t0
        t1 = t0 - cfg.lr * v1
        v2 = cfg.momentum * v1 + g2[k] + cfg.l2 * t1
        assert np.allclose(n2.params[k], t1 - cfg.lr * v2)


@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(l2=-0.1), dict(momentum=1.0), dict(batch_size=0)])
def test_sgdm_config_validation(bad):
    with pytest.raises(ValueError):
        SgdmConfig(**bad)


def _toy(n=256, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(scale=0.3, size=(n, 3, 8, 8)).astype(np.float32)
    x[:, 0] += (2 * y - 1)[:, None, None]
    return GroupedDataset(x, y.astype(np.int64), 2)


def test_zero_epochs_returns_initial_net():
    ds = _toy()
    cfg = SgdmConfig(epochs=0, seed=1)
    rep = train_erm(ds, cfg)
    from gramclust.robusttrain import init_net

    ref = init_net(ds, cfg)
    assert all(np.array_equal(rep.net.params[k], ref.params[k]) for k in nets.PARAM_NAMES)


def test_one_epoch_lowers_loss():
    ds = _toy()
    cfg = SgdmConfig(lr=0.05, epochs=1, batch_size=16, seed=0)
    from gramclust.robusttrain import init_net

    before = nets.softmax_xent(nets.forward(init_net(ds, cfg), ds.images), ds.y)[0].mean()
    after = nets.softmax_xent(nets.forward(train_erm(ds, cfg).net, ds.images), ds.y)[0].mean()
    assert after < before


def test_checkpoint_round_trip(tmp_path):
    net = init_convnet(3, 2, seed=9)
    nets.save_checkpoint(net, tmp_path / "ck", seed=9, epoch=3)
    back = nets.load_checkpoint(tmp_path / "ck")
    assert all(np.array_equal(back.params[k], net.params[k]) for k in nets.PARAM_NAMES)
    import json

    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["epoch"] == 3
    manifest["n_classes"] = 5
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="architecture"):
        nets.load_checkpoint(tmp_path / "ck")


def test_python_backend_forward_agrees(pure_python, rng):
    net = init_convnet(3, 2, seed=2)
    img = rng.standard_normal((3, 5, 5)).astype(np.float32)
    ref, _ = naive_forward(net, img)
    assert np.allclose(nets.forward(net, img), ref, atol=1e-4)
