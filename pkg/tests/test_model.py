import math

import numpy as np
import pytest

from lrn import gradcheck
from lrn import model as M
from lrn import tensor_ops as T
from lrn.errors import DataError, DimensionError, UsageError

TINY = gradcheck.TINY_CONFIG


@pytest.fixture(scope="module")
def desk():
    cfg = M.ModelConfig(num_classes=5)
    return cfg, M.init_params(cfg, 3)


def test_config_validation():
    with pytest.raises(DimensionError):
        M.ModelConfig(num_classes=1)
    with pytest.raises(DimensionError):
        M.ModelConfig(num_classes=3, input_size=(50, 64))
    with pytest.raises(DimensionError):
        M.ModelConfig(num_classes=3, encoder_channels=(4, 4, 0, 4, 4))


def test_init_deterministic_and_contract():
    a = M.init_params(TINY, 5)
    b = M.init_params(TINY, 5)
    assert list(a.tensors) == list(b.tensors)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)
    for name, v in a.tensors.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert not v.any()
        if name.endswith(".gamma"):
            assert np.all(v == 1)
    for s in a.bn.values():
        assert not s.running_mean.any() and np.all(s.running_var == 1)


def test_init_variance_statistical():
    cfg = M.ModelConfig(num_classes=3, encoder_channels=(16, 64, 64, 64, 64))
    w = M.init_params(cfg, 0).tensors["enc.2.conv.0.weight"]
    assert w.shape == (64, 16, 3, 3)
    expected = 2 / (16 * 9)
    assert abs(w.var() - expected) <= 0.3 * expected


def test_encoder_shapes(desk):
    cfg, params = desk
    image = np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32)
    feats, bottom = M.encoder_forward(params, image)
    assert [f.shape[2] for f in feats] == [64, 32, 16, 8, 4]
    assert [f.shape[1] for f in feats] == list(cfg.encoder_channels)
    assert bottom.shape == (1, 64, 2, 2)


def test_encoder_zero_image(desk):
    _, params = desk
    _, bottom = M.encoder_forward(params.copy(), np.zeros((2, 3, 64, 64), np.float32))
    assert not bottom.any()


def test_encoder_rejects_bad_input(desk):
    _, params = desk
    with pytest.raises(DimensionError):
        M.encoder_forward(params, np.zeros((1, 4, 64, 64), np.float32))
    with pytest.raises(DimensionError):
        M.encoder_forward(params, np.zeros((1, 3, 48, 64), np.float32))


def test_refine_stage_shape_and_zero(desk):
    cfg, params = desk
    C = cfg.num_classes
    out = M.refine_stage(params.copy(), 2, np.zeros((1, C, 2, 2), np.float32),
                         np.random.default_rng(1).standard_normal((1, 64, 4, 4)).astype(np.float32))
    assert out.shape == (1, C, 4, 4)
    zeroed = params.copy()
    for k, v in zeroed.tensors.items():
        if k.startswith("dec.2.") and not k.endswith(".gamma"):
            zeroed.tensors[k] = np.zeros_like(v)
    out = M.refine_stage(zeroed, 2, np.zeros((1, C, 2, 2), np.float32), np.zeros((1, 64, 4, 4), np.float32))
    assert not out.any()


def test_refine_stage_wiring_order(desk):
    """Fuse conv that copies the upsampled half must reproduce the upsample."""
    cfg, params = desk
    C = cfg.num_classes
    p = params.copy()
    p.tensors["dec.3.skip.weight"][:] = 0
    p.tensors["dec.3.skip.bn.beta"][:] = 0
    fuse = np.zeros((C, 2 * C, 3, 3), np.float32)
    for c in range(C):
        fuse[c, c, 1, 1] = 1
    p.tensors["dec.3.fuse.weight"] = fuse
    p.tensors["dec.3.fuse.bias"] = np.zeros(C, np.float32)
    rng = np.random.default_rng(2)
    s_prev = rng.standard_normal((2, C, 4, 4)).astype(np.float32)
    f_skip = rng.standard_normal((2, 64, 8, 8)).astype(np.float32)
    out = M.refine_stage(p, 3, s_prev, f_skip)
    np.testing.assert_allclose(out, T.upsample_bilinear2x(s_prev), rtol=1e-6, atol=1e-6)


def test_refine_stage_spatial_mismatch(desk):
    cfg, params = desk
    with pytest.raises(DimensionError):
        M.refine_stage(params.copy(), 2, np.zeros((1, 5, 2, 2), np.float32), np.zeros((1, 64, 8, 8), np.float32))


def test_forward_pyramid(desk):
    cfg, params = desk
    out = M.model_forward(params.copy(), np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32))
    assert [s.shape for s in out.s] == [(1, 5, d, d) for d in (2, 4, 8, 16, 32, 64)]
    assert [cfg.stage_size(k) for k in range(1, 7)] == [(d, d) for d in (2, 4, 8, 16, 32, 64)]


def test_batch_independence_at_inference(desk):
    _, params = desk
    x = np.random.default_rng(4).standard_normal((2, 3, 64, 64)).astype(np.float32)
    both = M.model_forward(params, x, mode="infer").s
    for i in range(2):
        single = M.model_forward(params, x[i:i + 1], mode="infer").s
        for a, b in zip(both, single):
            np.testing.assert_allclose(a[i:i + 1], b, rtol=1e-5, atol=1e-5)


def test_forward_deterministic(desk):
    _, params = desk
    x = np.random.default_rng(5).standard_normal((2, 3, 64, 64)).astype(np.float32)
    a = M.model_forward(params.copy(), x)
    b = M.model_forward(params.copy(), x)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(a.s, b.s))


# ---------------------------------------------------------------- targets

def test_downsampled_targets():
    cfg = M.ModelConfig(num_classes=4, input_size=(64, 64))
    const = np.full((1, 64, 64), 3, np.uint8)
    for r, k in zip(M.downsampled_targets(const, cfg), range(1, 7)):
        assert r.shape == (1,) + cfg.stage_size(k) and np.all(r == 3)
    gt = np.random.default_rng(0).integers(0, 4, (2, 64, 64)).astype(np.uint8)
    gt[0, :5, :5] = 255
    r6 = M.downsampled_targets(gt, cfg)[-1]
    np.testing.assert_array_equal(r6, gt)
    assert np.any(M.downsampled_targets(gt, cfg)[3] == 255)


def test_downsampled_targets_block_centers():
    blocks = np.array([[1, 2], [3, 0]], np.uint8).repeat(2, 0).repeat(2, 1)
    (r,) = M.downsampled_targets(blocks, [(2, 2)])
    np.testing.assert_array_equal(r, [[1, 2], [3, 0]])


# ---------------------------------------------------------------- loss

def _fake_outputs(C, logits_fn, n=1, size=64):
    return [logits_fn(n, C, size // 2 ** (6 - k)) for k in range(1, 7)]


def test_total_loss_uniform():
    C = 5
    stages = _fake_outputs(C, lambda n, c, d: np.zeros((n, c, d, d), np.float32))
    targets = M.downsampled_targets(np.zeros((1, 64, 64), np.uint8), [(s.shape[2], s.shape[3]) for s in stages])
    loss, per_stage, grads = M.total_loss(stages, targets, np.ones(C))
    assert loss == pytest.approx(6 * math.log(C), abs=1e-6)
    assert loss == sum(per_stage)
    assert len(grads) == 6


def test_total_loss_saturated():
    C = 3
    gt = np.random.default_rng(0).integers(0, C, (1, 64, 64)).astype(np.uint8)
    sizes = [(64 // 2 ** (6 - k),) * 2 for k in range(1, 7)]
    targets = M.downsampled_targets(gt, sizes)
    stages = []
    for t in targets:
        z = np.zeros((1, C) + t.shape[1:], np.float32)
        np.put_along_axis(z, t[:, None].astype(np.intp), 20.0, axis=1)
        stages.append(z)
    loss, _, _ = M.total_loss(stages, targets, np.ones(C))
    assert loss < 1e-6


def test_total_loss_label_out_of_range():
    stages = _fake_outputs(3, lambda n, c, d: np.zeros((n, c, d, d), np.float32), size=32)
    targets = M.downsampled_targets(np.full((1, 32, 32), 7, np.uint8), [(s.shape[2],) * 2 for s in stages])
    with pytest.raises(DataError):
        M.total_loss(stages, targets, np.ones(3))


# ---------------------------------------------------------------- backward

def _tiny_problem(seed=0):
    rng = np.random.default_rng(seed)
    params = M.init_params(TINY, seed).astype(np.float64)
    image = rng.uniform(-1, 1, (2, 3, 32, 32))
    targets = M.downsampled_targets(rng.integers(0, 3, (2, 32, 32)), TINY)
    return params, image, targets


def test_backward_zero_logit_grads():
    params, image, _ = _tiny_problem()
    out = M.model_forward(params.copy(), image)
    grads = M.model_backward(params, out, [np.zeros_like(s) for s in out.s])
    assert set(grads) == set(params.tensors)
    assert not any(g.any() for g in grads.values())


def test_backward_needs_cache():
    params, image, _ = _tiny_problem()
    out = M.model_forward(params, image, mode="infer")
    with pytest.raises(UsageError):
        M.model_backward(params, out, [np.zeros_like(s) for s in out.s])


def test_end_to_end_directional_derivative():
    res = gradcheck.check_end_to_end(seed=3)
    assert res.passed, res.max_rel_err


def test_encoder_accumulates_all_heads():
    params, image, targets = _tiny_problem(1)
    out = M.model_forward(params.copy(), image)
    _, _, lg = M.total_loss(out, targets, np.ones(3))
    full = M.model_backward(params, out, lg)
    lg_detached = lg[:5] + [np.zeros_like(lg[5])]
    partial = M.model_backward(params, out, lg_detached)
    diff = np.abs(full["enc.1.conv.0.weight"] - partial["enc.1.conv.0.weight"]).max()
    assert diff > 0
    assert not partial["dec.6.fuse.weight"].any()


def test_predict_returns_labels(desk):
    _, params = desk
    labels = M.predict(params, np.zeros((2, 3, 64, 64), np.float32))
    assert labels.shape == (2, 64, 64) and labels.max() < 5
