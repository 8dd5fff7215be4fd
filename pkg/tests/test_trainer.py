import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrn import dataio, gradcheck
from lrn import model as M
from lrn import trainer as Tr
from lrn.errors import CodecError, DimensionError

TINY = gradcheck.TINY_CONFIG


def test_lr_schedule_examples():
    cfg = Tr.TrainConfig()
    assert Tr.lr_schedule(cfg, 0) == 0.001
    assert Tr.lr_schedule(cfg, 49999) == 0.001
    assert Tr.lr_schedule(cfg, 50000) == pytest.approx(1e-4, rel=1e-12)
    assert Tr.lr_schedule(cfg, 120000) == pytest.approx(1e-5, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(a=st.integers(0, 200000), b=st.integers(0, 200000))
def test_lr_schedule_nonincreasing(a, b):
    cfg = Tr.TrainConfig()
    lo, hi = min(a, b), max(a, b)
    assert Tr.lr_schedule(cfg, hi) <= Tr.lr_schedule(cfg, lo)
    if lo // cfg.lr_step == hi // cfg.lr_step:
        assert Tr.lr_schedule(cfg, hi) == Tr.lr_schedule(cfg, lo)


def test_train_config_validation():
    for bad in ({"base_lr": 0}, {"lr_gamma": 0}, {"lr_gamma": 1.5}, {"batch_size": 0}, {"lr_step": 0}):
        with pytest.raises(ValueError):
            Tr.TrainConfig(**bad)


def _step(theta, g, lr, momentum=0.0, wd=0.0, v=None, name="w.weight"):
    cfg = Tr.TrainConfig(momentum=momentum, weight_decay=wd)
    t = {name: np.array([theta], np.float64)}
    state = Tr.OptState({name: np.array([0.0 if v is None else v])})
    Tr.sgd_step(t, {name: np.array([g], np.float64)}, state, lr, cfg)
    return t[name][0], state.velocity[name][0]


def test_sgd_examples():
    assert _step(1.0, 2.0, 0.1)[0] == pytest.approx(0.8)
    assert _step(2.0, 0.0, 0.1, wd=0.5)[0] == pytest.approx(1.9)
    th1, v1 = _step(0.0, 1.0, 0.1, momentum=0.9)
    th2, v2 = _step(th1, 1.0, 0.1, momentum=0.9, v=v1)
    assert (v1, th1) == pytest.approx((0.1, -0.1))
    assert (v2, th2) == pytest.approx((0.19, -0.29))


def test_sgd_decay_exemptions():
    assert _step(2.0, 0.0, 0.1, wd=0.5, name="head.bias")[0] == 2.0
    assert _step(2.0, 0.0, 0.1, wd=0.5, name="enc.1.conv.0.bn.gamma")[0] == 2.0
    assert _step(2.0, 0.0, 0.1, wd=0.5, name="dec.2.skip.bn.beta")[0] == 2.0


def test_sgd_lr_zero_keeps_theta():
    theta, v = _step(1.5, 3.0, 0.0, momentum=0.9, wd=0.1, v=0.2)
    assert theta == 1.5 - v
    assert v == pytest.approx(0.18)
    theta, v = _step(1.5, 3.0, 0.0, momentum=0.9, wd=0.1, v=0.0)
    assert theta == 1.5 and v == 0


def test_sgd_shape_mismatch():
    cfg = Tr.TrainConfig()
    t = {"a.weight": np.zeros(3)}
    with pytest.raises(DimensionError):
        Tr.sgd_step(t, {"a.weight": np.zeros(4)}, Tr.OptState.zeros_like(t), 0.1, cfg)


# ---------------------------------------------------------------- checkpoints

def _random_checkpoint(seed, cfg=TINY):
    rng = np.random.default_rng(seed)
    params = M.init_params(cfg, seed)
    for k in params.tensors:
        params.tensors[k] = rng.standard_normal(params.tensors[k].shape).astype(np.float32)
    for s in params.bn.values():
        s.running_mean[:] = rng.standard_normal(s.running_mean.shape)
        s.running_var[:] = rng.uniform(0.1, 2, s.running_var.shape)
    state = Tr.OptState({k: rng.standard_normal(v.shape).astype(np.float32)
                         for k, v in params.tensors.items()}, int(rng.integers(0, 10**6)))
    tc = Tr.TrainConfig(batch_size=int(rng.integers(1, 20)), base_lr=float(rng.uniform(1e-4, 1)), seed=seed)
    return Tr.Checkpoint(cfg, tc, params, state, rng.uniform(0, 1, 3).astype(np.float32),
                         bool(rng.integers(0, 2)))


def assert_same_checkpoint(a, b):
    assert a.model_config == b.model_config and a.train_config == b.train_config
    assert a.class_balance == b.class_balance and a.opt_state.iteration == b.opt_state.iteration
    assert list(a.params.tensors) == list(b.params.tensors)
    for k in a.params.tensors:
        assert a.params.tensors[k].tobytes() == b.params.tensors[k].tobytes()
        assert a.opt_state.velocity[k].tobytes() == b.opt_state.velocity[k].tobytes()
    for k in a.params.bn:
        assert a.params.bn[k].running_mean.tobytes() == b.params.bn[k].running_mean.tobytes()
        assert a.params.bn[k].running_var.tobytes() == b.params.bn[k].running_var.tobytes()
    assert a.mean_pixel.tobytes() == b.mean_pixel.tobytes()


def test_checkpoint_roundtrip():
    ck = _random_checkpoint(0)
    data = Tr.save_checkpoint(ck)
    assert data[:4] == b"LRN1"
    back = Tr.load_checkpoint(data)
    assert_same_checkpoint(ck, back)
    assert Tr.save_checkpoint(back) == data


def test_checkpoint_header_layout():
    data = Tr.save_checkpoint(_random_checkpoint(1))
    assert int.from_bytes(data[4:8], "little") == 1
    tlen = int.from_bytes(data[8:12], "little")
    text = data[12:12 + tlen].decode()
    assert "num_classes=3" in text.splitlines()
    assert Tr.fnv1a64(data[:-8]) == int.from_bytes(data[-8:], "little")


def test_fnv1a64_reference_values():
    assert Tr.fnv1a64(b"") == 0xCBF29CE484222325
    assert Tr.fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_checkpoint_corruption():
    data = bytearray(Tr.save_checkpoint(_random_checkpoint(2)))
    bad = bytes(b"XRN1" + data[4:])
    with pytest.raises(CodecError, match="magic"):
        Tr.load_checkpoint(bad)
    with pytest.raises(CodecError):
        Tr.load_checkpoint(bytes(data[:len(data) // 2]))
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 1
    with pytest.raises(CodecError, match="checksum"):
        Tr.load_checkpoint(bytes(flipped))
    wrong_version = bytearray(data)
    wrong_version[4] = 2
    with pytest.raises(CodecError, match="version"):
        Tr.load_checkpoint(bytes(wrong_version))


def test_checkpoint_class_mismatch():
    ck = _random_checkpoint(3, M.ModelConfig(num_classes=5, input_size=(32, 32), encoder_channels=(2,) * 5,
                                             convs_per_stage=1))
    with pytest.raises(DimensionError, match="shape mismatch"):
        Tr.check_compatible(ck, num_classes=3)
    Tr.check_compatible(ck, num_classes=5, input_size=(32, 32))


def test_write_checkpoint_atomic(tmp_path):
    ck = _random_checkpoint(4)
    path = tmp_path / "m.lrn"
    Tr.write_checkpoint(path, ck)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.lrn"]
    assert_same_checkpoint(Tr.read_checkpoint(path), ck)


# ---------------------------------------------------------------- loop

@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return dataio.generate_dataset(root, 6, dataio.GenConfig(size=32, num_classes=3, seed=5))


def _tiny_train(manifest, **kw):
    tc = Tr.TrainConfig(batch_size=4, base_lr=0.01, max_iters=6, log_every=2, **kw)
    return Tr.train_loop(TINY, tc, manifest)


def test_train_loop_deterministic(tiny_data):
    a = _tiny_train(tiny_data)
    b = _tiny_train(tiny_data)
    assert a.log_lines == b.log_lines
    assert Tr.save_checkpoint(a.checkpoint) == Tr.save_checkpoint(b.checkpoint)
    assert [h[0] for h in a.history] == list(range(6))
    assert [ln.split()[0] for ln in a.log_lines] == ["iter=0", "iter=2", "iter=4", "iter=5"]
    assert a.checkpoint.opt_state.iteration == 6
    c = _tiny_train(tiny_data, seed=1)
    assert c.log_lines != a.log_lines


def test_train_loop_log_format(tiny_data):
    res = _tiny_train(tiny_data)
    it, lr, loss, per_stage = res.history[0]
    assert res.log_lines[0] == Tr.format_log(it, lr, loss, per_stage)
    assert res.log_lines[0].startswith("iter=0 lr=0.01 loss=")
    assert res.log_lines[0].split()[-1].startswith("l6=")
    assert loss == sum(per_stage)


def test_train_loop_periodic_checkpoints(tiny_data, tmp_path):
    tc = Tr.TrainConfig(batch_size=4, base_lr=0.01, max_iters=4, log_every=0, checkpoint_every=2)
    path = tmp_path / "c.lrn"
    res = Tr.train_loop(TINY, tc, tiny_data, checkpoint_path=path)
    assert_same_checkpoint(Tr.read_checkpoint(path), res.checkpoint)
    assert res.log_lines == []


def test_train_loop_class_mismatch(tiny_data):
    cfg = M.ModelConfig(num_classes=4, input_size=(32, 32), encoder_channels=(2,) * 5, convs_per_stage=1)
    with pytest.raises(DimensionError):
        Tr.train_loop(cfg, Tr.TrainConfig(max_iters=1), tiny_data)


def test_train_loop_epoch_sampling(tiny_data, monkeypatch):
    """Each epoch visits a permutation of the dataset, dropping the remainder."""
    seen = []
    real = M.downsampled_targets

    def spy(gt, cfg):
        seen.append([bytes(g.tobytes()) for g in gt])
        return real(gt, cfg)

    monkeypatch.setattr(M, "downsampled_targets", spy)
    tc = Tr.TrainConfig(batch_size=3, base_lr=0.01, max_iters=4, log_every=0)
    Tr.train_loop(TINY, tc, tiny_data)
    all_labels = sorted(tiny_data.load_labels(i).tobytes() for i in range(6))
    assert sorted(seen[0] + seen[1]) == all_labels
    assert sorted(seen[2] + seen[3]) == all_labels
