"""Encoder, six-stage refinement decoder, deep-supervision loss and backward.

Parameter names are dotted layer paths::

    enc.<k>.conv.<j>.{weight,bias}      encoder stage k (1..5), conv block j
    enc.<k>.conv.<j>.bn.{gamma,beta}
    head.{weight,bias}                  coarsest prediction s1 from the bottom
    dec.<k>.skip.{weight,bias}          skip transform for stage k (2..6)
    dec.<k>.skip.bn.{gamma,beta}
    dec.<k>.fuse.{weight,bias}          conv over concat(upsampled s_{k-1}, skip)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .errors import DataError, DimensionError, UsageError

NUM_STAGES = 6


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_size: tuple = (64, 64)
    encoder_channels: tuple = (16, 32, 64, 64, 64)
    convs_per_stage: int = 2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        if self.num_classes < 2:
            raise DimensionError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_size) != 2 or any(v <= 0 or v % 32 for v in self.input_size):
            raise DimensionError(f"input_size must be two positive multiples of 32, got {self.input_size}")
        if len(self.encoder_channels) != 5 or min(self.encoder_channels) < 1:
            raise DimensionError(f"encoder_channels must be 5 counts >= 1, got {self.encoder_channels}")
        if self.convs_per_stage < 1:
            raise DimensionError("convs_per_stage must be >= 1")

    def stage_size(self, k):
        """Spatial dims of label map s_k (k = 1..6)."""
        f = 2 ** (NUM_STAGES - k)
        return self.input_size[0] // f, self.input_size[1] // f


@dataclass
class ModelParams:
    tensors: dict
    bn: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           {k: s.copy() for k, s in self.bn.items()})

    def astype(self, dtype):
        out = self.copy()
        out.tensors = {k: v.astype(dtype) for k, v in out.tensors.items()}
        for s in out.bn.values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return out


def _conv_specs(config):
    """Yield (prefix, cin, cout, has_bn) for every conv in parameter order."""
    cin = config.in_channels
    for k, cout in enumerate(config.encoder_channels, start=1):
        for j in range(config.convs_per_stage):
            yield f"enc.{k}.conv.{j}", cin, cout, True
            cin = cout
    C = config.num_classes
    yield "head", config.encoder_channels[-1], C, False
    for k in range(2, NUM_STAGES + 1):
        yield f"dec.{k}.skip", config.encoder_channels[NUM_STAGES - k], C, True
        yield f"dec.{k}.fuse", 2 * C, C, False


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal conv weights, zero biases, unit BN scale, fresh running stats."""
    rng = np.random.default_rng(seed)
    tensors, bn = {}, {}
    for prefix, cin, cout, has_bn in _conv_specs(config):
        std = math.sqrt(2.0 / (cin * 9))
        tensors[f"{prefix}.weight"] = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)
        tensors[f"{prefix}.bias"] = np.zeros(cout, dtype=np.float32)
        if has_bn:
            tensors[f"{prefix}.bn.gamma"] = np.ones(cout, dtype=np.float32)
            tensors[f"{prefix}.bn.beta"] = np.zeros(cout, dtype=np.float32)
            bn[f"{prefix}.bn"] = T.BnState.fresh(cout, momentum=config.bn_momentum, eps=config.bn_eps)
    return ModelParams(tensors, bn)


# ---------------------------------------------------------------- layer blocks

def _conv(params, prefix, x, tape):
    y = T.conv3x3(x, params.tensors[f"{prefix}.weight"], params.tensors[f"{prefix}.bias"])
    if tape is not None:
        tape[prefix] = x
    return y


def _conv_back(params, prefix, g, tape, grads):
    gx, gw, gb = T.conv3x3_backward(tape[prefix], params.tensors[f"{prefix}.weight"], g)
    _acc(grads, f"{prefix}.weight", gw)
    _acc(grads, f"{prefix}.bias", gb)
    return gx


def _cbr(params, prefix, x, mode, tape):
    """conv3x3 -> batch norm -> ReLU."""
    y = _conv(params, prefix, x, tape)
    z, cache = T.batchnorm(y, params.tensors[f"{prefix}.bn.gamma"], params.tensors[f"{prefix}.bn.beta"],
                           params.bn[f"{prefix}.bn"], mode)
    if tape is not None:
        tape[f"{prefix}.bn"] = (y, cache, z)
    return T.relu(z)


def _cbr_back(params, prefix, g, tape, grads):
    y, cache, z = tape[f"{prefix}.bn"]
    g = T.relu_backward(z, g)
    g, gg, gb = T.batchnorm_backward(y, params.tensors[f"{prefix}.bn.gamma"], cache, g)
    _acc(grads, f"{prefix}.bn.gamma", gg)
    _acc(grads, f"{prefix}.bn.beta", gb)
    return _conv_back(params, prefix, g, tape, grads)


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# ---------------------------------------------------------------- forward

def _check_image(params, image):
    if image.ndim != 4:
        raise DimensionError(f"image must be (n, 3, h, w), got {image.shape}")
    w = params.tensors["enc.1.conv.0.weight"]
    if image.shape[1] != w.shape[1]:
        raise DimensionError(f"image has {image.shape[1]} channels, model expects {w.shape[1]}")
    if image.shape[2] % 32 or image.shape[3] % 32:
        raise DimensionError(f"image spatial dims {image.shape[2:]} must be multiples of 32")


def _encoder(params, image, mode, tape):
    stages = sorted({int(name.split(".")[1]) for name in params.tensors if name.startswith("enc.")})
    x = image
    feats = []
    for k in stages:
        j = 0
        while f"enc.{k}.conv.{j}.weight" in params.tensors:
            x = _cbr(params, f"enc.{k}.conv.{j}", x, mode, tape)
            j += 1
        feats.append(x)
        x, idx = T.maxpool2x2(x)
        if tape is not None:
            tape[f"enc.{k}.pool"] = idx
    return feats, x


def encoder_forward(params, image, mode="train"):
    """Returns the five pre-pool skip features and the 1/32-resolution bottom."""
    _check_image(params, image)
    return _encoder(params, image, mode, None)


def _refine(params, k, s_prev, f_skip, mode, tape):
    u = T.upsample_bilinear2x(s_prev)
    if u.shape[2:] != f_skip.shape[2:]:
        raise DimensionError(
            f"stage {k}: upsampled prediction {u.shape[2:]} and skip feature {f_skip.shape[2:]} differ")
    m = _cbr(params, f"dec.{k}.skip", f_skip, mode, tape)
    cat = T.concat_channels(u, m)
    assert cat.shape[2:] == f_skip.shape[2:]
    return _conv(params, f"dec.{k}.fuse", cat, tape)


def refine_stage(params, k, s_prev, f_skip, mode="train"):
    """Stage-k prediction from the previous label map and encoder skip feature."""
    return _refine(params, k, s_prev, f_skip, mode, None)


@dataclass
class StageOutputs:
    s: list
    f: list
    cache: dict | None = None


def model_forward(params, image, mode="train", keep_cache=None) -> StageOutputs:
    """Run the whole network; ``s[0]`` is the coarsest map and ``s[5]`` full size.

    A backward cache is retained in train mode unless ``keep_cache`` is False.
    """
    _check_image(params, image)
    if keep_cache is None:
        keep_cache = mode == "train"
    tape = {} if keep_cache else None
    feats, bottom = _encoder(params, image, mode, tape)
    s = [_conv(params, "head", bottom, tape)]
    for k in range(2, NUM_STAGES + 1):
        s.append(_refine(params, k, s[-1], feats[NUM_STAGES - k], mode, tape))
    if tape is not None:
        tape["__mode__"] = mode
    return StageOutputs(s, feats, tape)


def model_backward(params, outputs: StageOutputs, logit_grads) -> dict:
    """Gradient of the summed stage losses with respect to every parameter.

    ``logit_grads`` holds one gradient per label map, coarsest first. Shared
    encoder weights receive the sum of contributions from all six heads.
    """
    tape = outputs.cache
    if tape is None:
        raise UsageError("model_backward needs the cache of a train-mode forward pass")
    if tape.get("__mode__") != "train":
        raise UsageError("model_backward requires batch-statistics (train mode) forward")
    if len(logit_grads) != NUM_STAGES:
        raise DimensionError(f"expected {NUM_STAGES} logit gradients, got {len(logit_grads)}")

    grads = {}
    gs = [np.array(g, copy=True) for g in logit_grads]
    gf = [None] * len(outputs.f)
    C = outputs.s[0].shape[1]
    for k in range(NUM_STAGES, 1, -1):
        gcat = _conv_back(params, f"dec.{k}.fuse", gs[k - 1], tape, grads)
        gu, gm = T.split_backward(gcat, C)
        gs[k - 2] = gs[k - 2] + T.upsample_bilinear2x_backward(gu)
        gf[NUM_STAGES - k] = _cbr_back(params, f"dec.{k}.skip", gm, tape, grads)

    g = _conv_back(params, "head", gs[0], tape, grads)
    for k in range(len(outputs.f), 0, -1):
        g = T.maxpool2x2_backward(tape[f"enc.{k}.pool"], g) + gf[k - 1]
        j = 0
        while f"enc.{k}.conv.{j + 1}.weight" in params.tensors:
            j += 1
        for jj in range(j, -1, -1):
            g = _cbr_back(params, f"enc.{k}.conv.{jj}", g, tape, grads)
    return {name: grads[name] for name in params.tensors}


# ---------------------------------------------------------------- targets & loss

def downsampled_targets(gt, config_or_sizes):
    """Nearest-neighbour label pyramid matching the six prediction sizes.

    Source index along an axis is floor((dst + 0.5) * src_size / dst_size),
    evaluated in integers so the largest level is the input itself.
    """
    gt = np.asarray(gt)
    if isinstance(config_or_sizes, ModelConfig):
        sizes = [config_or_sizes.stage_size(k) for k in range(1, NUM_STAGES + 1)]
    else:
        sizes = list(config_or_sizes)
    H, W = gt.shape[-2:]
    out = []
    for h, w in sizes:
        rows = ((2 * np.arange(h) + 1) * H) // (2 * h)
        cols = ((2 * np.arange(w) + 1) * W) // (2 * w)
        out.append(gt[..., rows[:, None], cols[None, :]])
    return out


def total_loss(stages: StageOutputs, targets, class_weights):
    """Sum of per-stage weighted cross entropies.

    Returns ``(loss, per_stage, logit_grads)``; ``loss`` is accumulated
    left to right over ``per_stage`` so it equals ``sum(per_stage)`` exactly.
    """
    s_list = stages.s if isinstance(stages, StageOutputs) else stages
    if len(s_list) != len(targets):
        raise DimensionError(f"{len(s_list)} label maps but {len(targets)} targets")
    per_stage, grads = [], []
    for s, t in zip(s_list, targets):
        l, g = T.weighted_cross_entropy(T.softmax_channels(s), t, class_weights)
        per_stage.append(l)
        grads.append(g)
    total = 0.0
    for l in per_stage:
        total += l
    if not math.isfinite(total):
        raise DataError("loss is not finite")
    return total, per_stage, grads


def argmax_labels(logits):
    """Per-pixel channel argmax (ties resolve to the lowest class index)."""
    return logits.argmax(axis=1).astype(np.uint8)


def predict(params, image):
    return argmax_labels(model_forward(params, image, mode="infer").s[-1])
