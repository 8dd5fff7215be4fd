"""SGD training loop, learning-rate schedule and checkpoint format."""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from .dataio import DatasetManifest, mean_pixel
from .errors import CodecError, DataError, DimensionError
from .tensor_ops import BnState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_step: int = 50000
    lr_gamma: float = 0.1
    max_iters: int = 80000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 10000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0 or self.lr_step <= 0:
            raise ValueError("base_lr and lr_step must be > 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")


@dataclass
class OptState:
    velocity: dict
    iteration: int = 0

    @classmethod
    def zeros_like(cls, tensors):
        return cls({k: np.zeros_like(v) for k, v in tensors.items()}, 0)


def lr_schedule(cfg: TrainConfig, iteration: int) -> float:
    return cfg.base_lr * cfg.lr_gamma ** (iteration // cfg.lr_step)


def decays(name):
    return not (name.endswith(".bias") or ".bn." in name)


def sgd_step(tensors, grads, state: OptState, lr, cfg: TrainConfig):
    """Caffe-style momentum SGD, in place.

    v <- momentum * v + lr * (g + weight_decay * theta);  theta <- theta - v.
    Biases and batch-norm scale/shift are not decayed.
    """
    for name, theta in tensors.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise DimensionError(f"{name}: parameter {theta.shape}, grad {g.shape}, velocity {v.shape}")
        if cfg.weight_decay and decays(name):
            g = g + cfg.weight_decay * theta
        v = (cfg.momentum * v + lr * g).astype(theta.dtype)
        state.velocity[name] = v
        tensors[name] = theta - v
    return tensors, state


# ---------------------------------------------------------------- checkpoints

MAGIC = b"LRN1"
VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


@dataclass
class Checkpoint:
    model_config: M.ModelConfig
    train_config: TrainConfig
    params: M.ModelParams
    opt_state: OptState
    mean_pixel: np.ndarray
    class_balance: bool = False


def config_lines(ckpt: Checkpoint):
    mc, tc = ckpt.model_config, ckpt.train_config
    items = [
        ("num_classes", mc.num_classes),
        ("input_size", f"{mc.input_size[0]},{mc.input_size[1]}"),
        ("encoder_channels", ",".join(str(c) for c in mc.encoder_channels)),
        ("convs_per_stage", mc.convs_per_stage),
        ("bn_eps", repr(mc.bn_eps)),
        ("bn_momentum", repr(mc.bn_momentum)),
        ("in_channels", mc.in_channels),
    ]
    items += [(f.name, repr(getattr(tc, f.name))) for f in fields(tc)]
    items += [("class_balance", "on" if ckpt.class_balance else "off"),
              ("iteration", ckpt.opt_state.iteration)]
    return [f"{k}={v}" for k, v in items]


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = dict(ckpt.params.tensors)
    for name, st in ckpt.params.bn.items():
        tensors[f"{name}.running_mean"] = st.running_mean
        tensors[f"{name}.running_var"] = st.running_var
    for name, v in ckpt.opt_state.velocity.items():
        tensors[f"opt.{name}"] = v
    tensors["mean_pixel"] = ckpt.mean_pixel

    text = ("\n".join(config_lines(ckpt)) + "\n").encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise DataError(f"checkpoint tensor {name} must be float32, got {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CodecError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse_config_block(text):
    kv = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            kv[k] = v
    mc = M.ModelConfig(
        num_classes=int(kv["num_classes"]),
        input_size=tuple(int(v) for v in kv["input_size"].split(",")),
        encoder_channels=tuple(int(v) for v in kv["encoder_channels"].split(",")),
        convs_per_stage=int(kv["convs_per_stage"]),
        bn_eps=float(kv["bn_eps"]),
        bn_momentum=float(kv["bn_momentum"]),
        in_channels=int(kv["in_channels"]),
    )
    tc = TrainConfig(**{f.name: type(f.default)(kv[f.name]) for f in fields(TrainConfig)})
    return mc, tc, kv["class_balance"] == "on", int(kv["iteration"])


def load_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CodecError("bad checkpoint magic", 0)
    if len(data) < 16:
        raise CodecError("truncated checkpoint", len(data))
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CodecError(f"unsupported checkpoint version {version}", 4)
    (tlen,) = r.unpack("<I", "config length")
    text = r.take(tlen, "config block").decode()
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode()
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(body):
        raise CodecError("trailing bytes before checksum", r.pos)
    if fnv1a64(body) != stored:
        raise CodecError("checksum mismatch", len(body))
    try:
        mc, tc, balance, iteration = _parse_config_block(text)
    except (KeyError, ValueError) as e:
        raise CodecError(f"bad config block: {e}", 12) from None

    template = M.init_params(mc, 0)
    params = {}
    for name, ref in template.tensors.items():
        if name not in tensors:
            raise CodecError(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != ref.shape:
            raise CodecError(f"{name}: shape {tensors[name].shape}, config implies {ref.shape}")
        params[name] = tensors[name]
    bn = {name: BnState(tensors[f"{name}.running_mean"], tensors[f"{name}.running_var"],
                        mc.bn_momentum, mc.bn_eps) for name in template.bn}
    velocity = {name: tensors[f"opt.{name}"] for name in template.tensors}
    return Checkpoint(mc, tc, M.ModelParams(params, bn), OptState(velocity, iteration),
                      tensors["mean_pixel"], balance)


def write_checkpoint(path, ckpt: Checkpoint):
    """Atomic write: temp file then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(save_checkpoint(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        return load_checkpoint(path.read_bytes())
    except CodecError as e:
        raise CodecError(f"{path}: {e}") from None


def check_compatible(ckpt: Checkpoint, num_classes=None, input_size=None):
    """Raise DimensionError if the checkpoint cannot serve the given data."""
    mc = ckpt.model_config
    if num_classes is not None and num_classes != mc.num_classes:
        raise DimensionError(
            f"shape mismatch: checkpoint predicts {mc.num_classes} classes, data has {num_classes}")
    if input_size is not None and tuple(input_size) != mc.input_size:
        raise DimensionError(
            f"shape mismatch: checkpoint expects {mc.input_size} inputs, got {tuple(input_size)}")


# ---------------------------------------------------------------- loop

def format_log(iteration, lr, loss, per_stage):
    stages = " ".join(f"l{k}={v:.9g}" for k, v in enumerate(per_stage, start=1))
    return f"iter={iteration} lr={lr:.9g} loss={loss:.9g} {stages}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)   # (iter, lr, loss, per_stage) per step
    log_lines: list = field(default_factory=list)


def load_dataset(manifest: DatasetManifest, model_cfg: M.ModelConfig):
    images, labels = [], []
    for i in range(len(manifest)):
        im, lb = manifest.load(i)
        if im.shape[1:] != model_cfg.input_size:
            raise DimensionError(
                f"sample {manifest.names[i]} is {im.shape[1:]}, model expects {model_cfg.input_size}")
        images.append(im)
        labels.append(lb)
    if not images:
        raise DataError("dataset is empty")
    return np.stack(images), np.stack(labels)


def train_loop(model_cfg: M.ModelConfig, train_cfg: TrainConfig, manifest: DatasetManifest,
               class_weights=None, checkpoint_path=None, on_log=None) -> TrainResult:
    """Train from a seeded initialization for ``train_cfg.max_iters`` steps.

    Batches are drawn epoch by epoch from a seeded permutation, dropping
    the final partial batch. A batch size larger than the dataset is
    clamped to the dataset size.
    """
    if manifest.num_classes != model_cfg.num_classes:
        raise DimensionError(
            f"dataset has {manifest.num_classes} classes, model config {model_cfg.num_classes}")
    images, labels = load_dataset(manifest, model_cfg)
    mean = mean_pixel(manifest)
    images = images - mean[None, :, None, None]
    n = len(images)
    bs = min(train_cfg.batch_size, n)
    weights = (np.ones(model_cfg.num_classes) if class_weights is None
               else np.asarray(class_weights, dtype=np.float64))

    params = M.init_params(model_cfg, train_cfg.seed)
    state = OptState.zeros_like(params.tensors)
    rng = np.random.default_rng([train_cfg.seed, 1])
    result = TrainResult(None)

    def snapshot():
        return Checkpoint(model_cfg, train_cfg, params, state, mean, class_weights is not None)

    order, cursor = None, n
    while state.iteration < train_cfg.max_iters:
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = np.sort(order[cursor:cursor + bs])
        cursor += bs

        it = state.iteration
        lr = lr_schedule(train_cfg, it)
        out = M.model_forward(params, images[idx], mode="train")
        targets = M.downsampled_targets(labels[idx], model_cfg)
        loss, per_stage, lgrads = M.total_loss(out, targets, weights)
        grads = M.model_backward(params, out, lgrads)
        sgd_step(params.tensors, grads, state, lr, train_cfg)
        state.iteration = it + 1
        result.history.append((it, lr, loss, per_stage))

        if train_cfg.log_every and (it % train_cfg.log_every == 0 or state.iteration == train_cfg.max_iters):
            line = format_log(it, lr, loss, per_stage)
            result.log_lines.append(line)
            log.info(line)
            if on_log is not None:
                on_log(line)
        if (checkpoint_path is not None and train_cfg.checkpoint_every
                and state.iteration % train_cfg.checkpoint_every == 0
                and state.iteration < train_cfg.max_iters):
            write_checkpoint(checkpoint_path, snapshot())

    result.checkpoint = snapshot()
    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, result.checkpoint)
    return result
