"""Central finite-difference verification of every backward kernel.

Per-op checks run in long double on unit-magnitude inputs. The numeric
derivative is the fourth-order central stencil with step 1e-4, whose
truncation error sits far below the 1e-6 element tolerance even where a
gradient element nearly cancels. Elements are compared with
|a - fd| / max(|a|, |fd|, 1e-8). Backward kernels are resolved from
``tensor_ops`` at call time, so a patched kernel is what gets checked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor_ops as T

STEP = 1e-4
OP_TOL = 1e-6
E2E_TOL = 1e-4
E2E_STEP = 1e-6
FD_DTYPE = np.longdouble


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    instances: int
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)


def rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x, step=STEP):
    """Fourth-order central differences of scalar ``f()`` w.r.t. ``x``.

    ``x`` is perturbed in place and restored after each element.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    h = x.dtype.type(step)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for k in (-2, -1, 1, 2):
            flat[i] = orig + k * h
            vals.append(f())
        flat[i] = orig
        gf[i] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return g


def _projected(fwd, r):
    return lambda: np.sum(fwd() * r)


def _u(rng, lo, hi, shape):
    return rng.uniform(lo, hi, shape).astype(FD_DTYPE)


# -------------------------------------------------------------- instance builders
# Each returns (inputs dict, forward() -> tensor, analytic grads dict for cotangent r)

def _conv(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(2, 6, size=2)
    x = _u(rng, -1, 1, (n, cin, h, w))
    wt = _u(rng, -1, 1, (cout, cin, 3, 3))
    b = _u(rng, -1, 1, cout)
    inputs = {"input": x, "weight": wt, "bias": b}

    def fwd():
        return T.conv3x3(x, wt, b)

    def back(r):
        gx, gw, gb = T.conv3x3_backward(x, wt, r)
        return {"input": gx, "weight": gw, "bias": gb}
    return inputs, fwd, back


def _maxpool(rng):
    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = 2 * rng.integers(1, 4, size=2)
    size = n * c * h * w
    # distinct values spaced 2/size apart keep every argmax stable under the step
    x = (rng.permutation(size) / size * 2 - 1).reshape(n, c, h, w).astype(FD_DTYPE)

    def fwd():
        return T.maxpool2x2(x)[0]

    def back(r):
        _, idx = T.maxpool2x2(x)
        return {"input": T.maxpool2x2_backward(idx, r)}
    return {"input": x}, fwd, back


def _relu(rng):
    shape = tuple(rng.integers(1, 4, size=4))
    x = rng.choice([-1.0, 1.0], size=shape) * _u(rng, 0.05, 1, shape)

    def back(r):
        return {"input": T.relu_backward(x, r)}
    return {"input": x}, lambda: T.relu(x), back


def _batchnorm(rng):
    n, c = rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(2, 5, size=2)
    x = _u(rng, -1, 1, (n, c, h, w))
    gamma = _u(rng, 0.5, 1.5, c)
    beta = _u(rng, -1, 1, c)

    def fwd():
        return T.batchnorm(x, gamma, beta, T.BnState.fresh(c, FD_DTYPE), "train")[0]

    def back(r):
        _, cache = T.batchnorm(x, gamma, beta, T.BnState.fresh(c, FD_DTYPE), "train")
        gx, gg, gb = T.batchnorm_backward(x, gamma, cache, r)
        return {"input": gx, "gamma": gg, "beta": gb}
    return {"input": x, "gamma": gamma, "beta": beta}, fwd, back


def _upsample(rng):
    shape = tuple(rng.integers(1, 4, size=2)) + tuple(rng.integers(1, 5, size=2))
    x = _u(rng, -1, 1, shape)

    def back(r):
        return {"input": T.upsample_bilinear2x_backward(r)}
    return {"input": x}, lambda: T.upsample_bilinear2x(x), back


def _concat(rng):
    n, ca, cb = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(1, 5, size=2)
    a = _u(rng, -1, 1, (n, ca, h, w))
    b = _u(rng, -1, 1, (n, cb, h, w))

    def back(r):
        ga, gb = T.split_backward(r, ca)
        return {"a": ga, "b": gb}
    return {"a": a, "b": b}, lambda: T.concat_channels(a, b), back


def _softmax(rng):
    n, c = rng.integers(1, 3), rng.integers(2, 6)
    h, w = rng.integers(1, 4, size=2)
    z = _u(rng, -1, 1, (n, c, h, w))

    def back(r):
        return {"logits": T.softmax_channels_backward(T.softmax_channels(z), r)}
    return {"logits": z}, lambda: T.softmax_channels(z), back


def _cross_entropy(rng):
    n, c = rng.integers(1, 3), rng.integers(2, 6)
    h, w = rng.integers(1, 4, size=2)
    z = _u(rng, -1, 1, (n, c, h, w))
    target = rng.integers(0, c, (n, h, w))
    target[rng.random((n, h, w)) < 0.2] = T.IGNORE
    target[0, 0, 0] = 0
    weights = _u(rng, 0.2, 2.0, c)

    def fwd():
        return FD_DTYPE(T.weighted_cross_entropy(T.softmax_channels(z), target, weights)[0])

    def back(r):
        _, g = T.weighted_cross_entropy(T.softmax_channels(z), target, weights)
        return {"logits": g * r}
    return {"logits": z}, fwd, back


OP_CHECKS = {
    "conv3x3": _conv,
    "maxpool2x2": _maxpool,
    "relu": _relu,
    "batchnorm": _batchnorm,
    "upsample_bilinear2x": _upsample,
    "concat_channels": _concat,
    "softmax_channels": _softmax,
    "weighted_cross_entropy": _cross_entropy,
}


def check_op(name, seed=0, instances=20, tol=OP_TOL) -> CheckResult:
    rng = np.random.default_rng([seed, sorted(OP_CHECKS).index(name)])
    worst = 0.0
    for _ in range(instances):
        inputs, fwd, back = OP_CHECKS[name](rng)
        out = np.asarray(fwd())
        r = _u(rng, -1, 1, out.shape) if out.ndim else FD_DTYPE(1)
        analytic = back(r)
        f = _projected(fwd, r)
        for key, x in inputs.items():
            worst = max(worst, rel_err(analytic[key], numeric_grad(f, x)))
    return CheckResult(name, worst, instances, tol)


TINY_CONFIG = M.ModelConfig(num_classes=3, input_size=(32, 32), encoder_channels=(2, 2, 2, 2, 2),
                            convs_per_stage=1)


def check_end_to_end(seed=0, config=TINY_CONFIG, batch=2, tol=E2E_TOL) -> CheckResult:
    """Directional derivative of the summed stage losses along a random parameter direction."""
    rng = np.random.default_rng([seed, 99])
    params = M.init_params(config, seed).astype(np.float64)
    for name in params.tensors:
        if name.endswith((".bias", ".beta")):
            params.tensors[name] = rng.uniform(-0.1, 0.1, params.tensors[name].shape)
    h, w = config.input_size
    image = rng.uniform(-1, 1, (batch, config.in_channels, h, w))
    targets = M.downsampled_targets(rng.integers(0, config.num_classes, (batch, h, w)), config)
    weights = rng.uniform(0.5, 1.5, config.num_classes)

    out = M.model_forward(params.copy(), image, mode="train")
    _, _, lgrads = M.total_loss(out, targets, weights)
    grads = M.model_backward(params, out, lgrads)
    direction = {k: rng.standard_normal(v.shape) for k, v in params.tensors.items()}
    analytic = sum(float(np.sum(grads[k] * direction[k])) for k in direction)

    def loss_at(t):
        p = params.copy()
        for k in p.tensors:
            p.tensors[k] = p.tensors[k] + t * direction[k]
        return M.total_loss(M.model_forward(p, image, mode="train"), targets, weights)[0]

    numeric = (loss_at(E2E_STEP) - loss_at(-E2E_STEP)) / (2 * E2E_STEP)
    return CheckResult("model_end_to_end", rel_err(analytic, numeric), 1, tol)


def run_all(seed=0, instances=20):
    results = [check_op(name, seed, instances) for name in OP_CHECKS]
    results.append(check_end_to_end(seed))
    return results
