"""Central finite-difference checks of every backward pass.

Each operator check builds a random problem, projects the operator output
onto a fixed random tensor to get a scalar objective, and compares the
analytic gradient with ``(f(x + h) - f(x - h)) / 2h`` on sampled
coordinates. A coordinate passes when its relative error is within
``rel_tol`` or its absolute error is within ``abs_tol``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import ops
from .model import ModelConfig, build_npnet

STEP = 1e-2
REL_TOL = 1e-2
ABS_TOL = 1e-3
MIN_COORDS = 20
REDUCED = ModelConfig(widths=(4, 8, 8), reduction=4)


@dataclass
class OpResult:
    name: str
    checked: int
    max_rel: float
    max_abs: float
    failures: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.checked >= MIN_COORDS


@dataclass
class GradcheckReport:
    results: list[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failed(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def __getitem__(self, name: str) -> OpResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        lines = ["operator\tchecked\tskipped\tmax_rel\tmax_abs\tstatus"]
        for r in self.results:
            lines.append(
                f"{r.name}\t{r.checked}\t{r.skipped}\t{r.max_rel:.3e}\t{r.max_abs:.3e}\t{'PASS' if r.passed else 'FAIL'}"
            )
        lines.append(f"overall\t\t\t\t\t{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


class _Tally:
    def __init__(self, name, rel_tol, abs_tol):
        self.name, self.rel_tol, self.abs_tol = name, rel_tol, abs_tol
        self.checked = self.failures = self.skipped = 0
        self.max_rel = self.max_abs = 0.0

    def add(self, analytic: float, numeric: float) -> None:
        err = abs(analytic - numeric)
        rel = err / max(abs(analytic), abs(numeric), 1e-12)
        self.checked += 1
        self.max_abs = max(self.max_abs, err)
        self.max_rel = max(self.max_rel, rel)
        if not (rel <= self.rel_tol or err <= self.abs_tol):
            self.failures += 1

    def result(self) -> OpResult:
        return OpResult(self.name, self.checked, self.max_rel, self.max_abs, self.failures, self.skipped)


def _sample(rng, arr, n, accept=None):
    flat = arr.reshape(-1)
    candidates = np.arange(flat.size) if accept is None else np.flatnonzero(accept(flat))
    return rng.choice(candidates, size=min(n, candidates.size), replace=False)


def check_function(name, forward, backward, inputs, rng, *, n_coords=20, step=STEP,
                   rel_tol=REL_TOL, abs_tol=ABS_TOL, accept=None) -> OpResult:
    """Check ``backward`` against finite differences of ``forward``.

    ``forward(**inputs)`` returns an array; ``backward(dout, **inputs)``
    returns a dict mapping each checked input name to its gradient.
    ``accept`` optionally maps input name to a predicate on the flattened
    values that restricts which coordinates are sampled.
    """
    inputs = {k: np.array(v, dtype=ops.DTYPE) for k, v in inputs.items()}
    out = forward(**inputs)
    proj = rng.standard_normal(np.shape(out)).astype(ops.DTYPE)
    grads = backward(proj, **inputs)
    tally = _Tally(name, rel_tol, abs_tol)

    def objective():
        return float(np.sum(np.asarray(forward(**inputs), dtype=np.float64) * proj))

    for key, grad in grads.items():
        arr = inputs[key]
        pred = None if accept is None else accept.get(key)
        for i in _sample(rng, arr, n_coords, pred):
            flat = arr.reshape(-1)
            orig = flat[i]
            flat[i] = orig + step
            plus = objective()
            flat[i] = orig - step
            minus = objective()
            flat[i] = orig
            tally.add(float(np.asarray(grad).reshape(-1)[i]), (plus - minus) / (2 * step))
    return tally.result()


# -- per-operator checks -----------------------------------------------------


def _conv_check(name, rng, conv_bw, *, stride=1, dilation=1, kernel=3, bias=True):
    padding = dilation * (kernel - 1) // 2

    def spec(w, b=None):
        return ops.ConvSpec(w, b, stride=stride, padding=padding, dilation=dilation)

    inputs = {
        "x": rng.standard_normal((2, 4, 8, 8)),
        "w": rng.standard_normal((3, 4, kernel, kernel)) * 0.5,
    }
    if bias:
        inputs["b"] = rng.standard_normal(3)

    def forward(x, w, b=None):
        return ops.conv2d(x, spec(w, b))

    def backward(dout, x, w, b=None):
        dx, dw, db = conv_bw(dout, x, spec(w, b))
        grads = {"x": dx, "w": dw}
        if b is not None:
            grads["b"] = db
        return grads

    return check_function(name, forward, backward, inputs, rng)


def _batchnorm_check(name, rng, mode):
    c = 4

    def state(gamma, beta):
        st = ops.BatchNormState(
            gamma=gamma,
            beta=beta,
            running_mean=np.linspace(-0.5, 0.5, c).astype(ops.DTYPE),
            running_var=np.linspace(0.5, 2.0, c).astype(ops.DTYPE),
            mode=mode,
        )
        return st

    def forward(x, gamma, beta):
        return ops.batchnorm(x, state(gamma, beta), update_stats=False)

    def backward(dout, x, gamma, beta):
        dx, dg, db = ops.batchnorm_backward(dout, x, state(gamma, beta))
        return {"x": dx, "gamma": dg, "beta": db}

    inputs = {
        "x": rng.standard_normal((2, c, 8, 8)) * 2 + 1,
        "gamma": rng.uniform(0.5, 1.5, c),
        "beta": rng.standard_normal(c),
    }
    return check_function(name, forward, backward, inputs, rng)


def relu_pattern(model) -> np.ndarray:
    """Sign pattern of every ReLU input seen in the model's last forward."""
    parts = [(a > 0).ravel() for layer in model.walk() for a in layer.relu_inputs()]
    return np.concatenate(parts) if parts else np.zeros(0, bool)


def _model_check(name, rng, config: ModelConfig, seed: int, n_coords: int = 40, max_tries: int = 400):
    model = build_npnet(config, seed)
    model.set_mode("train")
    x = rng.random((1, config.in_channels, 16, 16)).astype(ops.DTYPE)
    target = rng.integers(0, config.num_classes, (1, 16, 16))

    def loss():
        value = ops.softmax_cross_entropy(model.forward(x), target)
        return value, relu_pattern(model)

    model.zero_grad()
    logits = model.forward(x)
    model.backward(ops.softmax_cross_entropy_backward(logits, target))
    params = list(model.parameters())
    tally = _Tally(name, REL_TOL, ABS_TOL)
    # Visit parameter tensors round-robin in random order. A coordinate whose
    # +h / -h evaluations see different ReLU sign patterns straddles a kink,
    # where a central difference does not estimate the derivative; it is
    # skipped before its error is looked at.
    tries = 0
    while tally.checked < n_coords and tries < max_tries:
        p = params[tries % len(params)] if tries < len(params) else params[rng.integers(len(params))]
        tries += 1
        flat = p.value.reshape(-1)
        i = rng.integers(flat.size)
        orig = flat[i]
        flat[i] = orig + STEP
        plus, pat_plus = loss()
        flat[i] = orig - STEP
        minus, pat_minus = loss()
        flat[i] = orig
        if not np.array_equal(pat_plus, pat_minus):
            tally.skipped += 1
            continue
        tally.add(float(p.grad.reshape(-1)[i]), (plus - minus) / (2 * STEP))
    return tally.result()


def gradcheck(config: Optional[ModelConfig] = None, seed: int = 0,
              overrides: Optional[dict[str, Callable]] = None) -> GradcheckReport:
    """Run every operator check plus the end-to-end reduced-model check.

    ``overrides`` replaces backward functions by name (``"conv2d_backward"``
    and so on) in the operator-level checks; it exists for fault injection.
    """
    config = config or REDUCED
    bw = {
        "conv2d_backward": ops.conv2d_backward,
        "relu_backward": ops.relu_backward,
        "sigmoid_backward": ops.sigmoid_backward,
        "global_avg_pool_backward": ops.global_avg_pool_backward,
        "bilinear_resize_backward": ops.bilinear_resize_backward,
        "channel_scale_backward": ops.channel_scale_backward,
        "split_channels": ops.split_channels,
        "softmax_cross_entropy_backward": ops.softmax_cross_entropy_backward,
    }
    bw.update(overrides or {})
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    add = report.results.append

    add(_conv_check("conv2d", rng, bw["conv2d_backward"]))
    add(_conv_check("conv2d_stride2", rng, bw["conv2d_backward"], stride=2, bias=False))
    add(_conv_check("conv2d_dilated", rng, bw["conv2d_backward"], dilation=3, bias=False))
    add(_conv_check("conv2d_1x1", rng, bw["conv2d_backward"], kernel=1))
    add(_batchnorm_check("batchnorm_train", rng, "train"))
    add(_batchnorm_check("batchnorm_eval", rng, "eval"))

    shape = (2, 4, 8, 8)
    # central differences straddling the kink are meaningless; keep clear by 2 steps
    add(check_function(
        "relu", ops.relu, lambda d, x: {"x": bw["relu_backward"](d, x)},
        {"x": rng.standard_normal(shape)}, rng, accept={"x": lambda v: np.abs(v) > 2 * STEP},
    ))
    add(check_function(
        "sigmoid", ops.sigmoid, lambda d, x: {"x": bw["sigmoid_backward"](d, x)},
        {"x": rng.standard_normal(shape) * 3}, rng,
    ))
    add(check_function(
        "global_avg_pool", ops.global_avg_pool, lambda d, x: {"x": bw["global_avg_pool_backward"](d, x)},
        {"x": rng.standard_normal(shape)}, rng,
    ))
    add(check_function(
        "bilinear_resize_up",
        lambda x: ops.bilinear_resize(x, 16, 12),
        lambda d, x: {"x": bw["bilinear_resize_backward"](d, x)},
        {"x": rng.standard_normal((2, 4, 4, 3))}, rng,
    ))
    add(check_function(
        "bilinear_resize_down",
        lambda x: ops.bilinear_resize(x, 5, 7),
        lambda d, x: {"x": bw["bilinear_resize_backward"](d, x)},
        {"x": rng.standard_normal(shape)}, rng,
    ))

    def concat_bw(d, a, b):
        da, db = bw["split_channels"](d, [a.shape[1], b.shape[1]])
        return {"a": da, "b": db}

    add(check_function(
        "concat_channels", ops.concat_channels, concat_bw,
        {"a": rng.standard_normal(shape), "b": rng.standard_normal((2, 3, 8, 8))}, rng,
    ))

    def scale_bw(d, x, weights):
        dx, dw = bw["channel_scale_backward"](d, x, weights)
        return {"x": dx, "weights": dw}

    add(check_function(
        "channel_scale", ops.channel_scale, scale_bw,
        {"x": rng.standard_normal(shape), "weights": rng.uniform(0, 1, (2, 4, 1, 1))}, rng,
    ))

    target = rng.integers(0, 3, (2, 8, 8))
    add(check_function(
        "softmax_cross_entropy",
        lambda logits: np.asarray(ops.softmax_cross_entropy(logits, target)),
        lambda d, logits: {"logits": bw["softmax_cross_entropy_backward"](logits, target) * d},
        {"logits": rng.standard_normal((2, 3, 8, 8)) * 2}, rng,
    ))

    for variant in ("cam", "se"):
        cfg = replace(config, attention=variant)
        add(_model_check(f"npnet_end_to_end_{variant}", rng, cfg, seed))
    return report
