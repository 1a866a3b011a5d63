"""Randomized finite-difference checks for every differentiable operator."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import DetectorNet, ModelConfig, fast_normalized_fuse, relaxed_bernoulli_sample
from .tensor import (
    Tensor,
    batchnorm,
    conv2d,
    grad_check,
    maxpool2,
    resize_area,
    resize_bilinear,
    use_dtype,
)
from .vloss import bernoulli_kl, recon_loss, total_loss

OPERATOR_TOL = 1e-4
COMPOSED_TOL = 1e-3


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def _fixed_weights(rng, shape):
    """Contract an output with fixed random weights so every entry matters."""
    w = _t(rng.normal(size=shape))
    return lambda out: (out * w).sum()


def _case_conv(rng):
    ci, co, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    h, w_ = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    x = rng.normal(size=(2, ci, h, w_))
    w = rng.normal(size=(co, ci, k, k))
    b = rng.normal(size=co)
    pad = k // 2
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w_ + 2 * pad - k) // stride + 1
    head = _fixed_weights(rng, (2, co, oh, ow))
    return lambda x, w, b: head(conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b]


def _case_batchnorm(rng):
    c = int(rng.integers(1, 4))
    x = rng.normal(size=(int(rng.integers(2, 4)), c, 3, 3)) * rng.uniform(0.5, 3)
    g, b = rng.normal(size=c), rng.normal(size=c)
    head = _fixed_weights(rng, x.shape)
    return lambda x, g, b: head(batchnorm(x, g, b)), [x, g, b]


def _case_maxpool(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    head = _fixed_weights(rng, (1, 2, 2, 3))
    return lambda x: head(maxpool2(x)), [x]


def _case_resize_bilinear(rng):
    x = rng.normal(size=(1, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    head = _fixed_weights(rng, (1, 2, oh, ow))
    return lambda x: head(resize_bilinear(x, oh, ow)), [x]


def _case_resize_area(rng):
    x = rng.normal(size=(1, 2, int(rng.integers(2, 9)), int(rng.integers(2, 9))))
    oh, ow = int(rng.integers(1, x.shape[2] + 1)), int(rng.integers(1, x.shape[3] + 1))
    head = _fixed_weights(rng, (1, 2, oh, ow))
    return lambda x: head(resize_area(x, oh, ow)), [x]


def _case_fusion(rng):
    n = int(rng.integers(2, 4))
    xs = [rng.normal(size=(1, 2, 3, 3)) for _ in range(n)]
    # keep raw weights away from the ReLU kink at 0
    w = rng.uniform(0.1, 2.0, size=n) * rng.choice([-1, 1], size=n, p=[0.2, 0.8])
    head = _fixed_weights(rng, (1, 2, 3, 3))
    return lambda *args: head(fast_normalized_fuse(list(args[:-1]), args[-1])), [*xs, w]


def _case_relaxed(rng):
    theta = rng.uniform(0.05, 0.95, size=(2, 3, 3))
    u = rng.uniform(0.01, 0.99, size=theta.shape)
    temp = float(rng.uniform(0.3, 1.0))
    head = _fixed_weights(rng, theta.shape)
    return lambda t: head(relaxed_bernoulli_sample(t, temp, u)), [theta]


def _case_recon(rng):
    shape = (1, 2, 4, 4)
    y = rng.uniform(size=shape) * (rng.uniform(size=shape) > 0.5)
    mask = rng.uniform(size=shape) > 0.3
    mask.flat[0] = True
    p = rng.uniform(0.02, 0.98, size=shape)
    return lambda p: recon_loss(p, y, mask), [p]


def _case_kl(rng):
    shape = (1, 2, 3, 3)
    theta = rng.uniform(0.02, 0.98, size=shape)
    prior = rng.uniform(0.02, 0.98, size=shape)
    return lambda t: bernoulli_kl(t, prior), [theta]


OPERATORS: dict[str, Callable] = {
    "conv2d": _case_conv,
    "batchnorm": _case_batchnorm,
    "maxpool2": _case_maxpool,
    "resize_bilinear": _case_resize_bilinear,
    "resize_area": _case_resize_area,
    "fast_normalized_fuse": _case_fusion,
    "relaxed_bernoulli_sample": _case_relaxed,
    "recon_loss": _case_recon,
    "bernoulli_kl": _case_kl,
}


def composed_loss_error(seed: int, size: int = 32, coords: int = 3) -> float:
    """Check total_loss of a small full model w.r.t. a sample of its parameters."""
    rng = np.random.default_rng(seed)
    with use_dtype(np.float64):
        net = DetectorNet(ModelConfig(width_mult=0.125, num_bifpn=1), seed=seed)
        x = _t(rng.uniform(size=(2, 3, size, size)))
        target = rng.uniform(size=(2, 2, size // 2, size // 2))
        target = np.where(rng.uniform(size=target.shape) > 0.7, target, 0.0)
        priors = [rng.uniform(0.05, 0.95, size=(2, 2, size // 2 ** l, size // 2 ** l))
                  for l in range(1, 6)]
        noise_seed = int(rng.integers(2**31))

        def f():
            res = net.forward(x, mode="train", rng=np.random.default_rng(noise_seed))
            res.latents.prior_target = priors
            return total_loss(res.scores, target, res.latents).total_tensor

        params = net.parameters()
        picks = rng.choice(len(params), size=min(12, len(params)), replace=False)
        return grad_check(f, [], wrt=[params[i] for i in picks], max_coords=coords, seed=seed)


@dataclass
class SuiteReport:
    instances: int
    per_operator: dict = field(default_factory=dict)
    composed: float = 0.0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return (all(v < OPERATOR_TOL for v in self.per_operator.values())
                and self.composed < COMPOSED_TOL)

    def to_json(self) -> dict:
        return {"instances": self.instances, "per_operator": self.per_operator,
                "composed_loss": self.composed, "operator_tol": OPERATOR_TOL,
                "composed_tol": COMPOSED_TOL, "passed": self.passed, "seconds": self.seconds}


def run_suite(instances: int = 20, composed_instances: int = 3, seed: int = 0,
              operators: list[str] | None = None) -> SuiteReport:
    """Worst-case relative error per operator over ``instances`` random cases."""
    t0 = time.perf_counter()
    names = operators or list(OPERATORS)
    unknown = set(names) - set(OPERATORS)
    if unknown:
        raise ValueError(f"unknown operators: {sorted(unknown)}")
    report = SuiteReport(instances=instances)
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(instances):
            f, point = OPERATORS[name](rng)
            worst = max(worst, grad_check(f, point))
        report.per_operator[name] = worst
    report.composed = max((composed_loss_error(seed + i) for i in range(composed_instances)),
                          default=0.0)
    report.seconds = time.perf_counter() - t0
    return report
