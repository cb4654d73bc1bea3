"""Finite-difference gradient suite over every differentiable op and the full generator loss."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .autodiff import Tensor, grad_check, ops
from .model import ModelConfig, build_discriminators, build_model

logger = logging.getLogger(__name__)

OP_TOL = 1e-5
GRAPH_TOL = 1e-4
# untrained outputs are tiny; the gain keeps STFT bins away from the |X| = 0 cone
INPUT_GAIN = 30.0
FD_STEPS = (1e-5, 1e-6, 1e-7, 1e-8)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<24} rel {self.error:.2e} (tol {self.tol:.0e})"


@dataclass
class Case:
    name: str
    f: Callable[[], Tensor]
    inputs: list
    tol: float = OP_TOL
    h: float | tuple = 1e-5
    max_per_input: int | None = None


def _p(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    v = rng.standard_normal(shape) * 2.0
    v[np.abs(v) < 0.05] = 0.5
    return Tensor(v, requires_grad=True)


def op_cases(seed: int = 0) -> list[Case]:
    """One case per differentiable op, float64, toy shapes."""
    rng = np.random.default_rng(seed)
    a, b = _p(rng, 2, 3), _p(rng, 3)
    c = Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)
    k = _away_from_zero(rng, 12)
    x = _p(rng, 2, 2, 12)
    w, wb = _p(rng, 3, 2, 4), _p(rng, 3)
    wd = _p(rng, 2, 2, 3)
    wt, bt = _p(rng, 2, 3, 6), _p(rng, 3)
    g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = _p(rng, 2)
    s, hk = _p(rng, 2, 1, 40), _p(rng, 2, 2, 9)
    sig = _p(rng, 1, 2, 64)
    t3 = rng.standard_normal((2, 3, 6))
    t36 = rng.standard_normal((2, 3, 36))
    t40 = rng.standard_normal((2, 2, 40))
    t12 = rng.standard_normal((2, 2, 12))

    def bn(training):
        return lambda: ops.mse_loss(ops.batch_norm1d(x, g, beta, np.zeros(2), np.ones(2), training), t12)

    return [
        Case("add", lambda: ops.sum(ops.square(a + b)), [a, b]),
        Case("sub", lambda: ops.sum(ops.square(a - b)), [a, b]),
        Case("mul", lambda: ops.sum(a * b * a), [a, b]),
        Case("div", lambda: ops.sum(a / c), [a, c]),
        Case("sum_axis", lambda: ops.sum(ops.square(ops.sum(a, axis=0))), [a]),
        Case("mean_axis", lambda: ops.sum(ops.square(ops.mean(c, axis=1, keepdims=True)) * c), [c]),
        Case("matmul", lambda: ops.sum(ops.square(ops.matmul(a, ops.transpose(c, (1, 0))))), [a, c]),
        Case("reshape_transpose", lambda: ops.sum(ops.transpose(ops.reshape(a, (3, 2)), (1, 0)) * c), [a, c]),
        Case("getitem", lambda: ops.sum(ops.square(ops.getitem(a, (slice(None), slice(1, 3))))), [a]),
        Case("concat", lambda: ops.sum(ops.square(ops.concat([a, c], axis=1)) * 0.5), [a, c]),
        Case("pad", lambda: ops.sum(ops.square(ops.pad(a, (2, 1), axis=1)) * 1.5), [a]),
        Case("detach", lambda: ops.sum(a * ops.detach(c)), [a]),
        Case("log", lambda: ops.mean(ops.log(c)), [c]),
        Case("exp", lambda: ops.sum(ops.exp(a * 0.5)), [a]),
        Case("abs", lambda: ops.sum(ops.abs(k) * k), [k]),
        Case("square", lambda: ops.sum(ops.square(a)), [a]),
        Case("relu", lambda: ops.sum(ops.square(ops.relu(k))), [k]),
        Case("leaky_relu", lambda: ops.sum(ops.square(ops.leaky_relu(k))), [k]),
        Case("elu", lambda: ops.sum(ops.square(ops.elu(k))), [k]),
        Case("sigmoid", lambda: ops.sum(ops.square(ops.sigmoid(k))), [k]),
        Case("tanh", lambda: ops.sum(ops.square(ops.tanh(k))), [k]),
        Case("l1_loss", lambda: ops.l1_loss(a, c), [a, c]),
        Case("mse_loss", lambda: ops.mse_loss(a, c), [a, c]),
        Case("conv1d", lambda: ops.mse_loss(ops.conv1d(x, w, wb, stride=2, padding=(1, 1)), t3), [x, w, wb]),
        Case("conv1d_causal", lambda: ops.mse_loss(ops.conv1d_causal(x, wd, None, dilation=3), x), [x, wd]),
        Case("conv_transpose1d", lambda: ops.mse_loss(ops.conv_transpose1d(x, wt, bt, stride=3), t36), [x, wt, bt]),
        Case("batch_norm1d_train", bn(True), [x, g, beta]),
        Case("batch_norm1d_eval", bn(False), [x, g, beta]),
        Case("avg_pool1d", lambda: ops.sum(ops.square(ops.avg_pool1d(x, 4, 2, padding=2))), [x]),
        Case("fft_convolve", lambda: ops.mse_loss(ops.fft_convolve(s, hk), t40), [s, hk]),
        Case("stft_magnitude", lambda: ops.mean(ops.log(ops.stft_magnitude(sig, 16, 4, 12) + 1e-5)), [sig]),
    ]


def gen_loss_case(speakers: int = 1, seed: int = 11, max_per_input: int = 2) -> Case:
    """Full generator objective through every model parameter; quantizer in bypass, eval-mode batch norm."""
    cfg = ModelConfig.toy(speakers=speakers)
    model = build_model(cfg).eval()
    model.set_bypass(True)
    disc = build_discriminators(cfg, zero_final=False)
    rng = np.random.default_rng(seed)
    n, nb = cfg.chunk_samples, cfg.bir_samples
    x = Tensor(INPUT_GAIN * rng.standard_normal((1, 2, n)))
    cleans = [Tensor(rng.standard_normal((1, 1, n))) for _ in range(speakers)]
    birs = [Tensor(rng.standard_normal((1, 2, nb))) for _ in range(speakers)]
    binaural = Tensor(rng.standard_normal((1, 2, n)))

    def f():
        out = model(x)
        metric = losses.metric_loss(cfg, binaural, cleans, birs, out.binaural, out.cleans, out.birs)
        adv = losses.adv_loss(disc.binaural, disc.speech, out.binaural, out.cleans)
        return losses.gen_loss(metric, out.vq_loss, adv, cfg.lambda_adv, cfg.lambda_vq)

    return Case(f"gen_loss_{speakers}spk", f, model.parameters(), GRAPH_TOL, FD_STEPS, max_per_input)


def run_case(case: Case, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    err = grad_check(case.f, case.inputs, h=case.h, max_per_input=case.max_per_input, seed=seed)
    return CheckResult(case.name, err, case.tol, time.perf_counter() - t0)


def run_suite(seeds: int = 1, speakers: tuple[int, ...] = (1,), log: Callable[[str], None] | None = None
              ) -> list[CheckResult]:
    """Op cases for ``seeds`` random draws, then the full-graph check for each speaker count."""
    results = []
    for seed in range(seeds):
        for case in op_cases(seed):
            r = run_case(case)
            r.name = f"{r.name}[{seed}]" if seeds > 1 else r.name
            results.append(r)
            if log:
                log(r.line())
    for m in speakers:
        r = run_case(gen_loss_case(m), seed=3)
        results.append(r)
        if log:
            log(r.line())
    return results
