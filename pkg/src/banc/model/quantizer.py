"""Residual vector quantizer with EMA codebooks and a straight-through output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.tensor import make_node
from .module import Module, ShapeError


@dataclass
class QuantizeResult:
    indices: np.ndarray  # [B, T, n_q] int64
    quantized: Tensor  # [B, D, T]
    commit_loss: Tensor  # scalar


def straight_through(latent: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward value ``quantized``; backward is the identity onto ``latent``."""
    return make_node(np.ascontiguousarray(quantized, dtype=latent.dtype), (latent,), lambda g: (g,),
                     "straight_through")


class ResidualVQ(Module):
    def __init__(self, dim: int, codebooks: int, size: int, rng=None, decay: float = 0.99, eps: float = 1e-5,
                 dead_threshold: float = 1.0, seed: int = 0, init: bool = True, name: str = "rvq"):
        super().__init__()
        self.dim, self.codebooks, self.size = dim, codebooks, size
        self.decay, self.eps, self.dead_threshold, self.seed, self.name = decay, eps, dead_threshold, seed, name
        self.bypass = False
        cb = np.zeros((codebooks, size, dim))
        if init:
            rng = np.random.default_rng(seed) if rng is None else rng
            cb = rng.standard_normal((codebooks, size, dim)) / np.sqrt(dim)
        self.initialized = init
        self.register_buffer("codebook", cb)
        self.register_buffer("ema_count", np.ones((codebooks, size)))
        self.register_buffer("ema_sum", cb.copy())
        self.register_buffer("updates", np.zeros(1))

    @property
    def bits_per_frame(self) -> int:
        return self.codebooks * int(np.log2(self.size))

    def set_codebook(self, codebook: np.ndarray) -> None:
        codebook = np.asarray(codebook, dtype=self.codebook.dtype)
        if codebook.shape != self.codebook.shape:
            raise ShapeError(f"{self.name}: codebook shape {codebook.shape}, expected {self.codebook.shape}")
        self.set_buffer("codebook", codebook.copy())
        self.set_buffer("ema_sum", codebook * self.ema_count[..., None])
        self.initialized = True

    def _check(self, latent: Tensor):
        if not self.initialized:
            raise RuntimeError(f"{self.name}: codebooks uninitialized")
        if latent.ndim != 3 or latent.shape[1] != self.dim:
            raise ShapeError(f"{self.name}: expected [B, {self.dim}, T], got {latent.shape}")

    def __call__(self, latent: Tensor, n_q: int | None = None) -> QuantizeResult:
        return self.quantize(latent, n_q)

    def quantize(self, latent: Tensor, n_q: int | None = None) -> QuantizeResult:
        self._check(latent)
        n_q = self.codebooks if n_q is None else n_q
        if not 1 <= n_q <= self.codebooks:
            raise ValueError(f"n_q must be in [1, {self.codebooks}], got {n_q}")
        b, d, t = latent.shape
        flat = latent.data.transpose(0, 2, 1).reshape(-1, d).astype(np.float64)
        residual = flat.copy()
        quantized = np.zeros_like(flat)
        indices = np.empty((flat.shape[0], n_q), dtype=np.int64)
        stage_inputs = []
        for q in range(n_q):
            cb = self.codebook[q].astype(np.float64)
            dist = (residual**2).sum(1, keepdims=True) - 2.0 * residual @ cb.T + (cb**2).sum(1)[None, :]
            idx = np.argmin(dist, axis=1)
            indices[:, q] = idx
            stage_inputs.append(residual)
            residual = residual - cb[idx]
            quantized = quantized + cb[idx]
        qdata = quantized.reshape(b, t, d).transpose(0, 2, 1)
        if self.training:
            self._ema_update(stage_inputs, indices)
        if self.bypass:
            out = latent
            commit = Tensor(np.zeros((), dtype=latent.dtype))
        else:
            out = straight_through(latent, qdata)
            commit = ops.mse_loss(latent, Tensor(qdata.astype(latent.dtype)))
        return QuantizeResult(indices.reshape(b, t, n_q), out, commit)

    def dequantize(self, indices: np.ndarray) -> Tensor:
        indices = np.asarray(indices)
        if indices.ndim != 3 or indices.shape[-1] > self.codebooks:
            raise ShapeError(f"{self.name}: indices must be [B, T, n_q<= {self.codebooks}], got {indices.shape}")
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise ValueError(f"{self.name}: index out of range [0, {self.size})")
        b, t, n_q = indices.shape
        flat = indices.reshape(-1, n_q)
        quantized = np.zeros((flat.shape[0], self.dim))
        for q in range(n_q):
            quantized = quantized + self.codebook[q].astype(np.float64)[flat[:, q]]
        return Tensor(quantized.reshape(b, t, self.dim).transpose(0, 2, 1).astype(self.codebook.dtype))

    def _ema_update(self, stage_inputs, indices):
        step = int(self.updates[0])
        rng = np.random.default_rng([self.seed, step])
        count, sums, cb = self.ema_count.copy(), self.ema_sum.copy(), self.codebook.copy()
        for q, x in enumerate(stage_inputs):
            onehot_counts = np.bincount(indices[:, q], minlength=self.size).astype(np.float64)
            batch_sums = np.zeros((self.size, self.dim))
            np.add.at(batch_sums, indices[:, q], x)
            count[q] = self.decay * count[q] + (1.0 - self.decay) * onehot_counts
            sums[q] = self.decay * sums[q] + (1.0 - self.decay) * batch_sums
            total = count[q].sum()
            smoothed = (count[q] + self.eps) / (total + self.size * self.eps) * total
            cb[q] = sums[q] / smoothed[:, None]
            dead = np.flatnonzero(count[q] < self.dead_threshold)
            if dead.size:
                picks = rng.integers(0, x.shape[0], size=dead.size)
                cb[q, dead] = x[picks]
                count[q, dead] = self.dead_threshold
                sums[q, dead] = x[picks] * self.dead_threshold
        dtype = self.codebook.dtype
        self.set_buffer("ema_count", count.astype(self.ema_count.dtype))
        self.set_buffer("ema_sum", sums.astype(dtype))
        self.set_buffer("codebook", cb.astype(dtype))
        self.set_buffer("updates", self.updates + 1)

    def infer_shape(self, shape):
        if shape[1] != self.dim:
            raise ShapeError(f"{self.name}: expects {self.dim} channels, got {shape[1]}")
        return shape
