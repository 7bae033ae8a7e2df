"""The attention patch: Gaussian-kernel cross-attention over a frozen reference bank.

For a hidden activation ``x`` and reference rows ``z_1..z_s``::

    TAP(x) = LN( sum_i w_i Wv z_i ),
    w_i    = k(Wq x, Wk z_i) / sum_j k(Wq x, Wk z_j),
    k(a,b) = exp(-|a - b|^2 / (2 c^2))

where ``c`` is the normalisation constant. The kernel's normalising factor
cancels in ``w``, so it is omitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .kernels import ContractError


def default_norm_const(d_h, batch_size):
    """``sqrt(d_h) * batch_size ** (-1 / d_h)``."""
    return math.sqrt(d_h) * batch_size ** (-1.0 / d_h)


class ReferenceBank:
    """Frozen reference matrix split into contiguous batches.

    The last batch may be shorter than ``batch_size``; it is kept.
    """

    def __init__(self, Z, batch_size=None, mode="real"):
        Z = np.array(Z, dtype=T.DTYPE)
        if Z.ndim != 2 or Z.shape[0] == 0:
            raise ContractError(f"reference bank must be a non-empty matrix, got shape {Z.shape}")
        if mode not in ("real", "noise"):
            raise ContractError(f"unknown bank mode {mode!r}")
        n = Z.shape[0]
        batch_size = n if batch_size is None else int(batch_size)
        if batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        batch_size = min(batch_size, n)
        Z.setflags(write=False)
        self.Z = Z
        self.batch_size = batch_size
        self.mode = mode
        self.batches = [np.arange(a, min(a + batch_size, n)) for a in range(0, n, batch_size)]

    @property
    def m(self):
        return len(self.batches)

    @property
    def n(self):
        return self.Z.shape[0]

    @property
    def width(self):
        return self.Z.shape[1]

    def batch(self, i):
        """Rows of batch ``i`` as a tensor that never takes gradients."""
        idx = self.batches[i]
        return T.Tensor(self.Z[idx[0] : idx[-1] + 1])

    def full(self):
        return T.Tensor(self.Z)

    def rebatch(self, batch_size):
        return ReferenceBank(self.Z, batch_size, self.mode)

    def __repr__(self):
        return f"ReferenceBank(n={self.n}, width={self.width}, m={self.m}, mode={self.mode!r})"


def make_noise_bank(real_bank, seed):
    """Gaussian bank with the per-column mean and std of ``real_bank``.

    Same shape and batching as the source. ``seed`` may be an int, a
    ``SeedSequence`` or a ``Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Z = real_bank.Z
    mean = Z.mean(axis=0)
    std = Z.std(axis=0)
    noise = mean + std * rng.standard_normal(Z.shape)
    return ReferenceBank(noise, real_bank.batch_size, mode="noise")


@dataclass
class TapParams:
    """Trainable attention matrices plus the output layer norm.

    Shapes: ``Wq`` (d_h, d_x), ``Wk`` (d_h, d_z), ``Wv`` (d_out, d_z).
    """

    Wq: T.Tensor
    Wk: T.Tensor
    Wv: T.Tensor
    norm_const: float
    ln_gain: T.Tensor
    ln_bias: T.Tensor

    @classmethod
    def init(cls, d_x, d_z, d_h=64, d_out=64, norm_const=None, rng=None, batch_size=250):
        rng = np.random.default_rng(rng)
        if norm_const is None:
            norm_const = default_norm_const(d_h, batch_size)
        return cls(
            Wq=T.parameter(uniform_init(rng, d_h, d_x)),
            Wk=T.parameter(uniform_init(rng, d_h, d_z)),
            Wv=T.parameter(uniform_init(rng, d_out, d_z)),
            norm_const=float(norm_const),
            ln_gain=T.parameter(np.ones(d_out)),
            ln_bias=T.parameter(np.zeros(d_out)),
        )

    def parameters(self):
        return [self.Wq, self.Wk, self.Wv, self.ln_gain, self.ln_bias]


def uniform_init(rng, fan_out, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _attention(params, queries, batch):
    queries = T.as_tensor(queries)
    batch = T.as_tensor(batch)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ContractError(f"empty or malformed reference batch: shape {batch.shape}")
    if params.norm_const <= 0:
        raise ContractError("norm_const must be positive")
    if batch.requires_grad:
        raise ContractError("reference batch must be frozen (requires_grad=False)")
    q = T.matmul(queries, params.Wq.T)
    k = T.matmul(batch, params.Wk.T)
    sq = T.sub(
        T.add(T.reduce_sum(T.square(q), axis=1, keepdims=True), T.reduce_sum(T.square(k), axis=1)),
        T.mul(T.matmul(q, k.T), 2.0),
    )
    logits = T.mul(sq, -0.5 / params.norm_const**2)
    # constant shift; the row normalisation below makes it exact
    shift = T.Tensor(logits.data.max(axis=1, keepdims=True))
    weights = T.normalize_rows(T.exp(T.sub(logits, shift)))
    if not np.all(np.isfinite(weights.data)):
        raise ContractError("attention weights are not finite")
    return weights


def attention_weights(params, query, batch):
    """Normalised kernel weights of one query over the rows of ``batch``."""
    query = np.atleast_2d(np.asarray(query, dtype=T.DTYPE))
    return _attention(params, T.Tensor(query), batch).data[0].copy()


def tap_forward(params, queries, batch, post_norm=True):
    """Kernel-weighted average of ``Wv z_i`` for each query row, then layer norm."""
    batch = T.as_tensor(batch)
    weights = _attention(params, queries, batch)
    values = T.matmul(batch, params.Wv.T)
    out = T.matmul(weights, values)
    if post_norm:
        out = T.layer_norm(out, params.ln_gain, params.ln_bias)
    return out
