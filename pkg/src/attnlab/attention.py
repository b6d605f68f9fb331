"""Forward passes for the four attention mechanisms.

Each linear-complexity mechanism comes in two algebraically equivalent forms:
the efficient form never materializes the n x n score matrix, the reference
form does (and reports it).  Causal variants of the linear mechanisms run on
prefix sums; block attention applies full attention independently inside
non-overlapping diagonal blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import linalg
from .kernels import KernelFn, get_kernel
from .linalg import Matrix

MECHANISMS = ("vanilla", "linear", "norm", "diag")
DIAG_SCORE_FNS = ("softmax", "rela")

# Row sums of the score matrix below this are treated as vanishing: the
# rescaling step would divide by (numerically) nothing.
MIN_DENOMINATOR = 1e-300

# Guard added to block row sums in ReLU score normalization.
RELA_EPS = 1e-6


class ZeroDenominatorError(ValueError):
    """A rescaled linear attention row has a vanishing score sum."""


@dataclass(frozen=True)
class AttentionSpec:
    """Which mechanism to run and with what knobs.

    scale_scores defaults to True for the softmax-family mechanisms
    (vanilla, diag) and False for the kernelized ones (linear, norm).
    """

    mechanism: str
    kernel: str = "1+elu"
    block_size: int = 64
    causal: bool = False
    epsilon: float = 1e-5
    scale_scores: Optional[bool] = None
    diag_score_fn: str = "softmax"

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")
        if self.diag_score_fn not in DIAG_SCORE_FNS:
            raise ValueError(f"unknown diag score fn {self.diag_score_fn!r}")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.mechanism == "linear" and not self.kernel_fn.nonnegative:
            raise ValueError(
                f"linear (rescaled) attention needs a non-negative kernel, got {self.kernel!r}")

    @property
    def kernel_fn(self) -> KernelFn:
        return get_kernel(self.kernel)

    @property
    def scaled(self) -> bool:
        if self.scale_scores is None:
            return self.mechanism in ("vanilla", "diag")
        return self.scale_scores


@dataclass
class AttentionOutput:
    O: Matrix
    P: Optional[Matrix] = None  # n x n weights, present for reference-form runs


def _causal_neg_inf(S: Matrix) -> Matrix:
    out = S.copy()
    out[np.triu_indices_from(out, k=1)] = -np.inf
    return out


def _causal_zero(S: Matrix) -> Matrix:
    return S * np.tri(S.shape[0], S.shape[1])


def vanilla_forward(Q: Matrix, K: Matrix, V: Matrix, spec: Optional[AttentionSpec] = None,
                    *, reference: bool = False) -> AttentionOutput:
    """Softmax attention; the quadratic matrix is inherent to the mechanism."""
    spec = spec or AttentionSpec("vanilla")
    _check_shapes(Q, K, V)
    d = Q.shape[1]
    S = linalg.matmul(Q, linalg.transpose(K))
    if spec.scaled:
        S = S / np.sqrt(d)
    if spec.causal:
        S = _causal_neg_inf(S)
    P = linalg.row_softmax(S)
    O = linalg.matmul(P, V)
    return AttentionOutput(O=O, P=P if reference else None)


def linear_scaled_forward(Q: Matrix, K: Matrix, V: Matrix, spec: AttentionSpec,
                          *, reference: bool = False) -> AttentionOutput:
    """Kernelized attention rescaled by the per-row score sum.

    Efficient form computes phi(K)^T V (d x d) first; the causal variant runs
    on prefix sums.  Raises ZeroDenominatorError when a row score sum
    vanishes: the rescaling has no meaning there.
    """
    _check_shapes(Q, K, V)
    kern = spec.kernel_fn
    FQ = kern.apply(Q)
    FK = kern.apply(K)
    if spec.scaled:
        d = Q.shape[1]
        FQ = FQ / np.sqrt(d)
    if reference:
        S = linalg.matmul(FQ, linalg.transpose(FK))
        if spec.causal:
            S = _causal_zero(S)
        z = linalg.row_sums(S)
        _check_denominator(z)
        P = S / z[:, None]
        return AttentionOutput(O=linalg.matmul(P, V), P=P)
    if spec.causal:
        return AttentionOutput(O=_linear_causal(FQ, FK, V, normalize=True))
    ksum = FK.sum(axis=0)[:, None]  # d x 1
    z = linalg.matmul(FQ, ksum)[:, 0]
    _check_denominator(z)
    KV = linalg.matmul(linalg.transpose(FK), V)
    num = linalg.matmul(FQ, KV)
    return AttentionOutput(O=num / z[:, None])


def norm_forward(Q: Matrix, K: Matrix, V: Matrix, spec: AttentionSpec,
                 *, reference: bool = False) -> AttentionOutput:
    """Kernelized attention without rescaling; rows normalized afterwards.

    The reference form materializes the raw score matrix (reported in P;
    its rows are not stochastic for this mechanism).
    """
    _check_shapes(Q, K, V)
    kern = spec.kernel_fn
    FQ = kern.apply(Q)
    FK = kern.apply(K)
    if spec.scaled:
        FQ = FQ / np.sqrt(Q.shape[1])
    if reference:
        S = linalg.matmul(FQ, linalg.transpose(FK))
        if spec.causal:
            S = _causal_zero(S)
        T = linalg.matmul(S, V)
        return AttentionOutput(O=linalg.row_rmsnorm(T, spec.epsilon), P=S)
    if spec.causal:
        T = _linear_causal(FQ, FK, V, normalize=False)
    else:
        KV = linalg.matmul(linalg.transpose(FK), V)
        T = linalg.matmul(FQ, KV)
    return AttentionOutput(O=linalg.row_rmsnorm(T, spec.epsilon))


def _linear_causal(FQ: Matrix, FK: Matrix, V: Matrix, *, normalize: bool) -> Matrix:
    """Prefix-sum evaluation: row i sees keys/values j <= i only."""
    n, d = FQ.shape
    dv = V.shape[1]
    kv = np.zeros((d, dv))
    ks = np.zeros(d)
    out = np.empty((n, dv))
    for i in range(n):
        kv += FK[i][:, None] * V[i][None, :]
        out[i] = linalg.matmul(FQ[i:i + 1], kv)[0]
        if normalize:
            ks += FK[i]
            z = float(np.dot(FQ[i], ks))
            if abs(z) < MIN_DENOMINATOR:
                raise ZeroDenominatorError(f"row {i}: causal score sum {z!r} vanishes")
            out[i] /= z
    return out


def rela_scores(S_block: Matrix) -> Matrix:
    """ReLU scores normalized per row by (row sum + guard).

    Rows whose entries are all non-positive come out as zero rows: the token
    attends to nothing.
    """
    if S_block.shape[0] != S_block.shape[1]:
        raise ValueError("rela_scores expects a square block")
    R = np.maximum(S_block, 0.0)
    return R / (R.sum(axis=1, keepdims=True) + RELA_EPS)


def diag_forward(Q: Matrix, K: Matrix, V: Matrix, spec: AttentionSpec,
                 *, reference: bool = False) -> AttentionOutput:
    """Full attention inside non-overlapping diagonal blocks of size w.

    The sequence length must be a multiple of the block size; padding is the
    caller's job.  Tokens never attend across blocks.
    """
    _check_shapes(Q, K, V)
    n, d = Q.shape
    w = spec.block_size
    if n % w != 0:
        raise ValueError(f"sequence length {n} is not a multiple of block size {w}")
    O = np.empty((n, V.shape[1]))
    P_full = np.zeros((n, n)) if reference else None
    for start in range(0, n, w):
        stop = start + w
        Qb = linalg.row_block(Q, start, stop)
        Kb = linalg.row_block(K, start, stop)
        Vb = linalg.row_block(V, start, stop)
        Sb = linalg.matmul(Qb, linalg.transpose(Kb))
        if spec.scaled:
            Sb = Sb / np.sqrt(d)
        if spec.diag_score_fn == "softmax":
            if spec.causal:
                Sb = _causal_neg_inf(Sb)
            Pb = linalg.row_softmax(Sb)
        else:
            if spec.causal:
                Sb = _causal_zero(Sb)
            Pb = rela_scores(Sb)
        O[start:stop] = linalg.matmul(Pb, Vb)
        if P_full is not None:
            P_full[start:stop, start:stop] = Pb
    return AttentionOutput(O=O, P=P_full)


def forward(Q: Matrix, K: Matrix, V: Matrix, spec: AttentionSpec,
            *, reference: bool = False) -> AttentionOutput:
    """Dispatch on spec.mechanism."""
    if spec.mechanism == "vanilla":
        return vanilla_forward(Q, K, V, spec, reference=reference)
    if spec.mechanism == "linear":
        return linear_scaled_forward(Q, K, V, spec, reference=reference)
    if spec.mechanism == "norm":
        return norm_forward(Q, K, V, spec, reference=reference)
    return diag_forward(Q, K, V, spec, reference=reference)


def _check_shapes(Q: Matrix, K: Matrix, V: Matrix) -> None:
    if Q.shape != K.shape:
        raise ValueError(f"Q and K must share a shape, got {Q.shape} vs {K.shape}")
    if V.shape[0] != Q.shape[0]:
        raise ValueError(f"V has {V.shape[0]} rows, expected {Q.shape[0]}")


def _check_denominator(z: np.ndarray) -> None:
    bad = np.abs(z) < MIN_DENOMINATOR
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ZeroDenominatorError(f"row {i}: score sum {z[i]!r} vanishes")
