"""Capsule arithmetic: squash, block dynamic routing, lengths, and losses.

Routing operates on vote tensors laid out as (outer, parent, block, dim):
``outer`` indexes positions routed independently, ``parent`` the receiving
capsules, ``block`` the child capsules being routed, and ``dim`` the capsule
vector dimension.  Couplings are a softmax over the block axis, so they are
nonnegative and sum to one per (outer, parent) at every iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

# Keeps the norm chain differentiable at the zero vector without measurably
# perturbing any norm above ~1e-13.
_NORM_EPS = 1e-30


@dataclass(frozen=True)
class LossParams:
    """Margin-loss constants: presence bound, absence bound, absence weight."""

    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.m_minus < self.m_plus <= 1.0:
            raise ValueError(f"require 0 < m_minus < m_plus <= 1, got {self}")


@dataclass
class RoutingState:
    """Per-iteration routing trace (numpy copies, for inspection and tests)."""

    votes: np.ndarray
    iterations: int
    logits: list[np.ndarray] = field(default_factory=list)
    couplings: list[np.ndarray] = field(default_factory=list)
    weighted_sums: list[np.ndarray] = field(default_factory=list)


def squash(t: Tensor, axis: int = -1) -> Tensor:
    """Shrink each vector along ``axis`` to norm n^2/(1+n^2), keeping direction.

    The zero vector maps to zero; every output norm is strictly below 1.
    """
    s2 = T.sum_over(T.mul(t, t), axes=(axis,), keepdims=True)
    factor = T.div(s2, T.mul(T.add(s2, 1.0), T.sqrt(T.add(s2, _NORM_EPS))))
    ax = axis + t.data.ndim if axis < 0 else axis
    return T.mul(t, T.repeat_axis(factor, ax, t.shape[ax]))


def capsule_length(t: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (the capsule's existence probability)."""
    return T.sqrt(T.sum_over(T.mul(t, t), axes=(axis,)))


def _routing_iterations(votes: Tensor, iterations: int, state: RoutingState | None) -> Tensor:
    p, r, s, n = votes.shape
    logits = T.zeros((p, r, s))  # logits start at zero
    squashed = None
    for it in range(iterations):
        couplings = T.softmax_axis(logits, axes=(2,))
        weighted = T.contract("prs,prsn->prn", couplings, votes)
        squashed = squash(weighted, axis=-1)
        if state is not None:
            state.logits.append(logits.data.copy())
            state.couplings.append(couplings.data.copy())
            state.weighted_sums.append(weighted.data.copy())
        if it + 1 < iterations:
            agreement = T.contract("prn,prsn->prs", squashed, votes)
            logits = T.add(logits, agreement)
    return squashed


def dynamic_routing(votes: Tensor, iterations: int) -> Tensor:
    """Route (outer, parent, block, dim) votes; returns squashed parent capsules.

    Each iteration: couplings = softmax(logits) over the block axis, a
    coupling-weighted vote sum per parent is squashed, and the logits grow by
    the squashed-sum/vote dot product.  Gradients flow through every iteration.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if votes.data.ndim != 4:
        raise ValueError(f"votes must be (outer, parent, block, dim), got {votes.shape}")
    return _routing_iterations(votes, iterations, None)


def dynamic_routing_trace(votes: Tensor, iterations: int) -> tuple[Tensor, RoutingState]:
    """dynamic_routing plus the per-iteration logits/couplings/sums."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    state = RoutingState(votes=votes.data.copy(), iterations=iterations)
    out = _routing_iterations(votes, iterations, state)
    return out, state


def routing_oracle(votes: np.ndarray, iterations: int) -> np.ndarray:
    """Scalar-loop reference for dynamic_routing, used only for verification.

    Transcribes the update rules one index at a time: softmax couplings over
    the block axis, coupling-weighted vote sum, squash, dot-product logit
    update.  Intentionally unvectorized.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    v = np.asarray(votes, dtype=np.float64)
    p_n, r_n, s_n, n_n = v.shape
    b = [[[0.0] * s_n for _ in range(r_n)] for _ in range(p_n)]
    out = np.zeros((p_n, r_n, n_n))
    for it in range(iterations):
        for p in range(p_n):
            for r in range(r_n):
                exps = [math.exp(b[p][r][s]) for s in range(s_n)]
                z = sum(exps)
                k = [e / z for e in exps]
                weighted = [0.0] * n_n
                for s in range(s_n):
                    for d in range(n_n):
                        weighted[d] += k[s] * v[p, r, s, d]
                norm2 = sum(w * w for w in weighted)
                if norm2 == 0.0:
                    shat = [0.0] * n_n
                else:
                    f = (norm2 / (1.0 + norm2)) / math.sqrt(norm2)
                    shat = [f * w for w in weighted]
                out[p, r, :] = shat
                if it + 1 < iterations:
                    for s in range(s_n):
                        dot = 0.0
                        for d in range(n_n):
                            dot += shat[d] * v[p, r, s, d]
                        b[p][r][s] += dot
    return out


def margin_loss(lengths: Tensor, true_class: int, params: LossParams = LossParams()) -> Tensor:
    """Two-sided hinge-squared loss over per-class capsule lengths."""
    num_classes = lengths.shape[0]
    if not 0 <= true_class < num_classes:
        raise ValueError(f"true_class {true_class} out of range for {num_classes} classes")
    onehot = np.zeros(num_classes)
    onehot[true_class] = 1.0
    present = T.relu(T.sub(float(params.m_plus), lengths))
    absent = T.relu(T.sub(lengths, float(params.m_minus)))
    terms = T.add(
        T.mul(Tensor(onehot), T.mul(present, present)),
        T.scale(T.mul(Tensor(1.0 - onehot), T.mul(absent, absent)), params.lam),
    )
    return T.sum_over(terms)


def mse_loss(reconstruction: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference between two same-shape signals."""
    if reconstruction.shape != target.shape:
        raise ShapeError(
            f"shape mismatch: reconstruction {reconstruction.shape} vs target {target.shape}")
    diff = T.sub(reconstruction, target)
    return T.mean_over(T.mul(diff, diff))
