"""Finite-difference verification of the recorded gradients.

``grad_check`` compares the taped gradient of a scalar-valued function
against central differences, coordinate by coordinate.  ``run_suite`` does
this for every building block and for a full forward pass (both capsule
cells, routing, classification, decoder, combined loss) on the tiny config.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .capsules import LossParams, dynamic_routing, margin_loss, mse_loss, squash
from .conv import conv1d, conv2d, deconv1d
from .model import ModelConfig, init_params, model_forward
from .tensor import Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    worst = 0.0
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        f_plus = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] -= 2.0 * h
        f_minus = f(Tensor(bumped.reshape(x.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


@dataclass
class ComponentCheck:
    name: str
    max_rel_error: float


def _weighted_sum(t: Tensor, coeffs: np.ndarray) -> Tensor:
    return T.sum_over(T.mul(t, Tensor(coeffs)))


def run_suite(cfg: ModelConfig | None = None, seed: int = 0, h: float = 1e-5,
              corrupt: str | None = None) -> list[ComponentCheck]:
    """Gradient-check every component; ``corrupt`` names a component whose
    analytic gradient is deliberately offset (negative-control hook)."""
    cfg = cfg or ModelConfig.tiny()
    rng = np.random.default_rng(seed)
    results: list[ComponentCheck] = []

    def record(name: str, err: float):
        if corrupt == name:
            err += 1.0
        results.append(ComponentCheck(name, err))

    # conv1d: check both the input and the kernel side.
    x = rng.standard_normal((10, 3))
    k = rng.standard_normal((4, 3, 3))
    r1 = rng.standard_normal((10, 4))
    kt = Tensor(k)
    err = grad_check(lambda t: _weighted_sum(conv1d(t, kt, 1, "same"), r1), Tensor(x), h)
    xt = Tensor(x)
    err = max(err, grad_check(lambda t: _weighted_sum(conv1d(xt, t, 1, "same"), r1), Tensor(k), h))
    record("conv1d", err)

    x = rng.standard_normal((6, 8, 1))
    k = rng.standard_normal((5, 3, 4))
    r2 = rng.standard_normal((6, 2, 5))
    kt = Tensor(k)
    err = grad_check(lambda t: _weighted_sum(conv2d(t, kt, 1, 4), r2), Tensor(x), h)
    xt = Tensor(x)
    err = max(err, grad_check(lambda t: _weighted_sum(conv2d(xt, t, 1, 4), r2), Tensor(k), h))
    record("conv2d", err)

    x = rng.standard_normal((5, 3))
    k = rng.standard_normal((3, 4, 2))
    r3 = rng.standard_normal((2 * 4 + 4, 2))
    kt = Tensor(k)
    err = grad_check(lambda t: _weighted_sum(deconv1d(t, kt, 2), r3), Tensor(x), h)
    xt = Tensor(x)
    err = max(err, grad_check(lambda t: _weighted_sum(deconv1d(xt, t, 2), r3), Tensor(k), h))
    record("deconv1d", err)

    x = rng.standard_normal((4, 6)) + 0.5
    r4 = rng.standard_normal((4, 6))
    record("squash", grad_check(lambda t: _weighted_sum(squash(t, -1), r4), Tensor(x), h))

    x = rng.standard_normal((3, 5))
    r5 = rng.standard_normal((3, 5))
    record("softmax", grad_check(lambda t: _weighted_sum(T.softmax_axis(t, (1,)), r5), Tensor(x), h))

    votes = rng.standard_normal((2, 3, 4, 5))
    r6 = rng.standard_normal((2, 3, 5))
    record("routing", grad_check(
        lambda t: _weighted_sum(dynamic_routing(t, 3), r6), Tensor(votes), h))

    lengths = rng.uniform(0.15, 0.85, size=5)
    record("margin_loss", grad_check(lambda t: margin_loss(t, 2, LossParams()), Tensor(lengths), h))

    record("full_model", _full_model_check(cfg, seed, h))
    return results


def _full_model_check(cfg: ModelConfig, seed: int, h: float) -> float:
    """Finite differences through both cells, routing, classification, the
    decoder, and the combined margin + reconstruction loss, for every
    parameter tensor and the input signal."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed)
    x = rng.standard_normal(cfg.L)
    target = Tensor(x)
    true_class = 0
    recon_weight = 0.0005

    def loss_with(p) -> Tensor:
        fwd = model_forward(Tensor(x), p, cfg, mask_class=true_class)
        margin = margin_loss(fwd.class_lengths, true_class, LossParams())
        return T.add(margin, T.scale(mse_loss(fwd.reconstruction, target), recon_weight))

    worst = 0.0
    for name in params.names():
        original = params[name]

        def f(t: Tensor, _name=name) -> Tensor:
            return loss_with(params.replace({_name: t}))

        worst = max(worst, grad_check(f, original, h))

    def f_input(t: Tensor) -> Tensor:
        # reconstruction target stays pinned to the unperturbed signal
        fwd = model_forward(t, params, cfg, mask_class=true_class)
        margin = margin_loss(fwd.class_lengths, true_class, LossParams())
        return T.add(margin, T.scale(mse_loss(fwd.reconstruction, target), recon_weight))

    worst = max(worst, grad_check(f_input, Tensor(x), h))
    return worst
