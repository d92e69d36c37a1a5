"""Inexact local solves of the proximally regularized client objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmodels as dm
from .data import Dataset, rng_for
from .diffmodels import Batch, ModelSpec, ParamVector


@dataclass(frozen=True)
class SolverBudget:
    epochs: int = 1
    batch_size: int = 500
    lr: float = 0.01
    momentum: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def layer_adaptive_lambda(w: ParamVector, ref: ParamVector, base_lambda: float) -> np.ndarray:
    """``base_lambda / |w_j - ref_j|`` per layer; layers with no difference get ``base_lambda``."""
    if not w.same_layout(ref):
        raise dm.ModelError("layer maps differ")
    out = np.empty(w.n_layers)
    for j in range(w.n_layers):
        norm = float(np.linalg.norm(w.layer(j) - ref.layer(j)))
        out[j] = base_lambda / norm if norm > 0 else base_lambda
    return out


@dataclass(frozen=True, eq=False)
class ProxSpec:
    reference: ParamVector
    base_lambda: float
    adaptive: bool
    per_layer_lambda: np.ndarray

    @classmethod
    def build(cls, reference: ParamVector, base_lambda: float, adaptive: bool = False,
              at: ParamVector | None = None) -> "ProxSpec":
        """Freeze per-layer weights; adaptive ones are measured at ``at``
        (the model the local solve starts from)."""
        if base_lambda < 0:
            raise ValueError("base_lambda must be nonnegative")
        if adaptive:
            lam = layer_adaptive_lambda(reference if at is None else at, reference, base_lambda)
        else:
            lam = np.full(reference.n_layers, float(base_lambda))
        return cls(reference, float(base_lambda), adaptive, lam)

    @classmethod
    def off(cls, reference: ParamVector) -> "ProxSpec":
        return cls.build(reference, 0.0)

    @property
    def inactive(self) -> bool:
        return not np.any(self.per_layer_lambda)

    def coordinate_weights(self) -> np.ndarray:
        lengths = [span.length for span in self.reference.layer_map]
        return np.repeat(self.per_layer_lambda, lengths)


def prox_objective(spec: ModelSpec, w: ParamVector, data: Batch, prox: ProxSpec) -> float:
    """``L(w; data) + sum_j lambda_j/2 |w_j - ref_j|^2``."""
    loss = dm.forward_loss(spec, w, data)
    diff = w.values - prox.reference.values
    return loss + 0.5 * float(np.sum(prox.coordinate_weights() * diff * diff))


def _prox_grad(spec, w, x, y, ref, lam_vec):
    g = dm.grad_raw(spec, w, x, y)
    if lam_vec is None:
        return g
    return g + lam_vec * (w - ref)


def gamma_ratio(grad_h, w_candidate: np.ndarray, w_init: np.ndarray) -> float:
    """``|grad_h(w_candidate)| / |grad_h(w_init)|``; NaN if the denominator is below 1e-20."""
    g0 = np.linalg.norm(grad_h(w_init))
    if g0 < 1e-20:
        return math.nan
    return float(np.linalg.norm(grad_h(w_candidate)) / g0)


def gamma_inexactness(spec: ModelSpec, w_candidate: ParamVector, w_init: ParamVector,
                      local_data: Dataset | Batch, prox: ProxSpec) -> float:
    """``|grad h(w_candidate)| / |grad h(w_init)|`` for the proximal objective ``h``.

    Returns NaN when ``w_init`` is already stationary (gradient norm below 1e-20).
    """
    batch = local_data.batch() if isinstance(local_data, Dataset) else local_data
    lam = None if prox.inactive else prox.coordinate_weights()
    ref = prox.reference.values
    return gamma_ratio(lambda w: _prox_grad(spec, w, batch.features, batch.labels, ref, lam),
                       w_candidate.values, w_init.values)


def local_solve(spec: ModelSpec, w_init: ParamVector, local_data: Dataset, prox: ProxSpec,
                budget: SolverBudget, seed: int, stream=()) -> tuple[ParamVector, float]:
    """Momentum SGD on the proximal objective for a fixed budget.

    Minibatches are reshuffled each epoch from ``rng_for(seed, "solve", *stream)``.
    Returns the final parameters and their gamma-inexactness ratio.
    """
    if len(local_data) == 0:
        raise ValueError("local shard is empty")
    dm._check(spec, w_init, local_data.features)
    x_all, y_all = local_data.features, local_data.labels
    n = y_all.size
    rng = rng_for(seed, "solve", *stream)
    lam = None if prox.inactive else prox.coordinate_weights()
    ref = prox.reference.values
    w = w_init.values.copy()
    buf = np.zeros_like(w)
    step = 0
    for _ in range(budget.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, budget.batch_size):
            idx = perm[start:start + budget.batch_size]
            g = _prox_grad(spec, w, x_all[idx], y_all[idx], ref, lam)
            buf = budget.momentum * buf + g
            w = w - budget.lr * buf
            step += 1
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"non-finite parameters at local step {step}")
    out = w_init.like(w)
    return out, gamma_inexactness(spec, out, w_init, local_data, prox)
