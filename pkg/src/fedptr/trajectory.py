"""Trajectory matching on an auxiliary set and next-step trajectory projection.

``mtt_update`` fits the auxiliary features (and the inner step size) so that
``R`` gradient steps on the auxiliary set, started at ``w_start``, land as
close as possible to ``w_end``. Gradients through the unrolled steps are
exact: the reverse sweep needs one Hessian-vector product and one mixed
feature/parameter second derivative per inner step.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmodels as dm
from .data import AuxiliaryDataset
from .diffmodels import ModelSpec, ParamVector

DEGENERATE_DENOM = 1e-24


class TrajectoryError(RuntimeError):
    pass


class DegenerateTrajectory(TrajectoryError):
    """Raised when ``w_end`` and ``w_start`` (nearly) coincide."""


@dataclass(frozen=True)
class MttConfig:
    outer_steps: int = 20
    inner_steps: int = 10
    aux_lr: float = 100.0
    # step size for log(beta); None reuses aux_lr
    beta_lr: float | None = 0.01

    def __post_init__(self):
        if self.outer_steps < 1 or self.inner_steps < 1:
            raise ValueError("outer_steps and inner_steps must be >= 1")
        if self.aux_lr < 0 or (self.beta_lr is not None and self.beta_lr < 0):
            raise ValueError("aux_lr and beta_lr must be nonnegative")

    @property
    def log_beta_lr(self) -> float:
        return self.aux_lr if self.beta_lr is None else self.beta_lr


@dataclass
class MttResult:
    aux: AuxiliaryDataset
    losses: list[float] = field(default_factory=list)
    skipped: bool = False


def descend(grad_fn, w0: np.ndarray, lr: float, steps: int) -> list[np.ndarray]:
    """Plain gradient descent; returns every iterate, ``w0`` first."""
    path = [w0]
    w = w0
    for r in range(steps):
        w = w - lr * grad_fn(w)
        if not np.all(np.isfinite(w)):
            raise TrajectoryError(f"non-finite parameters after step {r + 1}")
        path.append(w)
    return path


def _gd_path(spec, w0, x, y, lr, steps):
    return descend(lambda w: dm.grad_raw(spec, w, x, y), w0, lr, steps)


def unroll_inner(spec: ModelSpec, aux: AuxiliaryDataset, w_start: ParamVector, R: int) -> ParamVector:
    """``R`` full-batch gradient steps on ``aux`` with step size ``aux.beta``."""
    dm._check(spec, w_start, aux.features)
    path = _gd_path(spec, w_start.values, aux.features, aux.labels, aux.beta, R)
    return w_start.like(path[-1])


def _denominator(w_start: np.ndarray, w_end: np.ndarray) -> float:
    denom = float(np.sum((w_end - w_start) ** 2))
    if denom < DEGENERATE_DENOM:
        raise DegenerateTrajectory(
            f"|w_end - w_start|^2 = {denom:.3g} is below {DEGENERATE_DENOM:g}"
        )
    return denom


def mtt_loss(w_hat: ParamVector, w_start: ParamVector, w_end: ParamVector) -> float:
    """``|w_hat - w_end|^2 / |w_end - w_start|^2``."""
    denom = _denominator(w_start.values, w_end.values)
    return float(np.sum((w_hat.values - w_end.values) ** 2)) / denom


def _loss_and_meta_grad(spec, feats, labels, beta, w_start, w_end, R):
    denom = _denominator(w_start, w_end)
    path = _gd_path(spec, w_start, feats, labels, beta, R)
    resid = path[-1] - w_end
    loss = float(resid @ resid) / denom
    adj = 2.0 * resid / denom
    d_feats = np.zeros_like(feats)
    d_beta = 0.0
    for r in range(R - 1, -1, -1):
        w_r = path[r]
        # w_{r+1} = w_r - beta * g(w_r, X)
        d_beta -= float(adj @ dm.grad_raw(spec, w_r, feats, labels))
        hv, mixed = dm.hvp_and_mixed_raw(spec, w_r, feats, labels, adj)
        d_feats -= beta * mixed
        adj = adj - beta * hv
    return loss, d_feats, d_beta


def meta_gradient(spec: ModelSpec, aux: AuxiliaryDataset, w_start: ParamVector,
                  w_end: ParamVector, R: int) -> tuple[np.ndarray, float]:
    """Gradient of ``mtt_loss(unroll_inner(aux, w_start, R), w_start, w_end)``
    with respect to the auxiliary features and to ``beta``."""
    dm._check(spec, w_start, aux.features)
    _, d_feats, d_beta = _loss_and_meta_grad(
        spec, aux.features, aux.labels, aux.beta, w_start.values, w_end.values, R
    )
    return d_feats, d_beta


def mtt_update(spec: ModelSpec, aux: AuxiliaryDataset, w_start: ParamVector,
               w_end: ParamVector, cfg: MttConfig) -> MttResult:
    """Run ``cfg.outer_steps`` gradient steps on the matching loss.

    ``losses[h]`` is the loss before step ``h``. A degenerate trajectory
    leaves ``aux`` untouched and sets ``skipped``.
    """
    dm._check(spec, w_start, aux.features)
    try:
        _denominator(w_start.values, w_end.values)
    except DegenerateTrajectory:
        return MttResult(aux, [], skipped=True)
    feats = aux.features.copy()
    log_beta = aux.log_beta
    losses = []
    for _ in range(cfg.outer_steps):
        beta = float(np.exp(log_beta))
        loss, d_feats, d_beta = _loss_and_meta_grad(
            spec, feats, aux.labels, beta, w_start.values, w_end.values, cfg.inner_steps
        )
        losses.append(loss)
        if cfg.aux_lr:
            feats = feats - cfg.aux_lr * d_feats
        if cfg.log_beta_lr:
            # chain rule through beta = exp(log_beta)
            log_beta = log_beta - cfg.log_beta_lr * d_beta * beta
    return MttResult(aux.replace(features=feats, log_beta=log_beta), losses)


def project_trajectory(spec: ModelSpec, w_t: ParamVector, aux: AuxiliaryDataset,
                       K: int, eta: float) -> ParamVector:
    """``K`` full-batch gradient steps on ``aux`` from ``w_t`` with step ``eta``."""
    dm._check(spec, w_t, aux.features)
    if K == 0:
        return w_t.copy()
    path = _gd_path(spec, w_t.values, aux.features, aux.labels, eta, K)
    return w_t.like(path[-1])


class TrajectoryWindow:
    """The last ``capacity`` global models, keyed by round."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[tuple[int, ParamVector]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def rounds(self) -> list[int]:
        return [r for r, _ in self._entries]

    def push(self, rnd: int, model: ParamVector) -> None:
        if self._entries and rnd <= self._entries[-1][0]:
            raise ValueError(f"round {rnd} is not after {self._entries[-1][0]}")
        self._entries.append((rnd, model.copy()))

    def get(self, rnd: int) -> ParamVector | None:
        for r, w in self._entries:
            if r == rnd:
                return w
        return None

    def endpoints(self, t: int, m: int) -> tuple[ParamVector, ParamVector] | None:
        """``(w^{t-m}, w^t)`` if both are held and the span fits the window."""
        if m < 1 or m + 1 > self.capacity:
            return None
        start, end = self.get(t - m), self.get(t)
        if start is None or end is None:
            return None
        return start, end

    def widest(self) -> tuple[ParamVector, ParamVector] | None:
        """``(oldest, newest)`` held entries, or None with fewer than two."""
        if len(self._entries) < 2:
            return None
        return self._entries[0][1], self._entries[-1][1]

    def save(self, path_stem) -> None:
        stem = Path(path_stem)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for _, model in self._entries:
                w.writerow([repr(float(v)) for v in model.values])
        meta = {
            "rounds": self.rounds,
            "capacity": self.capacity,
            "layer_map": [[s.layer_id, s.offset, s.length]
                          for s in (self._entries[0][1].layer_map if self._entries else ())],
        }
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def save_auxiliary(aux: AuxiliaryDataset, path_stem, **extra) -> None:
    """Features to ``<stem>.csv``; labels, beta and ``extra`` to ``<stem>.json``."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in aux.features:
            w.writerow([repr(float(v)) for v in row])
    meta = {"labels": [int(v) for v in aux.labels], "beta": aux.beta,
            "log_beta": aux.log_beta, "num_classes": aux.num_classes, **extra}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_auxiliary(path_stem) -> AuxiliaryDataset:
    stem = Path(path_stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    feats = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", ndmin=2)
    return AuxiliaryDataset(feats, np.array(meta["labels"], dtype=np.int64),
                            float(meta["log_beta"]), int(meta["num_classes"]))
