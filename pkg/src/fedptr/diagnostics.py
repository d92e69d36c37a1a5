"""Measurement helpers: gradient cosines, layer-wise distances and
empirical heterogeneity constants."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffmodels as dm
from .data import AuxiliaryDataset, ClientPartition, Dataset
from .diffmodels import ModelSpec, ParamVector


def _vals(v) -> np.ndarray:
    return v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; NaN if either is zero."""
    a, b = _vals(a), _vals(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.nan
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_probe(state, i: int) -> tuple[float, float]:
    """``(cos_aux, cos_local)`` for client ``i`` in the state's latest round.

    ``cos_aux`` compares the projection displacement ``w^t - w~_i`` with the
    global step ``w^t - w^{t+1}``; ``cos_local`` compares the client's own
    displacement ``w^t - w_i`` with the same global step. NaN marks a vector
    that is missing or zero.
    """
    if state.probe is None:
        raise ValueError("no round has been run yet")
    return similarity_pair(state.probe, i)


def similarity_pair(record, i: int) -> tuple[float, float]:
    step = record.w_prev.values - record.w_next.values
    cos_aux = cos_local = math.nan
    if i in record.projected:
        cos_aux = cosine_similarity(record.w_prev.values - record.projected[i].values, step)
    if i in record.local:
        cos_local = cosine_similarity(record.w_prev.values - record.local[i].values, step)
    return cos_aux, cos_local


def layer_norms(w: ParamVector, ref: ParamVector) -> np.ndarray:
    """``|w_j - ref_j|`` for each layer span."""
    if not w.same_layout(ref):
        raise dm.ModelError("layer maps differ")
    return np.array([np.linalg.norm(w.layer(j) - ref.layer(j)) for j in range(w.n_layers)])


def estimate_B(spec: ModelSpec, partition: ClientPartition, data: Dataset, w: ParamVector) -> float:
    """Smallest ``B`` with ``mean_i |grad L_i(w)|^2 <= B^2 |grad L(w)|^2`` at this ``w``.

    Empty clients are left out of the mean. The global gradient is the
    size-weighted average of the local ones. Returns ``inf`` when the global
    gradient vanishes.
    """
    grads, sizes = [], []
    for idx in partition.client_indices:
        if idx.size == 0:
            continue
        grads.append(dm.grad_raw(spec, w.values, data.features[idx], data.labels[idx]))
        sizes.append(idx.size)
    grads = np.array(grads)
    sizes = np.array(sizes, dtype=float)
    global_grad = (sizes / sizes.sum()) @ grads
    denom = float(global_grad @ global_grad)
    if math.sqrt(denom) < 1e-20:
        return math.inf
    return math.sqrt(float(np.mean(np.sum(grads * grads, axis=1))) / denom)


def estimate_sigma_d(spec: ModelSpec, aux: AuxiliaryDataset, data: Dataset,
                     probe_points: Sequence[ParamVector]) -> float:
    """``max_w |grad L(w; data) - grad L(w; aux)|`` over the probe points."""
    if not probe_points:
        raise ValueError("need at least one probe point")
    worst = 0.0
    for w in probe_points:
        g = dm.grad_raw(spec, w.values, data.features, data.labels)
        g_aux = dm.grad_raw(spec, w.values, aux.features, aux.labels)
        worst = max(worst, float(np.linalg.norm(g - g_aux)))
    return worst
