"""Round orchestration for FedAvg, FedProx, FedPTR, FedPTR-S and distill-augment.

A run is driven by :func:`run_experiment`, or step by step with
:func:`init_state` and :func:`run_round`. All randomness flows from
``cfg.seed`` through named streams so that, for instance, the minibatch
order of client 3 in round 7 is the same whichever algorithm is running.
That is what makes the degenerate cases (FedProx at lambda=0, FedPTR with
no projection steps, ...) reproduce each other bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmodels as dm
from .data import AuxiliaryDataset, ClientPartition, Dataset, init_auxiliary, rng_for
from .diagnostics import layer_norms, similarity_pair
from .diffmodels import ModelSpec, ParamVector
from .localsolver import ProxSpec, SolverBudget, local_solve
from .trajectory import MttConfig, TrajectoryError, TrajectoryWindow, mtt_update, project_trajectory

ALGORITHMS = ("fedavg", "fedprox", "fedptr", "fedptr_s", "distill_augment")

METRIC_COLUMNS = ("round", "train_loss", "test_acc", "grad_norm", "gamma_mean",
                  "cos_aux", "cos_local", "mtt_loss", "skipped_flags")


class NonFiniteError(FloatingPointError):
    """A round produced NaN or infinite values; ``round`` says which."""

    def __init__(self, rnd: int, detail: str):
        super().__init__(f"non-finite values in round {rnd}: {detail}")
        self.round = rnd


@dataclass(frozen=True)
class FedConfig:
    algorithm: str = "fedptr"
    rounds: int = 60
    n_clients: int = 10
    participation_ratio: float = 1.0
    window: int = 1
    projection_steps: int = 5
    projection_lr: float = 0.01
    base_lambda: float = 0.05
    adaptive_lambda: bool = True
    mtt: MttConfig = MttConfig()
    mtt_frequency: int = 1
    aux_per_class: int = 10
    aux_init: str = "local"
    solver: SolverBudget = SolverBudget()
    hidden_layers: tuple[int, ...] = ()
    activation: str = "tanh"
    probe: bool = False
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0 < self.participation_ratio <= 1:
            raise ValueError("participation_ratio must lie in (0, 1]")
        if self.rounds < 1 or self.n_clients < 1 or self.window < 1:
            raise ValueError("rounds, n_clients and window must be >= 1")
        if self.projection_steps < 0 or self.mtt_frequency < 0:
            raise ValueError("projection_steps and mtt_frequency must be >= 0")
        if self.projection_lr <= 0 or self.base_lambda < 0:
            raise ValueError("projection_lr must be positive, base_lambda nonnegative")
        if self.aux_init not in ("local", "noise"):
            raise ValueError("aux_init must be 'local' or 'noise'")
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))

    def replace(self, **changes) -> "FedConfig":
        return dataclasses.replace(self, **changes)

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(input_dim, self.hidden_layers + (num_classes,), self.activation)


@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    test_acc: float
    grad_norm: float
    gamma_mean: float
    cos_aux: float = math.nan
    cos_local: float = math.nan
    mtt_loss: float = math.nan
    skipped_flags: int = 0
    participants: tuple[int, ...] = ()
    mtt_updates: int = 0
    lambda_identity_err: float = math.nan

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class ProbeRecord:
    """Vectors from the latest round, kept for the similarity probe."""

    w_prev: ParamVector
    w_next: ParamVector
    projected: dict[int, ParamVector] = field(default_factory=dict)
    local: dict[int, ParamVector] = field(default_factory=dict)


@dataclass
class FedState:
    spec: ModelSpec
    data: Dataset
    partition: ClientPartition
    test: Dataset
    global_model: ParamVector
    window: TrajectoryWindow
    client_windows: dict[int, TrajectoryWindow] = field(default_factory=dict)
    client_aux: dict[int, AuxiliaryDataset] = field(default_factory=dict)
    server_aux: AuxiliaryDataset | None = None
    last_mtt: dict = field(default_factory=dict)
    client_mtt_updates: dict[int, int] = field(default_factory=dict)
    server_mtt_updates: int = 0
    round: int = 0
    probe: ProbeRecord | None = None

    @property
    def train(self) -> Dataset:
        idx = np.sort(np.concatenate(self.partition.client_indices))
        return self.data.subset(idx)

    def shard(self, i: int) -> Dataset | None:
        idx = self.partition.client_indices[i]
        return self.data.subset(idx) if idx.size else None


def sample_participants(N: int, ratio: float, rnd: int, seed: int) -> list[int]:
    """Uniform sample without replacement of ``max(1, round(ratio*N))`` clients."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    k = max(1, int(round(ratio * N)))
    if k >= N:
        return list(range(N))
    return sorted(int(i) for i in rng_for(seed, "participants", rnd).choice(N, size=k, replace=False))


def aggregate(models: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Weighted average, accumulated in list order."""
    if not models or len(models) != len(weights):
        raise ValueError("need one weight per model")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    if len(models) == 1:
        return models[0].copy()
    total = w.sum()
    acc = np.zeros_like(models[0].values)
    for model, wi in zip(models, w):
        if not model.same_layout(models[0]):
            raise dm.ModelError("layer maps differ")
        if wi > 0:
            acc += (wi / total) * model.values
    return models[0].like(acc)


def init_state(cfg: FedConfig, data: Dataset, partition: ClientPartition,
               test: Dataset) -> FedState:
    if partition.n_clients != cfg.n_clients:
        raise ValueError(f"partition has {partition.n_clients} clients, config says {cfg.n_clients}")
    partition.validate(data)
    spec = cfg.model_spec(data.dim, data.num_classes)
    w0 = spec.init_params(int(rng_for(cfg.seed, "model-init").integers(2**31)))
    state = FedState(spec, data, partition, test, w0, TrajectoryWindow(cfg.window + 1))
    if cfg.algorithm in ("fedptr", "distill_augment"):
        for i in range(cfg.n_clients):
            state.client_windows[i] = TrajectoryWindow(cfg.window + 1)
            local = state.shard(i)
            mode = "client" if (cfg.aux_init == "local" and local is not None) else "server"
            state.client_aux[i] = init_auxiliary(
                local, data.num_classes, cfg.aux_per_class, data.dim, mode,
                int(rng_for(cfg.seed, "aux", i).integers(2**31)))
            state.client_mtt_updates[i] = 0
    elif cfg.algorithm == "fedptr_s":
        state.server_aux = init_auxiliary(
            None, data.num_classes, cfg.aux_per_class, data.dim, "server",
            int(rng_for(cfg.seed, "aux", "server").integers(2**31)))
    return state


def _mtt_due(cfg: FedConfig, last: int | None, t: int) -> bool:
    if last is None:
        return True
    if cfg.mtt_frequency == 0:
        return False
    return t - last >= cfg.mtt_frequency


def _endpoints(window: TrajectoryWindow, t: int, m: int):
    return window.endpoints(t, m) or window.widest()


@dataclass
class _ClientOutcome:
    model: ParamVector
    gamma: float = math.nan
    projected: ParamVector | None = None
    prox: ProxSpec | None = None
    aux: AuxiliaryDataset | None = None
    mtt_losses: list | None = None
    mtt_skipped: bool = False
    mtt_ran: bool = False


def _client_step(state: FedState, cfg: FedConfig, i: int, t: int,
                 shared_target: ParamVector | None) -> _ClientOutcome:
    spec, w_t = state.spec, state.global_model
    local = state.shard(i)
    algo = cfg.algorithm
    out = _ClientOutcome(w_t)
    prox = ProxSpec.off(w_t)
    train_on = local

    if algo == "fedprox":
        prox = ProxSpec.build(w_t, cfg.base_lambda)
    elif algo == "fedptr_s":
        if shared_target is not None:
            out.projected = shared_target
            if not cfg.probe:
                prox = ProxSpec.build(shared_target, cfg.base_lambda, cfg.adaptive_lambda, at=w_t)
    elif algo in ("fedptr", "distill_augment"):
        window = state.client_windows[i]
        aux = state.client_aux[i]
        ends = _endpoints(window, t, cfg.window) if t > cfg.window else None
        if ends is not None and local is not None:
            if _mtt_due(cfg, state.last_mtt.get(i), t):
                res = mtt_update(spec, aux, ends[0], ends[1], cfg.mtt)
                out.mtt_ran = True
                out.mtt_skipped = res.skipped
                out.mtt_losses = res.losses
                aux = out.aux = res.aux
            if algo == "fedptr":
                target = project_trajectory(spec, w_t, aux, cfg.projection_steps, cfg.projection_lr)
                out.projected = target
                if not cfg.probe:
                    prox = ProxSpec.build(target, cfg.base_lambda, cfg.adaptive_lambda, at=w_t)
            elif i in state.last_mtt or out.mtt_ran:
                train_on = Dataset(np.vstack([local.features, aux.features]),
                                   np.concatenate([local.labels, aux.labels]),
                                   local.num_classes)
        if algo == "distill_augment":
            prox = ProxSpec.build(w_t, cfg.base_lambda)

    if local is None:
        return out
    out.prox = prox
    out.model, out.gamma = local_solve(spec, w_t, train_on, prox, cfg.solver, cfg.seed,
                                       stream=(i, t))
    return out


def _server_target(state: FedState, cfg: FedConfig, t: int):
    """FedPTR-S: server-side matching and projection. Returns (target, losses, skipped, ran)."""
    if t <= cfg.window:
        return None, None, False, False
    ends = _endpoints(state.window, t, cfg.window)
    if ends is None:
        return None, None, False, False
    losses, skipped, ran = None, False, False
    if _mtt_due(cfg, state.last_mtt.get("server"), t):
        res = mtt_update(state.spec, state.server_aux, ends[0], ends[1], cfg.mtt)
        state.server_aux = res.aux
        losses, skipped, ran = res.losses, res.skipped, True
        state.last_mtt["server"] = t
        state.server_mtt_updates += 1
    target = project_trajectory(state.spec, state.global_model, state.server_aux,
                                cfg.projection_steps, cfg.projection_lr)
    return target, losses, skipped, ran


def run_round(state: FedState, cfg: FedConfig) -> tuple[FedState, RoundMetrics]:
    """One communication round; ``state`` is advanced in place and returned."""
    t = state.round
    w_t = state.global_model
    if not state.window.rounds or state.window.rounds[-1] < t:
        state.window.push(t, w_t)
    selected = sample_participants(cfg.n_clients, cfg.participation_ratio, t, cfg.seed)
    for i in selected:
        win = state.client_windows.get(i)
        if win is not None and (not win.rounds or win.rounds[-1] < t):
            win.push(t, w_t)

    mtt_losses, skipped, n_mtt = [], 0, 0
    shared = None
    if cfg.algorithm == "fedptr_s":
        shared, losses, sk, ran = _server_target(state, cfg, t)
        if ran:
            n_mtt += 1
            skipped += int(sk)
            if losses:
                mtt_losses.append(losses[-1])

    def work(i):
        return _client_step(state, cfg, i, t, shared)

    if cfg.threads > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            outcomes = list(pool.map(work, selected))
    else:
        outcomes = [work(i) for i in selected]

    sizes = state.partition.sizes
    models, weights, gammas, lam_err = [], [], [], 0.0
    record = ProbeRecord(w_t, w_t)
    for i, res in zip(selected, outcomes):
        if res.mtt_ran:
            n_mtt += 1
            state.client_mtt_updates[i] += 1
            state.last_mtt[i] = t
            skipped += int(res.mtt_skipped)
            if res.mtt_losses:
                mtt_losses.append(res.mtt_losses[-1])
        if res.aux is not None:
            state.client_aux[i] = res.aux
        if sizes[i] == 0:
            continue
        models.append(res.model)
        weights.append(float(sizes[i]))
        if not math.isnan(res.gamma):
            gammas.append(res.gamma)
        record.local[i] = res.model
        if res.projected is not None:
            record.projected[i] = res.projected
        if res.prox is not None and res.prox.adaptive and not res.prox.inactive:
            norms = layer_norms(w_t, res.prox.reference)
            nz = norms > 0
            if nz.any():
                lam_err = max(lam_err, float(np.max(np.abs(
                    res.prox.per_layer_lambda[nz] * norms[nz] - res.prox.base_lambda))))

    new_global = aggregate(models, weights) if models else w_t.copy()
    record.w_next = new_global
    state.probe = record
    state.global_model = new_global
    state.round = t + 1

    train = state.train
    loss, g = dm.loss_and_grad_raw(state.spec, new_global.values, train.features, train.labels)
    test_acc = dm.accuracy_raw(state.spec, new_global.values, state.test.features, state.test.labels)
    cos_a, cos_l = [], []
    for i in record.projected:
        ca, cl = similarity_pair(record, i)
        if not math.isnan(ca):
            cos_a.append(ca)
        if not math.isnan(cl):
            cos_l.append(cl)
    metrics = RoundMetrics(
        round=t, train_loss=loss, test_acc=test_acc, grad_norm=float(np.linalg.norm(g)),
        gamma_mean=float(np.mean(gammas)) if gammas else math.nan,
        cos_aux=float(np.mean(cos_a)) if cos_a else math.nan,
        cos_local=float(np.mean(cos_l)) if cos_l else math.nan,
        mtt_loss=float(np.mean(mtt_losses)) if mtt_losses else math.nan,
        skipped_flags=skipped, participants=tuple(selected), mtt_updates=n_mtt,
        lambda_identity_err=lam_err if cfg.adaptive_lambda else math.nan,
    )
    if not all(math.isfinite(v) for v in (metrics.train_loss, metrics.grad_norm)):
        raise FloatingPointError("train loss or gradient norm is not finite")
    return state, metrics


def run_experiment(cfg: FedConfig, data: Dataset, partition: ClientPartition, test: Dataset,
                   return_state: bool = False, callback=None):
    """Run ``cfg.rounds`` rounds; returns the per-round metrics
    (and the final state when ``return_state``)."""
    state = init_state(cfg, data, partition, test)
    history = []
    for _ in range(cfg.rounds):
        t = state.round
        try:
            state, m = run_round(state, cfg)
        except (FloatingPointError, TrajectoryError) as exc:
            raise NonFiniteError(t, str(exc)) from exc
        history.append(m)
        if callback is not None:
            callback(state, m)
    return (history, state) if return_state else history


def last5_accuracy(history: Sequence[RoundMetrics]) -> float:
    """Mean test accuracy over the final five rounds (or all, if fewer)."""
    tail = history[-5:]
    return float(np.mean([m.test_acc for m in tail]))


def write_metrics_csv(history: Sequence[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in history:
            w.writerow([repr(v) if isinstance(v, float) else v for v in m.row()])
