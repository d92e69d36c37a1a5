"""Dense softmax models over flat parameter vectors.

Every model is an MLP (or plain softmax regression when there is a single
layer) evaluated with mean cross-entropy. Parameters live in one flat
``float64`` vector; each dense layer owns a contiguous span holding its
weight matrix (row-major, ``out x in``) followed by its bias.

Besides the loss and its gradient the module provides a second-order pass
(:func:`hvp_and_mixed`) that differentiates ``<grad_w L(w; X), v>`` with
respect to both the parameters and the input features. That is what the
unrolled trajectory-matching meta-gradient consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

ACTIVATIONS = ("tanh", "softplus", "relu")


class ModelError(ValueError):
    """Raised on dimension mismatches or non-finite parameters."""


@dataclass(frozen=True)
class LayerSpan:
    layer_id: str
    offset: int
    length: int

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter vector plus the spans that partition it into layers."""

    values: np.ndarray
    layer_map: tuple[LayerSpan, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ModelError("parameter values must be a 1-d array")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layer_map", tuple(self.layer_map))
        offset = 0
        for span in self.layer_map:
            if span.offset != offset or span.length < 0:
                raise ModelError(f"layer span {span.layer_id!r} is not contiguous")
            offset += span.length
        if offset != values.size:
            raise ModelError(
                f"layer map covers {offset} entries but vector has {values.size}"
            )

    def __len__(self) -> int:
        return self.values.size

    def layer(self, j: int) -> np.ndarray:
        return self.values[self.layer_map[j].slice]

    @property
    def n_layers(self) -> int:
        return len(self.layer_map)

    def like(self, values: np.ndarray) -> "ParamVector":
        """Same layer map, new values."""
        return ParamVector(values, self.layer_map)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layer_map)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layer_map == other.layer_map

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layer_map == other.layer_map and np.array_equal(
            self.values, other.values
        )


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    num_classes: int = field(default=-1)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ModelError("layer_sizes must be a nonempty list of positive counts")
        if self.num_classes == -1:
            object.__setattr__(self, "num_classes", sizes[-1])
        if sizes[-1] != self.num_classes:
            raise ModelError("last layer width must equal num_classes")
        if self.input_dim < 1:
            raise ModelError("input_dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")

    @classmethod
    def softmax_regression(cls, input_dim: int, num_classes: int) -> "ModelSpec":
        return cls(input_dim, (num_classes,), "tanh", num_classes)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.layer_sizes
        return [(dims[i + 1], dims[i]) for i in range(len(self.layer_sizes))]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def layer_map(self) -> tuple[LayerSpan, ...]:
        spans, offset = [], 0
        for j, (o, i) in enumerate(self.shapes):
            spans.append(LayerSpan(f"dense_{j}", offset, o * i + o))
            offset += o * i + o
        return tuple(spans)

    def wrap(self, values) -> ParamVector:
        return ParamVector(np.asarray(values, dtype=np.float64), self.layer_map())

    def zeros(self) -> ParamVector:
        return self.wrap(np.zeros(self.n_params))

    def init_params(self, seed: int, scale: float = 1.0) -> ParamVector:
        """Glorot-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for o, i in self.shapes:
            std = scale * np.sqrt(2.0 / (o + i))
            parts.append(rng.normal(0.0, std, size=o * i))
            parts.append(np.zeros(o))
        return self.wrap(np.concatenate(parts))


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ModelError("features must be a 2-d matrix")
        if y.shape != (x.shape[0],):
            raise ModelError("labels must have one entry per feature row")
        if x.shape[0] < 1:
            raise ModelError("a batch needs at least one sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size


# --------------------------------------------------------------------------
# internals: everything below works on raw arrays


def _act(name: str, z: np.ndarray):
    """Return (a, a', a'') evaluated at z."""
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "softplus":
        a = np.logaddexp(0.0, z)
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return a, s, s * (1.0 - s)
    a = np.maximum(z, 0.0)
    d1 = (z > 0).astype(np.float64)
    # second derivative taken as 0 everywhere (subgradient convention)
    return a, d1, np.zeros_like(z)


def unpack(spec: ModelSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` into a flat vector, one pair per layer."""
    layers, offset = [], 0
    for o, i in spec.shapes:
        W = values[offset : offset + o * i].reshape(o, i)
        offset += o * i
        layers.append((W, values[offset : offset + o]))
        offset += o
    return layers


def _check(spec: ModelSpec, params: ParamVector, x: np.ndarray | None = None) -> None:
    if params.values.size != spec.n_params:
        raise ModelError(
            f"parameter vector has {params.values.size} entries, spec needs {spec.n_params}"
        )
    if not params.is_finite():
        raise ModelError("parameter vector contains non-finite values")
    if x is not None and x.shape[1] != spec.input_dim:
        raise ModelError(f"features have width {x.shape[1]}, spec needs {spec.input_dim}")


def _forward(spec, layers, x):
    zs, hs = [], [x]
    h = x
    last = len(layers) - 1
    for j, (W, b) in enumerate(layers):
        z = h @ W.T + b
        zs.append(z)
        if j < last:
            h = _act(spec.activation, z)[0]
            hs.append(h)
    return zs, hs


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _mean_ce(z, y):
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return float(np.mean(lse - z[np.arange(y.size), y]))


def loss_raw(spec: ModelSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    zs, _ = _forward(spec, unpack(spec, w), x)
    return _mean_ce(zs[-1], y)


def loss_and_grad_raw(spec, w, x, y):
    layers = unpack(spec, w)
    zs, hs = _forward(spec, layers, x)
    n = y.size
    p = _softmax(zs[-1])
    loss = _mean_ce(zs[-1], y)
    delta = p
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(layers)
    for j in range(len(layers) - 1, -1, -1):
        W, _ = layers[j]
        grads[j] = (delta.T @ hs[j], delta.sum(axis=0))
        if j > 0:
            delta = (delta @ W) * _act(spec.activation, zs[j - 1])[1]
    flat = np.concatenate([part.ravel() for gw_gb in grads for part in gw_gb])
    return loss, flat


def grad_raw(spec, w, x, y) -> np.ndarray:
    return loss_and_grad_raw(spec, w, x, y)[1]


def hvp_and_mixed_raw(spec, w, x, y, v):
    """Gradients of ``F(w, X) = <grad_w L(w; X), v>`` w.r.t. ``w`` and ``X``.

    The first is the Hessian-vector product ``H v``; the second is the mixed
    second derivative contracted with ``v``. Computed by reverse-mode
    differentiation of the forward pass augmented with ``v``-tangents.
    """
    layers = unpack(spec, w)
    tangents = unpack(spec, v)
    n = y.size
    last = len(layers) - 1

    hs, dhs, zs, dzs, acts = [x], [None], [], [], []
    h, dh = x, None
    for j, ((W, b), (U, c)) in enumerate(zip(layers, tangents)):
        z = h @ W.T + b
        dz = h @ U.T + c
        if dh is not None:
            dz = dz + dh @ W.T
        zs.append(z)
        dzs.append(dz)
        if j < last:
            a, d1, d2 = _act(spec.activation, z)
            acts.append((d1, d2))
            h, dh = a, d1 * dz
            hs.append(h)
            dhs.append(dh)

    p = _softmax(zs[-1])
    dz_out = dzs[-1]
    # F = (1/n) sum_i <p_i - onehot_i, dz_i>
    bar_dz = p.copy()
    bar_dz[np.arange(n), y] -= 1.0
    bar_dz /= n
    pd = p * dz_out
    bar_z = (pd - p * pd.sum(axis=1, keepdims=True)) / n

    out = [None] * len(layers)
    bar_x = None
    for j in range(last, -1, -1):
        W, _ = layers[j]
        U, _ = tangents[j]
        h_in, dh_in = hs[j], dhs[j]
        gW = bar_z.T @ h_in
        if dh_in is not None:
            gW = gW + bar_dz.T @ dh_in
        out[j] = (gW, bar_z.sum(axis=0))
        bar_h = bar_z @ W + bar_dz @ U
        if j == 0:
            bar_x = bar_h
            break
        bar_dh = bar_dz @ W
        d1, d2 = acts[j - 1]
        bar_z = bar_h * d1 + bar_dh * d2 * dzs[j - 1]
        bar_dz = bar_dh * d1
    hv = np.concatenate([part.ravel() for pair in out for part in pair])
    return hv, bar_x


def accuracy_raw(spec, w, x, y) -> float:
    zs, _ = _forward(spec, unpack(spec, w), x)
    return float(np.mean(np.argmax(zs[-1], axis=1) == y))


# --------------------------------------------------------------------------
# public API


def forward_loss(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    """Mean cross-entropy of the model on ``batch``."""
    _check(spec, params, batch.features)
    return loss_raw(spec, params.values, batch.features, batch.labels)


def grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> ParamVector:
    """Exact gradient of :func:`forward_loss` with respect to the parameters."""
    _check(spec, params, batch.features)
    return params.like(grad_raw(spec, params.values, batch.features, batch.labels))


def hvp(spec: ModelSpec, params: ParamVector, batch: Batch, v: ParamVector) -> ParamVector:
    """Hessian of :func:`forward_loss` at ``params`` applied to ``v``.

    Exact for tanh and softplus. For relu the activation's second derivative
    is taken to be zero, so only the softmax curvature is captured.
    """
    _check(spec, params, batch.features)
    if v.values.size != params.values.size:
        raise ModelError("direction and parameters differ in length")
    hv, _ = hvp_and_mixed_raw(spec, params.values, batch.features, batch.labels, v.values)
    return params.like(hv)


def hvp_and_mixed(
    spec: ModelSpec, params: ParamVector, batch: Batch, v: ParamVector
) -> tuple[ParamVector, np.ndarray]:
    """``(H v, d/dX <grad_w L, v>)``; the second has the batch's feature shape."""
    _check(spec, params, batch.features)
    if v.values.size != params.values.size:
        raise ModelError("direction and parameters differ in length")
    hv, gx = hvp_and_mixed_raw(spec, params.values, batch.features, batch.labels, v.values)
    return params.like(hv), gx


def predict(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    _check(spec, params, features)
    zs, _ = _forward(spec, unpack(spec, params.values), np.asarray(features, float))
    return np.argmax(zs[-1], axis=1)


def accuracy(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    _check(spec, params, batch.features)
    return accuracy_raw(spec, params.values, batch.features, batch.labels)

