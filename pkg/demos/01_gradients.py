"""Exact derivatives of a small MLP, checked against finite differences."""

# %%
import numpy as np

from fedptr import diffmodels as dm
from fedptr.diffmodels import Batch, ModelSpec

rng = np.random.default_rng(0)
spec = ModelSpec(input_dim=3, layer_sizes=(5, 4), activation="tanh")  # 3 -> 5 -> 4 classes
w = spec.init_params(seed=1)
batch = Batch(rng.normal(size=(6, 3)), rng.integers(0, 4, size=6))
print(spec.n_params, "parameters in", [s.layer_id for s in spec.layer_map()])

# %% loss at init is close to ln(4) since the logits start small
print("loss", dm.forward_loss(spec, w, batch), "ln 4 =", np.log(4))

# %% gradient vs central differences
g = dm.grad(spec, w, batch).values
eps = 1e-5
fd = np.array([(dm.loss_raw(spec, w.values + eps * e, batch.features, batch.labels)
                - dm.loss_raw(spec, w.values - eps * e, batch.features, batch.labels)) / (2 * eps)
               for e in np.eye(spec.n_params)])
print("gradient rel err", np.linalg.norm(g - fd) / np.linalg.norm(fd))

# %% Hessian-vector product vs differences of gradients
v = spec.wrap(rng.normal(size=spec.n_params))
hv = dm.hvp(spec, w, batch, v).values
fd_hv = (dm.grad_raw(spec, w.values + eps * v.values, batch.features, batch.labels)
         - dm.grad_raw(spec, w.values - eps * v.values, batch.features, batch.labels)) / (2 * eps)
print("hvp rel err", np.linalg.norm(hv - fd_hv) / np.linalg.norm(fd_hv))

# %% the mixed term: how <grad, v> moves when the input features move
hv2, d_features = dm.hvp_and_mixed(spec, w, batch, v)
print("mixed term shape", d_features.shape, "same hvp:", np.array_equal(hv2.values, hv))
