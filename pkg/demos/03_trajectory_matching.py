"""Fit a small synthetic set so that a few gradient steps on it reproduce a
real stretch of training, then use it to look one step ahead."""

# %%
import numpy as np

from fedptr import diffmodels as dm
from fedptr.data import gen_synthetic_mixture, init_auxiliary
from fedptr.diagnostics import cosine_similarity, estimate_sigma_d
from fedptr.diffmodels import ModelSpec
from fedptr.trajectory import MttConfig, mtt_update, project_trajectory

data = gen_synthetic_mixture(200, 10, 20, 2.5, seed=0)
spec = ModelSpec(20, (32, 10))
lr = 0.1

# %% a short stretch of real training: two epochs of full-batch descent
def train(w, steps):
    for _ in range(steps):
        w = w.like(w.values - lr * dm.grad_raw(spec, w.values, data.features, data.labels))
    return w

w_start = train(spec.init_params(0), 5)
w_end = train(w_start, 5)
w_next = train(w_end, 5)

# %% 10 rows per class of pure noise, learnable step size starting at 0.01
aux = init_auxiliary(None, 10, 10, 20, "server", seed=1)
res = mtt_update(spec, aux, w_start, w_end, MttConfig(outer_steps=40))
print("matching loss", [round(x, 3) for x in res.losses[::8]], "->", round(res.losses[-1], 3))
print("learned step size", res.aux.beta)

# %% the fitted set's gradient points along the real one; the noise did not
for name, a in (("noise", aux), ("fitted", res.aux)):
    g = dm.grad_raw(spec, w_end.values, data.features, data.labels)
    g_aux = dm.grad_raw(spec, w_end.values, a.features, a.labels)
    print(f"{name:6s} cos(real, aux gradient)={cosine_similarity(g, g_aux):.3f}  "
          f"norm ratio={np.linalg.norm(g_aux) / np.linalg.norm(g):.2f}")

# %% the norm gap also counts scale: the set has to cover 5 steps of lr 0.1 with
# 10 steps of a step size near 0.01, so its gradient comes out larger than the real one
probes = [w_start, w_end]
print("gradient gap, noise ", estimate_sigma_d(spec, aux, data, probes))
print("gradient gap, fitted", estimate_sigma_d(spec, res.aux, data, probes))

# %% projecting forward from w_end points roughly where real training goes next
target = project_trajectory(spec, w_end, res.aux, 5, 0.01)
print("cos(projection, real step)",
      cosine_similarity(target.values - w_end.values, w_next.values - w_end.values))
