"""With the regularizer switched off, compare two directions against the
actual global step: the projection on the auxiliary set, and each client's
own local update. Under heavy label skew the first tracks the global step
much better."""

# %%
import logging

import numpy as np

from fedptr.diagnostics import estimate_B, layer_norms
from fedptr.federation import init_state, run_round
from fedptr.harness import ExperimentFile, load_data, make_partition

logging.basicConfig(level=logging.ERROR)
exp = ExperimentFile.from_dict({
    "algorithm": "fedptr_s", "probe": True, "rounds": 30, "hidden_layers": [32],
    "solver": {"epochs": 2, "batch_size": 50, "lr": 0.1, "momentum": 0.5},
    "dataset": {"n_per_class": 600, "num_classes": 10, "dim": 20, "separation": 2.5},
    "partition": {"alpha": 0.01, "n_clients": 10},
})
train, test, _ = load_data(exp, 0)
part = make_partition(exp, train, 0)
state = init_state(exp.fed, train, part, test)

# %%
rows = []
for _ in range(exp.fed.rounds):
    state, m = run_round(state, exp.fed)
    rows.append((m.round, m.cos_aux, m.cos_local))
    if m.round % 5 == 4:
        print(f"round {m.round:2d}  cos_aux={m.cos_aux:.3f}  cos_local={m.cos_local:.3f}")
print("run means", np.nanmean([r[1] for r in rows]), np.nanmean([r[2] for r in rows]))

# %% how dissimilar the clients are at the final model (1 = identical)
print("B estimate", estimate_B(state.spec, part, train, state.global_model))

# %% layer-wise distance from the global model to the projection target
rec = state.probe
target = next(iter(rec.projected.values()))
for span, norm in zip(rec.w_prev.layer_map, layer_norms(rec.w_prev, target)):
    print(span.layer_id, round(float(norm), 5))
