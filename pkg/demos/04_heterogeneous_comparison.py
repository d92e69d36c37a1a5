"""FedAvg, FedProx and the two trajectory-regularized variants on a strongly
non-i.i.d. split. Takes a few minutes; lower ROUNDS for a quicker look."""

# %%
import logging
import time
from pathlib import Path

from fedptr import svgplot
from fedptr.federation import last5_accuracy, run_experiment
from fedptr.harness import ExperimentFile, load_data, make_partition

logging.basicConfig(level=logging.ERROR)
ROUNDS = 60
SEED = 0
OUT = Path(__file__).with_name("out")
OUT.mkdir(exist_ok=True)

base = {
    "rounds": ROUNDS, "hidden_layers": [32],
    "solver": {"epochs": 2, "batch_size": 50, "lr": 0.1, "momentum": 0.5},
    "dataset": {"n_per_class": 600, "num_classes": 10, "dim": 20, "separation": 2.5},
    "partition": {"alpha": 0.01, "n_clients": 10},
}
exp = ExperimentFile.from_dict(base)
train, test, _ = load_data(exp, SEED)
part = make_partition(exp, train, SEED)
print("client sizes", part.sizes.tolist())

# %%
curves = {}
for algo in ("fedavg", "fedprox", "fedptr_s", "fedptr"):
    cfg = exp.fed.replace(algorithm=algo, seed=SEED)
    t0 = time.time()
    history = run_experiment(cfg, train, part, test)
    curves[algo] = ([m.round for m in history], [m.test_acc for m in history])
    print(f"{algo:9s} last-5 accuracy {last5_accuracy(history):.4f}  ({time.time() - t0:.0f}s)")

# %%
path = svgplot.line_chart(curves, OUT / "accuracy.svg", title="test accuracy", ylabel="accuracy")
print("wrote", path)
