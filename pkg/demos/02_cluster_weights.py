#!/usr/bin/env python3
# A few FedWCA rounds on one seed; look at what each client asks for
# (alpha over clusters, beta between own cluster and blend) and what the
# server makes of it (A, B).

from dataclasses import replace

import numpy as np

from fedwca.config import ExperimentConfig
from fedwca.experiment import build_benchmark
from fedwca.federation import Federation

np.set_printoptions(precision=3, suppress=True)

cfg = ExperimentConfig()
bench = build_benchmark(cfg, seed=1)
fed = Federation(replace(cfg.method_config("fedwca", 1), rounds=4), bench.clients, bench.source)

def show(state):
    if not state.bundles:
        print(f"after round {state.round - 1}: clusters {state.assignment.assignment}")
        return
    print(f"\nround {state.round - 1}")
    for b in state.bundles:
        c = state.assignment.assignment[b.client_id]
        print(f"  client {b.client_id} (cluster {c}) alpha {b.alpha} beta {b.beta} -> v {b.v}")
    print("  A (columns: destination cluster)\n", state.coeffs.A)
    print("  B (self, blend)\n", state.coeffs.B)

state = fed.run(show)
print("\nfinal mean test accuracy:", np.mean([r["accuracy"] for r in fed.evaluate(state) if r["split"] == "test"]))
