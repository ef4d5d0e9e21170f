#!/usr/bin/env python3
# Round 0: every client adapts the source model on its own data, then the
# server groups clients by the first layer of their updated models.

from dataclasses import replace

import numpy as np

from fedwca.clustering import cluster_clients, purity
from fedwca.config import ExperimentConfig
from fedwca.experiment import build_benchmark
from fedwca.federation import Federation
from fedwca.model import cosine_matrix, first_layer_vector

cfg = ExperimentConfig()
bench = build_benchmark(cfg, seed=0)
truth = [c.domain_id for c in bench.clients]
print("clients per domain:", np.bincount(truth)[1:])

# one round of purely local adaptation == what the server sees after round 0
local = replace(cfg.method_config("local", 0), rounds=1)
models = Federation(local, bench.clients, bench.source).run().local_models

sig = np.stack([first_layer_vector(m).values for m in models])
np.set_printoptions(precision=4, suppress=True, linewidth=120)
print("first-layer cosine similarity between clients:")
print(cosine_matrix(sig, sig))

first = cluster_clients(models, "first")
every = cluster_clients(models, "all")
print("first layer :", first.assignment, "purity", purity(first, truth))
print("all layers  :", every.assignment, "purity", purity(every, truth))
