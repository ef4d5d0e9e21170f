#!/usr/bin/env python3
# Downlink traffic of full FedWCA (C soft models + own cluster model every
# round) against the periodic variant that refreshes weights every U rounds
# and otherwise ships two models.

from dataclasses import replace

from fedwca.config import ExperimentConfig
from fedwca.experiment import build_benchmark
from fedwca.federation import Federation, mean_test_accuracy

cfg = ExperimentConfig()
bench = build_benchmark(cfg, seed=0)
n_params = bench.source.num_parameters(bench.source.trainable_names())
print(f"{n_params} trainable parameters -> {4 * n_params} bytes per model")

for method, period in [("fedwca", None), ("fedwca_revised", 5), ("fedwca_revised", 10)]:
    mcfg = replace(cfg.method_config(method, 0), period=period)
    per_round = []
    fed = Federation(mcfg, bench.clients, bench.source)
    state = fed.run(lambda s: per_round.append(int(s.last_downlink[0])))
    models = [b // (4 * n_params) for b in per_round]
    label = method if period is None else f"{method} U={period}"
    print(f"{label:22s} models/round {models}")
    print(f"{'':22s} total downlink per client {state.downlink_bytes[0]:,} B, "
          f"test acc {100 * mean_test_accuracy(fed.evaluate(state)):.2f}")
