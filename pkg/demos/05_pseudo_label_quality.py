#!/usr/bin/env python3
# Pseudo-labels are frozen for a round.  With two models (the composed init
# model and the own-cluster model) the samples on which they agree are
# noticeably cleaner than the rest; hidden labels let us check that offline.

from dataclasses import replace

import numpy as np

from fedwca.config import ExperimentConfig
from fedwca.experiment import build_benchmark
from fedwca.federation import Federation

cfg = ExperimentConfig()
bench = build_benchmark(cfg, seed=0)
fed = Federation(replace(cfg.method_config("fedwca", 0), rounds=6), bench.clients, bench.source)

def audit(state):
    agree, agree_ok, disagree, disagree_ok = 0, 0, 0, 0
    for k, ds in enumerate(state.pseudo):
        truth = bench.clients[k].hidden_train_labels
        sel = ds.labels_by_sample()
        agree += ds.matched_idx.size
        agree_ok += int(np.sum(sel[ds.matched_idx] == truth[ds.matched_idx]))
        disagree += ds.mismatched_idx.size
        disagree_ok += int(np.sum(sel[ds.mismatched_idx] == truth[ds.mismatched_idx]))
    line = f"round {state.round - 1}: {agree} agreeing samples, {agree_ok / max(agree, 1):.3f} correct"
    if disagree:
        line += f" | {disagree} disagreeing, {disagree_ok / disagree:.3f} correct"
    print(line)

fed.run(audit)
