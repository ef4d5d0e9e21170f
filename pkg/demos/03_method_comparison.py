#!/usr/bin/env python3
# Source Only, FedAvg, the fixed-weight ablations and FedWCA on the default
# benchmark.  Two seeds keep this under a minute; the acceptance suite uses five.

import tempfile
from dataclasses import replace

from fedwca.config import ExperimentConfig
from fedwca.experiment import run_grid

cfg = replace(ExperimentConfig(), seeds=(0, 1), save_checkpoints=False)
with tempfile.TemporaryDirectory() as out:
    outcome = run_grid(cfg, out)

rows = sorted(outcome.summary["methods"].items(), key=lambda kv: kv[1]["mean"])
for method, entry in rows:
    dom = "  ".join(f"d{d} {100 * a:5.1f}" for d, a in entry["per_domain"].items())
    print(f"{method:15s} {100 * entry['mean']:6.2f} +- {100 * entry['std']:4.2f}   {dom}")
