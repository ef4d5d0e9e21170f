"""Experiment runner: benchmark construction, the (method, seed) grid and result files.

Layout of an output directory::

    config.ini                       the resolved configuration
    metrics.csv                      every run's rows, in grid order
    summary.json                     per-method mean/std of final test accuracy
    checkpoints/source_seed<s>.fwca  pre-trained source model per seed
    runs/<method>_seed<s>/
        metrics.csv                  per round, client and split
        weights.csv                  alpha / beta / v per client and round (long form)
        assignment.csv               client -> cluster
        pseudo_labels.csv            optional audit of frozen pseudo-labels
        final_<kind><i>.fwca         final deployed models
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint, tensor_digest
from .config import ExperimentConfig, dump, dumps
from .data import (
    ClientDataset,
    DomainPool,
    gen_multidomain,
    load_idx,
    partition,
    shifted_domains,
)
from .errors import ConfigurationError, FedWCAError
from .federation import Federation, RoundState
from .model import Model, init_model
from .optim import OptimizerState, pretrain_source

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "method", "seed", "round", "client_id", "domain_id", "cluster_id", "split",
    "accuracy", "loss_im", "loss_ce", "uplink_bytes", "downlink_bytes",
)
WEIGHTS_COLUMNS = ("round", "client_id", "cluster_id", "weight", "index", "value")
ASSIGNMENT_COLUMNS = ("client_id", "domain_id", "cluster_id")
AUDIT_COLUMNS = ("round", "client_id", "sample_id", "label_init", "label_cluster", "selected", "matched")


@dataclass(frozen=True)
class Benchmark:
    seed: int
    source_pool: DomainPool
    target_pools: tuple[DomainPool, ...]
    clients: tuple[ClientDataset, ...]
    source: Model


def _pools(cfg: ExperimentConfig, seed: int) -> list[DomainPool]:
    d = cfg.dataset
    if d.kind == "synthetic":
        specs = shifted_domains(d.target_rotations, d.translation_norm, d.noise_std, d.dim, seed,
                                d.source_rotation)
        return gen_multidomain(d.num_classes, specs, d.n_per_domain, seed, d.dim, d.class_std)
    pools = [load_idx(d.source_images, d.source_labels, 0)]
    for i, (img, lab) in enumerate(zip(d.target_images, d.target_labels), start=1):
        pools.append(load_idx(img, lab, i))
    dims = {p.inputs.shape[1] for p in pools}
    if len(dims) != 1:
        raise ConfigurationError(f"IDX domains have different input sizes: {sorted(dims)}")
    return pools


def build_benchmark(cfg: ExperimentConfig, seed: int) -> Benchmark:
    """Domain pools, client partitions and the pre-trained, frozen source model for one seed."""
    pools = _pools(cfg, seed)
    source_pool, targets = pools[0], pools[1:]
    clients: list[ClientDataset] = []
    for pool in targets:
        clients += partition(pool, cfg.dataset.clients_per_domain, seed, len(clients))
    num_classes = int(max(p.labels.max() for p in pools)) + 1
    rng = np.random.default_rng([seed, 4])
    model = init_model(source_pool.inputs.shape[1], cfg.model.hidden, cfg.model.bottleneck,
                       num_classes, rng)
    p = cfg.pretrain
    opt = OptimizerState.for_model(model, p.lr, p.momentum, p.weight_decay)
    source = pretrain_source(model, source_pool.batch(), p.epochs, opt, rng, p.batch_size)
    return Benchmark(seed, source_pool, tuple(targets), tuple(clients), source)


_BENCH_CACHE: dict[tuple[str, int], Benchmark] = {}


def cached_benchmark(cfg: ExperimentConfig, seed: int) -> Benchmark:
    key = (dumps(cfg), seed)
    if key not in _BENCH_CACHE:
        _BENCH_CACHE.clear()  # one seed at a time is enough for grid order
        _BENCH_CACHE[key] = build_benchmark(cfg, seed)
    return _BENCH_CACHE[key]


@dataclass
class RunResult:
    method: str
    seed: int
    metrics: list[dict] = field(default_factory=list)
    weights: list[dict] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    assignment: tuple[int, ...] | None = None
    final_state: RoundState | None = None
    final_models: list[Model] = field(default_factory=list)
    final_kind: str = "model"
    classifier_before: str = ""
    classifier_after: tuple[str, ...] = ()
    seconds: float = 0.0

    @property
    def final_test_accuracy(self) -> float:
        last = max(row["round"] for row in self.metrics)
        accs = [r["accuracy"] for r in self.metrics if r["round"] == last and r["split"] == "test"]
        return float(np.mean(accs))

    def final_domain_accuracy(self) -> dict[int, float]:
        last = max(row["round"] for row in self.metrics)
        out: dict[int, list[float]] = {}
        for r in self.metrics:
            if r["round"] == last and r["split"] == "test":
                out.setdefault(r["domain_id"], []).append(r["accuracy"])
        return {d: float(np.mean(v)) for d, v in sorted(out.items())}


def _classifier_digest(model: Model) -> str:
    return tensor_digest(np.concatenate([model.classifier.weight.ravel(), model.classifier.bias]))


def _metric_rows(fed: Federation, state: RoundState) -> list[dict]:
    cfg = fed.cfg
    rows = []
    for row in fed.evaluate(state):
        k = row["client_id"]
        loss = state.losses[k] if state.losses else None
        rows.append(dict(
            method=cfg.method, seed=cfg.seed, round=state.round, client_id=k,
            domain_id=row["domain_id"], cluster_id=row["cluster_id"], split=row["split"],
            accuracy=row["accuracy"],
            loss_im=loss.im if loss is not None else None,
            loss_ce=loss.ce if loss is not None else None,
            uplink_bytes=int(state.uplink_bytes[k]), downlink_bytes=int(state.downlink_bytes[k]),
        ))
    return rows


def _weight_rows(state: RoundState) -> list[dict]:
    rows = []
    used_in = state.round - 1
    for b in state.bundles:
        cluster = state.assignment.assignment[b.client_id] if state.assignment else -1
        for name in ("alpha", "beta", "v"):
            values = getattr(b, name)
            if values is None:
                continue
            for i, value in enumerate(np.asarray(values)):
                rows.append(dict(round=used_in, client_id=b.client_id, cluster_id=cluster,
                                 weight=name, index=i, value=float(value)))
    return rows


def _audit_rows(state: RoundState) -> list[dict]:
    rows = []
    for k, pseudo in enumerate(state.pseudo):
        if pseudo is None:
            continue
        selected = pseudo.labels_by_sample()
        matched = np.zeros(pseudo.num_samples, dtype=bool)
        matched[pseudo.matched_idx] = True
        for i in range(pseudo.num_samples):
            rows.append(dict(round=pseudo.round, client_id=k, sample_id=i,
                             label_init=int(pseudo.init_labels[i]),
                             label_cluster=int(pseudo.cluster_labels[i]),
                             selected=int(selected[i]), matched=int(matched[i])))
    return rows


def run_single(cfg: ExperimentConfig, method: str, seed: int, bench: Benchmark | None = None,
               workers: int = 1) -> RunResult:
    """One method on one seed, evaluated before the first round and after every round."""
    started = time.perf_counter()
    bench = bench if bench is not None else cached_benchmark(cfg, seed)
    mcfg = cfg.method_config(method, seed)
    fed = Federation(mcfg, bench.clients, bench.source, workers=workers)
    result = RunResult(method, seed, classifier_before=_classifier_digest(bench.source))
    state = fed.initial_state()
    result.metrics += _metric_rows(fed, state)

    def on_round(s: RoundState) -> None:
        result.metrics.extend(_metric_rows(fed, s))
        result.weights.extend(_weight_rows(s))
        if cfg.audit_pseudo_labels:
            result.audit.extend(_audit_rows(s))

    state = fed.run(on_round) if mcfg.effective_rounds else state
    result.final_state = state
    result.assignment = state.assignment.assignment if state.assignment else None
    result.final_models = _final_models(fed, state)
    result.final_kind = "cluster" if state.hard is not None else "model"
    deployed = fed.personalized_models(state) + list(state.local_models)
    result.classifier_after = tuple(sorted({_classifier_digest(m) for m in deployed}))
    result.seconds = time.perf_counter() - started
    return result


def _final_models(fed: Federation, state: RoundState) -> list[Model]:
    if state.hard is not None:
        return list(state.hard)
    if state.global_model is not None:
        return [state.global_model]
    if fed.cfg.method == "local" and state.round > 0:
        return list(state.local_models)
    return [fed.source]


# ----------------------------------------------------------------- output

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def run_dir(out_dir, method: str, seed: int) -> Path:
    return Path(out_dir) / "runs" / f"{method}_seed{seed}"


def write_run(result: RunResult, out_dir, cfg: ExperimentConfig) -> Path:
    d = run_dir(out_dir, result.method, result.seed)
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "metrics.csv", METRICS_COLUMNS, result.metrics)
    write_csv(d / "weights.csv", WEIGHTS_COLUMNS, result.weights)
    if result.assignment is not None:
        domains = {r["client_id"]: r["domain_id"] for r in result.metrics}
        rows = [dict(client_id=k, domain_id=domains[k], cluster_id=c)
                for k, c in enumerate(result.assignment)]
        write_csv(d / "assignment.csv", ASSIGNMENT_COLUMNS, rows)
    if cfg.audit_pseudo_labels:
        write_csv(d / "pseudo_labels.csv", AUDIT_COLUMNS, result.audit)
    if cfg.save_checkpoints:
        for i, model in enumerate(result.final_models):
            save_checkpoint(d / f"final_{result.final_kind}{i}.fwca", model)
    return d


def summarize(results: Sequence[RunResult], failures: Sequence[dict] = ()) -> dict:
    methods: dict[str, dict] = {}
    for r in results:
        entry = methods.setdefault(r.method, {"seeds": {}, "per_domain": {}})
        entry["seeds"][str(r.seed)] = r.final_test_accuracy
        for dom, acc in r.final_domain_accuracy().items():
            entry["per_domain"].setdefault(str(dom), []).append(acc)
    for entry in methods.values():
        accs = list(entry["seeds"].values())
        entry["mean"] = float(np.mean(accs))
        entry["std"] = float(np.std(accs))
        entry["per_domain"] = {d: float(np.mean(v)) for d, v in entry["per_domain"].items()}
    return {"methods": methods, "failures": list(failures)}


# ------------------------------------------------------------------- grid

@dataclass
class GridOutcome:
    results: list[RunResult]
    failures: list[dict]
    summary: dict
    out_dir: Path

    @property
    def ok(self) -> bool:
        return not self.failures


def _grid_task(args) -> RunResult:
    cfg, method, seed = args
    result = run_single(cfg, method, seed)
    result.final_state = None  # keep what crosses process boundaries small
    return result


def run_grid(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, keep_states: bool = False) -> GridOutcome:
    """Run every (method, seed) pair, writing each run's files as soon as it finishes.

    Failed runs are recorded in ``summary.json`` and do not stop the grid.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump(cfg, out / "config.ini")
    tasks = [(cfg, m, s) for s in cfg.seeds for m in cfg.methods]
    results: dict[tuple[str, int], RunResult] = {}
    failures: list[dict] = []

    if cfg.save_checkpoints:
        (out / "checkpoints").mkdir(exist_ok=True)

    def collect(method: str, seed: int, result: RunResult | None, error: BaseException | None):
        if error is not None:
            log.error("%s seed %d failed: %s", method, seed, error)
            failures.append(dict(method=method, seed=seed, error=f"{type(error).__name__}: {error}"))
            return
        if not keep_states:
            result.final_state = None
        results[(method, seed)] = result
        write_run(result, out, cfg)
        log.info("%-15s seed %d  test acc %.4f  (%.1fs)", method, seed,
                 result.final_test_accuracy, result.seconds)

    if jobs <= 1:
        for cfg_, method, seed in tasks:
            try:
                bench = cached_benchmark(cfg_, seed)
                if cfg.save_checkpoints:
                    save_checkpoint(out / "checkpoints" / f"source_seed{seed}.fwca", bench.source)
                collect(method, seed, run_single(cfg_, method, seed, bench), None)
            except (FedWCAError, ValueError, ArithmeticError) as exc:
                collect(method, seed, None, exc)
    else:
        if cfg.save_checkpoints:
            for seed in cfg.seeds:
                try:
                    save_checkpoint(out / "checkpoints" / f"source_seed{seed}.fwca",
                                    cached_benchmark(cfg, seed).source)
                except (FedWCAError, ValueError, ArithmeticError) as exc:
                    log.error("seed %d benchmark failed: %s", seed, exc)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(m, s, pool.submit(_grid_task, (c, m, s))) for c, m, s in tasks]
            for method, seed, fut in futures:
                try:
                    collect(method, seed, fut.result(), None)
                except Exception as exc:  # a worker crash must not lose the other runs
                    collect(method, seed, None, exc)

    ordered = [results[(m, s)] for _, m, s in tasks if (m, s) in results]
    write_csv(out / "metrics.csv", METRICS_COLUMNS, [row for r in ordered for row in r.metrics])
    summary = summarize(ordered, failures)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return GridOutcome(ordered, failures, summary, out)


# ------------------------------------------------------------ dump-weights

WIDE_WEIGHT_COLUMNS = ("method", "seed", "round", "client_id", "cluster_id", "c",
                       "alpha", "v", "beta0", "beta1")


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def consolidate_weights(out_dir) -> list[dict]:
    """One wide row per (run, round, client, cluster index c) from every run's weights.csv.

    Only rounds in which a client received combination weights appear; beta
    is repeated on each of the client's rows.
    """
    root = Path(out_dir) / "runs"
    if not root.is_dir():
        raise FileNotFoundError(f"no run artifacts under {out_dir} (missing runs/ directory)")
    paths = sorted(root.glob("*_seed*/weights.csv"))
    if not paths:
        raise FileNotFoundError(f"no weights.csv files under {root}")
    rows = []
    for path in paths:
        method, _, seed = path.parent.name.rpartition("_seed")
        grouped: dict[tuple[int, int], dict] = {}
        for r in _read_rows(path):
            key = (int(r["round"]), int(r["client_id"]))
            entry = grouped.setdefault(key, {"cluster_id": int(r["cluster_id"])})
            entry.setdefault(r["weight"], {})[int(r["index"])] = r["value"]
        for (rnd, client), entry in sorted(grouped.items()):
            v = entry.get("v", {})
            alpha = entry.get("alpha", {})
            beta = entry.get("beta", {})
            for c in sorted(v):
                rows.append(dict(method=method, seed=int(seed), round=rnd, client_id=client,
                                 cluster_id=entry["cluster_id"], c=c,
                                 alpha=alpha.get(c, ""), v=v[c],
                                 beta0=beta.get(0, ""), beta1=beta.get(1, "")))
    rows.sort(key=lambda r: (r["method"], r["seed"], r["round"], r["client_id"], r["c"]))
    return rows
