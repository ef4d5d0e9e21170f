import csv
import json

import numpy as np
import pytest

from fedwca.checkpoint import manifest, save_checkpoint
from fedwca.cli import main
from fedwca.config import loads
from fedwca.experiment import METRICS_COLUMNS, consolidate_weights, run_grid

from conftest import small_model

BASE = """
[experiment]
config_version = 1
methods = {methods}
seeds = {seeds}
audit_pseudo_labels = true
[dataset]
n_per_domain = 300
[pretrain]
epochs = 5
[hyperparameters]
rounds = {rounds}
local_epochs = 1
"""


def write_config(tmp_path, methods="source_only", seeds="0", rounds=2):
    path = tmp_path / "exp.ini"
    path.write_text(BASE.format(methods=methods, seeds=seeds, rounds=rounds))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_metrics_header_is_stable(tmp_path):
    code = main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "out")])
    assert code == 0
    header = (tmp_path / "out" / "metrics.csv").read_text().splitlines()[0]
    assert header == ("method,seed,round,client_id,domain_id,cluster_id,split,accuracy,"
                      "loss_im,loss_ce,uplink_bytes,downlink_bytes")
    assert tuple(header.split(",")) == METRICS_COLUMNS


def test_source_only_writes_round_zero_rows(tmp_path):
    main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "out")])
    rows = read_csv(tmp_path / "out" / "runs" / "source_only_seed0" / "metrics.csv")
    assert {r["round"] for r in rows} == {"0"}
    assert len(rows) == 9 * 2


def test_two_method_summary(tmp_path, capsys):
    main(["run", str(write_config(tmp_path, "fedavg, fedwca")), "--out", str(tmp_path / "out")])
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert set(summary["methods"]) == {"fedavg", "fedwca"}
    assert summary["failures"] == []
    assert "fedwca" in capsys.readouterr().out


def test_env_overrides_out_and_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDWCA_OUT", str(tmp_path / "envout"))
    monkeypatch.setenv("FEDWCA_SEED", "4")
    assert main(["run", str(write_config(tmp_path))]) == 0
    assert (tmp_path / "envout" / "runs" / "source_only_seed4" / "metrics.csv").exists()


def test_dump_weights_row_count_and_values(tmp_path):
    out = tmp_path / "out"
    main(["run", str(write_config(tmp_path, "fedwca", rounds=3)), "--out", str(out)])
    assert main(["dump-weights", str(out)]) == 0
    rows = read_csv(out / "weights_all.csv")
    clusters = {r["cluster_id"] for r in read_csv(out / "runs" / "fedwca_seed0" / "assignment.csv")}
    # weights exist in rounds 1 and 2 of a 3-round run
    assert len(rows) == 9 * 2 * len(clusters)
    long = read_csv(out / "runs" / "fedwca_seed0" / "weights.csv")
    v = {(r["round"], r["client_id"], r["index"]): r["value"] for r in long if r["weight"] == "v"}
    for r in rows:
        assert r["v"] == v[(r["round"], r["client_id"], r["c"])]
    for (rnd, client), group in _group(rows).items():
        assert sum(float(r["v"]) for r in group) == pytest.approx(1.0, abs=1e-12)


def _group(rows):
    out = {}
    for r in rows:
        out.setdefault((r["round"], r["client_id"]), []).append(r)
    return out


def test_dump_weights_errors(tmp_path, capsys):
    assert main(["dump-weights", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    (tmp_path / "runs").mkdir()
    with pytest.raises(FileNotFoundError):
        consolidate_weights(tmp_path)


def test_inspect_checkpoint(tmp_path, capsys):
    m = small_model()
    save_checkpoint(tmp_path / "m.fwca", m)
    assert main(["inspect-checkpoint", str(tmp_path / "m.fwca")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split("\t")[0] for l in lines] == list(m.tensors())
    assert lines[0].split("\t")[2] == manifest(tmp_path / "m.fwca")[0].sha256
    (tmp_path / "bad.fwca").write_bytes((tmp_path / "m.fwca").read_bytes()[:-3])
    assert main(["inspect-checkpoint", str(tmp_path / "bad.fwca")]) == 2


def test_bad_config_exits_nonzero(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nconfig_version = 1\nmethods = fedwca\nseeds = 0\n[hyperparameters]\nlam = x\n")
    assert main(["run", str(path)]) == 2
    assert "line 6" in capsys.readouterr().err


def test_failed_run_is_recorded_and_others_kept(tmp_path, monkeypatch):
    import fedwca.experiment as experiment

    cfg = loads(BASE.format(methods="fedavg, fedwca", seeds="0", rounds=1))
    real = experiment.run_single

    def flaky(cfg_, method, seed, *a, **kw):
        if method == "fedwca":
            raise experiment.ConfigurationError("boom")
        return real(cfg_, method, seed, *a, **kw)

    monkeypatch.setattr(experiment, "run_single", flaky)
    outcome = run_grid(cfg, tmp_path / "out")
    assert not outcome.ok
    assert outcome.summary["failures"][0]["method"] == "fedwca"
    assert (tmp_path / "out" / "runs" / "fedavg_seed0" / "metrics.csv").exists()


def test_parallel_jobs_match_serial(tmp_path):
    cfg = loads(BASE.format(methods="fedavg, fedwca", seeds="0, 1", rounds=2))
    run_grid(cfg, tmp_path / "a", jobs=1)
    run_grid(cfg, tmp_path / "b", jobs=2)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_audit_csv_written(tmp_path):
    main(["run", str(write_config(tmp_path, "fedwca")), "--out", str(tmp_path / "out")])
    rows = read_csv(tmp_path / "out" / "runs" / "fedwca_seed0" / "pseudo_labels.csv")
    assert {r["round"] for r in rows} == {"0", "1"}
    r1 = [r for r in rows if r["round"] == "1"]
    assert all((r["matched"] == "1") == (r["label_init"] == r["label_cluster"]) for r in r1)


def test_default_config_command(tmp_path):
    assert main(["default-config", "-o", str(tmp_path / "d.ini")]) == 0
    assert loads((tmp_path / "d.ini").read_text()).dataset.n_per_domain == 1500


def test_untrained_model_is_near_chance():
    from fedwca.data import DomainSpec, gen_multidomain
    from fedwca.model import init_model
    from fedwca.optim import accuracy

    (pool,) = gen_multidomain(5, [DomainSpec(0)], 2000, seed=0)
    accs = [accuracy(init_model(16, (32,), 16, 5, np.random.default_rng(s)).freeze_classifier(), pool.batch())
            for s in range(5)]
    assert abs(np.mean(accs) - 0.2) <= 0.1


def test_idx_dataset_end_to_end(tmp_path):
    from fedwca.data import encode_idx

    rng = np.random.default_rng(0)
    paths = []
    for d in range(2):
        labels = np.arange(60) % 3
        images = np.clip(labels[:, None, None] * 80 + rng.integers(0, 40, size=(60, 3, 3)) + 20 * d, 0, 255)
        img, lab = tmp_path / f"d{d}-images.idx", tmp_path / f"d{d}-labels.idx.gz"
        img.write_bytes(encode_idx(images))
        import gzip
        with gzip.open(lab, "wb") as fh:
            fh.write(encode_idx(labels))
        paths.append((img, lab))
    cfg = tmp_path / "idx.ini"
    cfg.write_text(f"""
[experiment]
config_version = 1
methods = fedwca
seeds = 0
[dataset]
kind = idx
clients_per_domain = 2
source_images = {paths[0][0]}
source_labels = {paths[0][1]}
target_images = {paths[1][0]}
target_labels = {paths[1][1]}
[model]
hidden = 8
bottleneck = 4
[hyperparameters]
rounds = 2
""")
    assert main(["run", str(cfg), "--out", str(tmp_path / "out")]) == 0
    rows = read_csv(tmp_path / "out" / "runs" / "fedwca_seed0" / "metrics.csv")
    assert {r["client_id"] for r in rows} == {"0", "1"}
