import csv
import json
import math

import numpy as np
import pytest

from kdssl.cli import main
from kdssl.data import load_dataset
from kdssl.errors import ConfigurationError
from kdssl.experiment import aggregate, load_config, mean_se, parse_config, report

TINY = {
    "version": 1,
    "name": "tiny",
    "dataset": {"synthetic": {"counts": [40, 20, 20, 20], "dim": 4, "separation": 3.0, "noise": 1.0}},
    "split": {"train": 0.7, "val": 0.1, "test": 0.2, "p": 0.3, "seeds": [1]},
    "mode": "proposed-ssl",
    "train": {"K": 2, "lam": 10.0, "T": 2.0, "tau": 0.6, "n_iter": 2, "epochs": 2, "hidden": [8],
              "lr": 0.01, "batch_size": 16},
    "compare_single": True,
}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=1))
    return str(path)


def with_(doc, **changes):
    out = json.loads(json.dumps(doc))
    for dotted, value in changes.items():
        node = out
        *parents, leaf = dotted.split("__")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return out


@pytest.mark.parametrize("change,field", [
    (dict(train__tau=1.5), "tau"),
    (dict(train__K=0), "K"),
    (dict(train__bogus=1), "bogus"),
    (dict(split__p=0), "split.p"),
    (dict(mode="nope"), "config.mode"),
    (dict(version=7), "config.version"),
])
def test_bad_config_names_field_and_exits_2(tmp_path, capsys, change, field):
    with pytest.raises(ConfigurationError, match=field.replace(".", r"\.")):
        parse_config(with_(TINY, **change))
    assert main(["run", write(tmp_path, with_(TINY, **change))]) == 2


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "name": "x",\n}\n')
    with pytest.raises(ConfigurationError, match=r"bad\.json:3"):
        load_config(path)
    assert main(["run", str(path)]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_run_writes_byte_identical_results(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["run", cfg, "--out", str(tmp_path / "a"), "--log-level", "ERROR"]) == 0
    assert main(["run", cfg, "--out", str(tmp_path / "b"), "--log-level", "ERROR"]) == 0
    runs = sorted(p.name for p in (tmp_path / "a" / "runs").glob("*.json"))
    assert runs == ["proposed-ssl_p0.3_K2_lam10_T2_tau0.6_seed1.json",
                    "proposed-ssl_p0.3_K2_lam10_T2_tau0.6_seed1.timing.json"]
    a = (tmp_path / "a" / "runs" / runs[0]).read_bytes()
    assert a == (tmp_path / "b" / "runs" / runs[0]).read_bytes()
    doc = json.loads(a)
    assert doc["status"] == "ok" and set(doc["metrics"]) == {"ensemble", "members", "member_mean", "single"}
    with open(tmp_path / "a" / "tables" / "summary.csv") as fh:
        methods = [r["method"] for r in csv.DictReader(fh)]
    assert methods == ["Proposed (K=1)", "Proposed (KD)", "Proposed (K=2)"]


def test_seed_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, with_(TINY, split__seeds=[1, 2, 3], compare_single=False))
    assert main(["run", cfg, "--seed", "7", "--out", str(tmp_path / "o"), "--log-level", "ERROR"]) == 0
    names = [p.name for p in (tmp_path / "o" / "runs").glob("*seed*.json") if "timing" not in p.name]
    assert names == ["proposed-ssl_p0.3_K2_lam10_T2_tau0.6_seed7.json"]


def test_mean_se_oracle():
    m, se = mean_se([0.70, 0.80, 0.90])
    assert abs(m - 0.8) < 1e-15
    assert abs(se - 0.1 / math.sqrt(3)) < 1e-15
    assert mean_se([0.5]) == (0.5, 0.0)


def _fake_run(tmp_path, mode, K, lam, seed, bacc):
    m = {"bacc": bacc, "acc": bacc, "acc_star": bacc, "macro_f1": bacc}
    metrics = {"ensemble": m, "members": [m] * K, "member_mean": m}
    if mode == "proposed-ssl":
        metrics["single"] = m
    doc = {"schema": "kdssl-run/1", "status": "ok", "mode": mode, "seed": seed,
           "point": {"p": 0.1, "K": K, "lam": lam, "T": 2.0, "tau": 0.95}, "metrics": metrics}
    runs = tmp_path / "runs"
    runs.mkdir(exist_ok=True)
    (runs / f"{mode}_K{K}_lam{lam}_s{seed}.json").write_text(json.dumps(doc))


def test_report_orders_lambda_sweep(tmp_path):
    for lam in (10, 0, 1):
        _fake_run(tmp_path, "proposed-ssl", 3, lam, 1, 0.5 + lam / 100)
    assert report(tmp_path) == 0
    with open(tmp_path / "tables" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["method"], r["lambda"]) for r in rows] == [
        ("Proposed (K=1)", "0"), ("Proposed (K=1)", "1"), ("Proposed (K=1)", "10"),
        ("Proposed (KD)", "0"), ("Proposed (KD)", "1"), ("Proposed (KD)", "10"),
        ("Proposed (K=3)", "0"), ("Proposed (K=3)", "1"), ("Proposed (K=3)", "10")]
    assert rows[-1]["BAcc"] == "60.00±0.00"
    with open(tmp_path / "tables" / "plot_lambda.csv") as fh:
        plot = list(csv.DictReader(fh))
    assert [p["x"] for p in plot if p["series"].startswith("Proposed (K=3)")] == ["0", "1", "10"]


def test_single_baseline_run_gives_one_row(tmp_path):
    _fake_run(tmp_path, "baseline-fsl", 1, 0, 1, 0.7)
    assert report(tmp_path) == 0
    with open(tmp_path / "tables" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["method"] == "Baseline" and rows[0]["n_seeds"] == "1"


def test_seeds_pool_into_mean_and_se(tmp_path):
    for seed, b in zip((1, 2, 3), (0.7, 0.8, 0.9)):
        _fake_run(tmp_path, "baseline-fsl", 1, 0, seed, b)
    from kdssl.experiment import collect_runs

    docs, _ = collect_runs(tmp_path)
    (row,) = aggregate(docs)
    assert row["n"] == 3 and abs(row["stats"]["bacc"][1] - 0.1 / math.sqrt(3)) < 1e-12


def test_malformed_file_gives_partial_exit(tmp_path):
    _fake_run(tmp_path, "baseline-fsl", 1, 0, 1, 0.7)
    (tmp_path / "runs" / "broken.json").write_text("{not json")
    assert report(tmp_path) == 4
    assert main(["report", str(tmp_path)]) == 4


def test_empty_report_directory_is_an_error(tmp_path):
    with pytest.raises(ConfigurationError):
        report(tmp_path)
    assert main(["report", str(tmp_path)]) == 2


def test_gen_data(tmp_path):
    spec = write(tmp_path, {"counts": [5, 3], "dim": 2, "seed": 4}, "spec.json")
    out = tmp_path / "d.csv"
    assert main(["gen-data", spec, str(out)]) == 0
    data = load_dataset(out)
    assert len(data) == 8 and np.bincount([e.label for e in data]).tolist() == [5, 3]
    assert main(["gen-data", write(tmp_path, {"dim": 2}, "bad.json"), str(out)]) == 2
