import json

import pytest

from movesynth import experiments as ex
from movesynth.config import ExperimentConfig
from movesynth.metrics import MetricsRecord, aggregate, write_summary
from movesynth.report import TREND_CHECKS, build_report, metric_rows, to_csv, trend_rows


def _summary(tmp_path):
    recs = [MetricsRecord(f"e{i}", "p", k, 100.0 + i, 20.0, 0.5, None, 5.0 + i)
            for i, k in enumerate((3, 5, 5))]
    write_summary(tmp_path / "run" / "summary", {"modelA": aggregate(recs)})


def _results(**over):
    base = {"mse": 500.0, "psnr": 21.0, "ssim": 0.7, "twe": 25.0}
    r = {lab: dict(base) for lab, *_ in ex.EVALS}
    for k, v in over.items():
        lab, m = k.split("__")
        r[lab][m] = v
    return r


def test_metric_rows_from_summary(tmp_path):
    _summary(tmp_path)
    rows = metric_rows(tmp_path)
    assert [(r["model"], r["shot"], r["episodes"]) for r in rows] == [("modelA", 3, 1), ("modelA", 5, 2)]
    assert rows[1]["mse"] == 101.5 and rows[0]["source"] == "run"


def test_to_csv_union_of_columns():
    text = to_csv([{"a": 1}, {"a": 2, "b": None}])
    assert text.splitlines() == ["a,b", "1,", "2,"]
    assert to_csv([]) == ""


def test_seed_checks_directions():
    good = ex.seed_checks(_results(metadance__mse=400.0, metadance__twe=20.0, moves4__twe=24.0,
                                   metadance__psnr=22.0))
    assert all(good.values()) and set(good) == set(TREND_CHECKS)
    bad = ex.seed_checks(_results(metadance__mse=600.0, td_free__twe=10.0))
    assert not bad["adaptation_benefit"] and not bad["temporal_loss_benefit"]
    # ties satisfy the non-strict comparisons only
    tie = ex.seed_checks(_results())
    assert not tie["adaptation_benefit"] and tie["move_count_trend"] and tie["psnr_vs_reptile"]


def test_build_report_writes_tables_and_figures(tmp_path):
    _summary(tmp_path)
    seed = tmp_path / "trend" / "seed0"
    seed.mkdir(parents=True)
    r = _results(metadance__mse=1.0)
    (seed / "trend.json").write_text(json.dumps({"seed": 0, "results": r, "checks": ex.seed_checks(r)}))
    (seed / "meta_curve.csv").write_text("step,support_loss,query_loss,d_loss\n1,0.5,0.6,\n2,0.4,0.5,\n")
    out = tmp_path / "report"
    written = build_report(tmp_path, out)
    names = sorted(p.name for p in written["figures"])
    assert names == ["metrics.png", "trend_checks.png", "trend_seed0_meta_curve.png"]
    assert all(p.stat().st_size > 1000 for p in written["figures"])
    assert (out / "report_trend.csv").read_text().startswith("source,seed,adaptation_benefit")
    assert trend_rows(tmp_path)[0]["adaptation_benefit"] is True


TINY_BENCH = {"name": "bench", "data": {"n_train": 2, "n_test": 1, "clips_per_identity": 1},
              "model": {"base_channels": 4, "levels": 2},
              "pretrain": {"iterations": 2, "batch_size": 1},
              "meta": {"total_tasks": 1, "tasks_per_batch": 1, "second_order": False},
              "eval": {"shots": [5], "episodes_per_person": 1}}


def test_benchmark_seed_plumbing_and_resume(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY_BENCH)
    s = ex.run_seed(0, tmp_path, cfg)
    assert set(s["results"]) == {lab for lab, *_ in ex.EVALS}
    assert set(s["checks"]) == set(TREND_CHECKS)
    first = {p.name: p.read_bytes() for p in (tmp_path / "seed0").glob("eval_*.csv")}
    assert len(first) == len(ex.EVALS)
    again = ex.run_seed(0, tmp_path, cfg)  # every stage output exists: nothing is recomputed
    assert again["results"] == s["results"]
    assert ex.collect(tmp_path)[0]["seed"] == 0
