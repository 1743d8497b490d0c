import csv
import io
import json

import numpy as np
import pytest

from xaicanon import fixtures
from xaicanon.dataio import Sample
from xaicanon.harness import (
    CSV_COLUMNS, METRICS, GridSpec, MetricReport, Row, enumerate_grid, gamma_config_id, marginal_means,
    run_evaluation, run_grid_search, sample_seed, write_marginals,
)

GAMMAS = (0.0, 0.1, 0.25, 0.5, 1.0, 10.0)


@pytest.fixture(scope="module")
def corner():
    return fixtures.build("corner_detector")


@pytest.fixture(scope="module")
def grid_report(corner):
    g, data = corner
    return run_grid_search(g, data, GridSpec(("features", "classifier"), GAMMAS), ["rra", "rma", "gini"], seed=7)


def test_enumeration_counts():
    assert len(enumerate_grid(GridSpec(("a", "b", "c", "d"), GAMMAS))) == 2592
    assert len(enumerate_grid(GridSpec(("a", "b"), GAMMAS, "yes"))) == 36
    assert gamma_config_id({"a": 0.25, "b": 10.0}) == "gamma[a=0.25,b=10]"


def test_grid_rows_per_sample(grid_report, corner):
    _, data = corner
    for s in data:
        for m in ("rra", "rma", "gini"):
            assert sum(1 for r in grid_report.rows if r.sample_id == s.id and r.metric == m) == 72
    assert all(r.status == "ok" for r in grid_report.rows)


def test_marginals_match_direct_recomputation(grid_report):
    spec = GridSpec(("features", "classifier"), GAMMAS)
    marg = marginal_means(grid_report, spec)
    assert len(marg) == 2 * 2 * 6 * 3
    for canon, group, gamma, metric, mean, count in marg:
        direct = [r.score for r in grid_report.rows if r.canonized == canon and r.metric == metric
                  and f"{group}={gamma:g}" in r.config[len("gamma["):-1].split(",")]
        assert count == len(direct) == 20 * 6
        assert abs(mean - float(np.mean(direct))) <= 1e-9


def test_grid_localization_is_informative(grid_report):
    # the quadrant detector points at the square for every gamma setting
    rra = [r.score for r in grid_report.rows if r.metric == "rra"]
    assert np.mean(rra) > 0.5


def test_unknown_group(corner):
    g, data = corner
    with pytest.raises(ValueError, match="nope"):
        run_grid_search(g, data[:1], GridSpec(("nope",), (0.0,)), ["gini"])


def test_evaluation_rows_and_csv(corner):
    g, data = corner
    rep = run_evaluation(g, data[:4], ["eps-plus", "saliency"], ["rra", "gini", "faithfulness"], seed=1)
    assert len(rep.rows) == 4 * 2 * 2 * 3
    text = rep.to_csv()
    assert text.startswith(",".join(CSV_COLUMNS) + "\r\n")
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert len(parsed) == len(rep.rows)
    assert [tuple(r.values())[:4] for r in parsed] == sorted(tuple(r.values())[:4] for r in parsed)
    assert {r["canonized"] for r in parsed} == {"true", "false"}
    doc = json.loads(rep.to_json())
    assert doc["metadata"]["metrics"] == ["rra", "gini", "faithfulness"]


def test_saliency_invariant_rows(corner):
    g, data = corner
    rep = run_evaluation(g, data[:4], ["saliency"], ["gini"], seed=0)
    by = {}
    for r in rep.rows:
        by.setdefault(r.sample_id, {})[r.canonized] = r.score
    for v in by.values():
        assert v[True] == pytest.approx(v[False], abs=1e-5)


@pytest.mark.parametrize("threads", [2, 4])
def test_determinism_across_threads(corner, threads):
    g, data = corner
    metrics = list(METRICS)
    a = run_evaluation(g, data[:6], ["eps-plus"], metrics, seed=11, threads=1)
    b = run_evaluation(g, data[:6], ["eps-plus"], metrics, seed=11, threads=threads)
    assert a.to_csv().encode() == b.to_csv().encode()
    c = run_evaluation(g, data[:6], ["eps-plus"], metrics, seed=12, threads=1)
    assert a.to_csv() != c.to_csv()


def test_error_rows_do_not_abort(corner):
    g, data = corner
    bad = [Sample("nomask", data[0].image, 0), Sample("badlabel", data[0].image, 9, data[0].mask)]
    rep = run_evaluation(g, bad + data[:1], ["eps-plus"], ["rra", "gini"], canonized="no")
    status = {(r.sample_id, r.metric): r.status for r in rep.rows}
    assert status[("nomask", "rra")].startswith("error") and status[("nomask", "gini")] == "ok"
    assert status[("badlabel", "gini")].startswith("error")
    assert status[(data[0].id, "rra")] == "ok"


def test_unknown_metric_or_composite(corner):
    g, data = corner
    with pytest.raises(ValueError):
        run_evaluation(g, data[:1], ["eps-plus"], ["accuracy"])
    with pytest.raises(ValueError):
        run_evaluation(g, data[:1], ["zennit"], ["gini"])


def test_means_are_unweighted():
    rows = [Row(s, "c", False, "gini", v, "ok", 0, "f") for s, v in (("a", 1.0), ("b", 2.0), ("c", 6.0))]
    rows.append(Row("d", "c", False, "gini", None, "error: x", 0, "f"))
    assert MetricReport(rows, {}).means() == [("c", False, "gini", 3.0, 3)]


def test_sample_seed():
    assert sample_seed(5, 0) == 5 and sample_seed(5, 3) == 6


def test_write_outputs(tmp_path, grid_report):
    csv_path, json_path = grid_report.write(tmp_path / "run")
    assert csv_path.read_bytes() == grid_report.to_csv().encode()
    write_marginals(grid_report, GridSpec(("features", "classifier"), GAMMAS), tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"canonized,group,gamma,metric,mean,count" and len(lines) == 2 + 72
