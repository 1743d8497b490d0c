"""Batch evaluation and the per-group gamma grid search.

Every (sample, config, canonized) job is independent.  Its seed is
``base_seed ^ sample_index`` and each metric draws from
``default_rng([sample_seed, metric_index])``, so results do not depend on the
number of worker threads.  Rows are sorted before they are written.

CSV columns: ``sample_id, config, canonized, metric, score, status, seed, fingerprint``.
``status`` is ``ok`` or ``error: <message>`` (score empty); ``fingerprint`` is a
short hash of the JSON config recorded in the JSON mirror.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import metrics as M
from .attribution import (
    BUILTIN_COMPOSITES, Composite, attribute, gamma_composite, gradient_saliency, normalize_heatmap,
    pool_channels,
)
from .canonize import canonize_graph
from .dataio import Sample
from .errors import DatasetError, XaiCanonError
from .graph import ModelGraph, forward

METRICS = ("aopc", "rra", "rma", "gini", "avg_sensitivity", "max_sensitivity", "random_logit", "faithfulness")
CSV_COLUMNS = ("sample_id", "config", "canonized", "metric", "score", "status", "seed", "fingerprint")
SALIENCY = "saliency"


@dataclass(frozen=True)
class MetricSettings:
    pooling: str = "sum"
    normalize: bool = True
    rma_raw: bool = False
    aopc: M.RegionPerturbConfig = field(default_factory=M.RegionPerturbConfig)
    sensitivity: M.SensitivityConfig = field(default_factory=M.SensitivityConfig)
    faithfulness: M.FaithCorrConfig = field(default_factory=M.FaithCorrConfig)

    def fingerprint(self) -> dict:
        d = asdict(self)
        d["ssim"] = {"window": M.SSIM_WINDOW, "k1": M.SSIM_K1, "k2": M.SSIM_K2, "data_range": "joint range",
                     "random_logit_distance": "ssim"}
        return d


@dataclass(frozen=True)
class GridSpec:
    groups: tuple[str, ...]
    gammas: tuple[float, ...]
    canonized: str = "both"  # "yes", "no" or "both"

    def __post_init__(self):
        if not self.groups:
            raise ValueError("grid needs at least one group")
        if not self.gammas or any(g < 0 for g in self.gammas):
            raise ValueError("grid needs a nonempty list of gamma values >= 0")
        if self.canonized not in ("yes", "no", "both"):
            raise ValueError("canonized must be yes, no or both")

    @property
    def variants(self) -> tuple[bool, ...]:
        return {"yes": (True,), "no": (False,), "both": (False, True)}[self.canonized]


def enumerate_grid(spec: GridSpec) -> list[tuple[dict[str, float], bool]]:
    """Every (group -> gamma assignment, canonized flag) pair, in a fixed order."""
    return [(dict(zip(spec.groups, combo)), canon)
            for canon in spec.variants
            for combo in itertools.product(spec.gammas, repeat=len(spec.groups))]


def gamma_config_id(assignment: dict[str, float]) -> str:
    return "gamma[" + ",".join(f"{g}={v:g}" for g, v in assignment.items()) + "]"


@dataclass(frozen=True)
class Row:
    sample_id: str
    config: str
    canonized: bool
    metric: str
    score: Optional[float]
    status: str
    seed: int
    fingerprint: str

    def key(self):
        return (self.sample_id, self.config, self.canonized, self.metric)


@dataclass
class MetricReport:
    rows: list[Row]
    metadata: dict

    def sorted_rows(self) -> list[Row]:
        return sorted(self.rows, key=Row.key)

    def scores(self) -> list[Row]:
        return [r for r in self.rows if r.status == "ok"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(CSV_COLUMNS)
        for r in self.sorted_rows():
            w.writerow([r.sample_id, r.config, str(r.canonized).lower(), r.metric,
                        "" if r.score is None else repr(float(r.score)), r.status, r.seed, r.fingerprint])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "metadata": self.metadata,
            "columns": list(CSV_COLUMNS),
            "rows": [asdict(r) for r in self.sorted_rows()],
            "means": [dict(zip(("config", "canonized", "metric", "mean", "count"), m)) for m in self.means()],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def means(self) -> list[tuple[str, bool, str, float, int]]:
        """Unweighted mean over samples per (config, canonized, metric)."""
        acc: dict[tuple, list[float]] = {}
        for r in self.scores():
            acc.setdefault((r.config, r.canonized, r.metric), []).append(r.score)
        return [(c, k, m, float(np.mean(v)), len(v)) for (c, k, m), v in sorted(acc.items())]

    def write(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        csv_path = prefix.with_name(prefix.name + ".csv")
        json_path = prefix.with_name(prefix.name + ".json")
        csv_path.write_bytes(self.to_csv().encode("utf-8"))
        json_path.write_bytes(self.to_json().encode("utf-8"))
        return csv_path, json_path


def _fingerprint(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def resolve_composite(name: str) -> Composite | str:
    if name == SALIENCY:
        return SALIENCY
    if name not in BUILTIN_COMPOSITES:
        raise ValueError(f"unknown composite {name!r}; known: {sorted(BUILTIN_COMPOSITES) + [SALIENCY]}")
    return BUILTIN_COMPOSITES[name]()


# ---- one job -----------------------------------------------------------------------------------

def _explainer(graph: ModelGraph, explainer: Composite | str, settings: MetricSettings, canonized: bool):
    def explain(x: np.ndarray, target: int) -> np.ndarray:
        if explainer == SALIENCY:
            hm = gradient_saliency(graph, x, target, canonized)
        else:
            hm = attribute(graph, x, target, explainer, canonized)
        pooled = pool_channels(hm.values, settings.pooling)
        return normalize_heatmap(pooled) if settings.normalize else pooled
    return explain


def _evaluate_job(graph: ModelGraph, sample: Sample, explainer: Composite | str, config_id: str,
                  canonized: bool, metrics: Sequence[str], settings: MetricSettings, seed: int,
                  fingerprint: str) -> list[Row]:
    def row(metric, score=None, status="ok"):
        return Row(sample.id, config_id, canonized, metric, score, status, seed, fingerprint)

    try:
        out = forward(graph, sample.image)[0]
        if not 0 <= sample.label < out.shape[0]:
            raise DatasetError(f"label {sample.label} outside output extent {out.shape[0]}", sample.id)
        explain = _explainer(graph, explainer, settings, canonized)
        heatmap = explain(sample.image, sample.label)
    except (XaiCanonError, ValueError) as exc:
        return [row(m, status=f"error: {exc}") for m in metrics]

    def logit(x):
        return float(forward(graph, x)[0][sample.label])

    rows = []
    for metric in metrics:
        rng = np.random.default_rng([seed, METRICS.index(metric)])
        try:
            if metric == "aopc":
                score = M.aopc_region_perturbation(logit, sample.image, heatmap, settings.aopc)
            elif metric in ("rra", "rma"):
                if sample.mask is None:
                    raise DatasetError(f"sample {sample.id!r} has no mask", sample.id)
                score = (M.rra(heatmap, sample.mask) if metric == "rra"
                         else M.rma(heatmap, sample.mask, settings.rma_raw))
            elif metric == "gini":
                score = M.sparseness_gini(heatmap)
            elif metric in ("avg_sensitivity", "max_sensitivity"):
                draws = M.sensitivity_draws(lambda x: explain(x, sample.label), sample.image,
                                            settings.sensitivity, rng)
                score = float(draws.mean() if metric == "avg_sensitivity" else draws.max())
            elif metric == "random_logit":
                score = M.random_logit(explain, sample.image, heatmap, sample.label, out.shape[0], rng)
            elif metric == "faithfulness":
                score, flat = M.faithfulness_correlation_detail(logit, sample.image, heatmap,
                                                                settings.faithfulness, rng)
                if flat:
                    rows.append(row(metric, score, "ok: zero variance"))
                    continue
            else:
                raise ValueError(f"unknown metric {metric!r}")
        except (XaiCanonError, ValueError) as exc:
            rows.append(row(metric, status=f"error: {exc}"))
            continue
        rows.append(row(metric, float(score)))
    return rows


def _check_metrics(metrics: Sequence[str]) -> None:
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ValueError(f"unknown metric(s) {bad}; known: {list(METRICS)}")


def _run_jobs(jobs: list[tuple], threads: int) -> list[Row]:
    if threads <= 1:
        results = [_evaluate_job(*j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda j: _evaluate_job(*j), jobs))
    return [r for rows in results for r in rows]


def sample_seed(base_seed: int, index: int) -> int:
    return int(base_seed) ^ int(index)


def run_evaluation(graph: ModelGraph, dataset: Sequence[Sample], composites: Sequence[str],
                   metrics: Sequence[str], seed: int = 0, canonized: str = "both",
                   settings: MetricSettings = MetricSettings(), threads: int = 1) -> MetricReport:
    """Attribute, pool, normalize and score every sample under every named explainer."""
    _check_metrics(metrics)
    variants = GridSpec(("_",), (0.0,), canonized).variants
    explainers = {name: resolve_composite(name) for name in composites}
    graphs = {False: graph}
    if True in variants:
        graphs[True] = canonize_graph(graph)[0]
    base = settings.fingerprint()
    jobs = []
    for idx, sample in enumerate(dataset):
        s = sample_seed(seed, idx)
        for name, ex in explainers.items():
            fp = _fingerprint({"explainer": name, "metrics": base})
            for canon in variants:
                jobs.append((graphs[canon], sample, ex, name, canon, tuple(metrics), settings, s, fp))
    meta = {"kind": "evaluation", "seed": seed, "composites": list(composites), "metrics": list(metrics),
            "canonized": canonized, "settings": base, "samples": [s.id for s in dataset]}
    return MetricReport(_run_jobs(jobs, threads), meta)


def run_grid_search(graph: ModelGraph, dataset: Sequence[Sample], spec: GridSpec, metrics: Sequence[str],
                    seed: int = 0, settings: MetricSettings = MetricSettings(), threads: int = 1) -> MetricReport:
    """Evaluate a Gamma composite for every per-group gamma assignment (unlisted groups get 0)."""
    _check_metrics(metrics)
    known = graph.groups()
    missing = [g for g in spec.groups if g not in known]
    if missing:
        raise ValueError(f"unknown group tag(s) {missing}; graph has {sorted(known)}")
    graphs = {False: graph}
    if True in spec.variants:
        graphs[True] = canonize_graph(graph)[0]
    base = settings.fingerprint()
    jobs = []
    for assignment, canon in enumerate_grid(spec):
        cid = gamma_config_id(assignment)
        comp = gamma_composite(assignment, name=cid)
        fp = _fingerprint({"gammas": assignment, "metrics": base})
        for idx, sample in enumerate(dataset):
            jobs.append((graphs[canon], sample, comp, cid, canon, tuple(metrics), settings,
                         sample_seed(seed, idx), fp))
    meta = {"kind": "grid-search", "seed": seed, "groups": list(spec.groups), "gammas": list(spec.gammas),
            "canonized": spec.canonized, "metrics": list(metrics), "settings": base,
            "configurations": len(enumerate_grid(spec)), "samples": [s.id for s in dataset]}
    report = MetricReport(_run_jobs(jobs, threads), meta)
    report.metadata["marginals"] = [
        dict(zip(("canonized", "group", "gamma", "metric", "mean", "count"), m))
        for m in marginal_means(report, spec)
    ]
    return report


def _parse_config(cid: str) -> dict[str, float]:
    body = cid[len("gamma["):-1]
    return {k: float(v) for k, v in (p.split("=") for p in body.split(",") if p)}


def marginal_means(report: MetricReport, spec: GridSpec) -> list[tuple[bool, str, float, str, float, int]]:
    """Mean score over all rows whose config gives ``group`` the value ``gamma``.

    One entry per (canonized, group, gamma, metric), averaging over samples and
    over every gamma choice for the other groups.
    """
    acc: dict[tuple, list[float]] = {}
    for r in report.scores():
        assignment = _parse_config(r.config)
        for g in spec.groups:
            acc.setdefault((r.canonized, g, assignment[g], r.metric), []).append(r.score)
    order = {g: i for i, g in enumerate(spec.groups)}
    keys = sorted(acc, key=lambda k: (k[0], order[k[1]], k[2], k[3]))
    return [(c, g, v, m, float(np.mean(acc[(c, g, v, m)])), len(acc[(c, g, v, m)])) for c, g, v, m in keys]


def write_marginals(report: MetricReport, spec: GridSpec, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(("canonized", "group", "gamma", "metric", "mean", "count"))
    for c, g, v, m, mean, n in marginal_means(report, spec):
        w.writerow((str(c).lower(), g, f"{v:g}", m, repr(mean), n))
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def iter_rows(report: MetricReport, metric: str | None = None) -> Iterable[Row]:
    return (r for r in report.sorted_rows() if metric is None or r.metric == metric)
