"""Heatmap quality metrics.

Every metric takes plain arrays and callables so it can be checked against a
brute-force oracle.  Heatmaps are 2-D (H x W, already channel-pooled); inputs
are C x H x W.  Randomness comes only from a ``numpy.random.Generator`` that
the caller seeds.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import DimensionError, EmptyMaskError, MetricError, ZeroMassError

ScoreFn = Callable[[np.ndarray], float]
ExplainFn = Callable[[np.ndarray], np.ndarray]


# ---- configs ----------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionPerturbConfig:
    patch_size: int = 8
    steps: int = 30
    baseline: str = "gaussian_blur"  # or "black", "mean"
    sigma: float = 5.0
    kernel: int = 15
    order: str = "most_relevant_first"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.baseline not in ("gaussian_blur", "black", "mean"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.order != "most_relevant_first":
            raise ValueError(f"unsupported order {self.order!r}")

    def fingerprint(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SensitivityConfig:
    radius: Optional[float] = None  # None: 0.1 * (input max - min)
    samples: int = 10

    def __post_init__(self):
        if self.radius is not None and self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")

    def fingerprint(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FaithCorrConfig:
    subset_fraction: float = 0.1
    iterations: int = 20
    baseline: float = 0.0

    def __post_init__(self):
        if not 0 < self.subset_fraction < 1:
            raise ValueError("subset_fraction must be in (0, 1)")
        if self.iterations < 2:
            raise ValueError("iterations must be >= 2")

    def fingerprint(self) -> dict:
        return asdict(self)


SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_map(h: np.ndarray, name: str = "heatmap") -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {h.shape}")
    return h


# ---- AoPC -----------------------------------------------------------------------------------

def perturbation_baseline(x: np.ndarray, cfg: RegionPerturbConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.baseline == "black":
        return np.zeros_like(x)
    if cfg.baseline == "mean":
        return np.broadcast_to(x.mean(axis=(1, 2), keepdims=True), x.shape).copy()
    radius = cfg.kernel // 2
    return np.stack([ndimage.gaussian_filter(c, cfg.sigma, mode="reflect", radius=radius) for c in x])


def patch_ranking(heatmap: np.ndarray, patch: int) -> list[tuple[int, int]]:
    """Patch origins sorted by summed relevance, descending; ties in row-major order."""
    h = _check_map(heatmap)
    rows, cols = -(-h.shape[0] // patch), -(-h.shape[1] // patch)
    origins, sums = [], []
    for i in range(rows):
        for j in range(cols):
            origins.append((i * patch, j * patch))
            sums.append(h[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch].sum())
    order = np.argsort(-np.asarray(sums), kind="stable")
    return [origins[k] for k in order]


def aopc_region_perturbation(score_fn: ScoreFn, x: np.ndarray, heatmap: np.ndarray,
                             cfg: RegionPerturbConfig = RegionPerturbConfig()) -> float:
    """Mean drop of ``score_fn`` over ``steps + 1`` cumulative patch perturbations."""
    x = np.asarray(x, dtype=np.float64)
    h = _check_map(heatmap)
    if x.ndim != 3 or x.shape[1:] != h.shape:
        raise DimensionError(f"heatmap {h.shape} does not match input {x.shape}")
    base = perturbation_baseline(x, cfg)
    ranking = patch_ranking(h, cfg.patch_size)
    p = cfg.patch_size
    f0 = float(score_fn(x.astype(np.float32)))
    xk = x.copy()
    total = 0.0
    for k in range(1, cfg.steps + 1):
        if k <= len(ranking):
            r, c = ranking[k - 1]
            xk[:, r:r + p, c:c + p] = base[:, r:r + p, c:c + p]
        total += f0 - float(score_fn(xk.astype(np.float32)))
    return total / (cfg.steps + 1)


# ---- localization -----------------------------------------------------------------------------

def _check_mask(mask: np.ndarray, shape) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise DimensionError(f"mask {m.shape} does not match heatmap {shape}")
    if not m.any():
        raise EmptyMaskError("ground-truth mask is empty")
    return m


def rra(heatmap: np.ndarray, mask: np.ndarray) -> float:
    """Share of the |mask| highest-valued pixels that fall inside the mask."""
    h = _check_map(heatmap)
    m = _check_mask(mask, h.shape).ravel()
    k = int(m.sum())
    top = np.argsort(-h.ravel(), kind="stable")[:k]
    return float(m[top].sum()) / k


def rma(heatmap: np.ndarray, mask: np.ndarray, raw: bool = False) -> float:
    """Fraction of positive relevance inside the mask (signed sums when ``raw``)."""
    h = _check_map(heatmap)
    m = _check_mask(mask, h.shape)
    if not raw:
        h = np.maximum(h, 0.0)
    total = math.fsum(h.ravel())
    if total == 0 or (not raw and total <= 0):
        raise ZeroMassError("heatmap has no positive relevance mass")
    return math.fsum(h[m]) / total


def sparseness_gini(heatmap: np.ndarray) -> float:
    a = np.sort(np.abs(np.asarray(heatmap, dtype=np.float64)).ravel())
    n = a.size
    s = a.sum()
    if s == 0:
        raise ZeroMassError("Gini index undefined for an all-zero heatmap")
    k = np.arange(1, n + 1)
    return float(1.0 - 2.0 * np.sum(a * (n - k + 0.5)) / (n * s))


# ---- robustness ------------------------------------------------------------------------------

def sensitivity_draws(explain_fn: ExplainFn, x: np.ndarray, cfg: SensitivityConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Relative Frobenius change of the explanation for each uniform L-inf perturbation."""
    x = np.asarray(x, dtype=np.float32)
    radius = cfg.radius if cfg.radius is not None else 0.1 * float(x.max() - x.min())
    ref = np.asarray(explain_fn(x), dtype=np.float64)
    norm = np.linalg.norm(ref)
    if norm == 0:
        raise ZeroMassError("sensitivity undefined for an all-zero explanation")
    out = np.empty(cfg.samples)
    for i in range(cfg.samples):
        delta = rng.uniform(-radius, radius, size=x.shape)
        xp = (x + delta).astype(np.float32) if radius > 0 else x
        out[i] = np.linalg.norm(np.asarray(explain_fn(xp), dtype=np.float64) - ref) / norm
    return out


def avg_sensitivity(explain_fn: ExplainFn, x, cfg: SensitivityConfig, rng) -> float:
    return float(sensitivity_draws(explain_fn, x, cfg, rng).mean())


def max_sensitivity(explain_fn: ExplainFn, x, cfg: SensitivityConfig, rng) -> float:
    return float(sensitivity_draws(explain_fn, x, cfg, rng).max())


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, data_range: float | None = None) -> float:
    """Mean structural similarity over all valid square windows (uniform weights).

    Sample covariance, K1=0.01, K2=0.03.  ``data_range`` defaults to the joint
    value range of both maps.  The window shrinks to the largest odd size that
    fits when a map is smaller than ``window``.
    """
    a = _check_map(a, "first map")
    b = _check_map(b, "second map")
    if a.shape != b.shape:
        raise DimensionError(f"SSIM needs equal shapes, got {a.shape} and {b.shape}")
    if np.array_equal(a, b):
        return 1.0
    win = min(window, *a.shape)
    win -= 1 - win % 2
    if data_range is None:
        data_range = float(max(a.max(), b.max()) - min(a.min(), b.min()))
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    n = win * win
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    va = (da * da).sum(axis=(-2, -1)) / (n - 1)
    vb = (db * db).sum(axis=(-2, -1)) / (n - 1)
    cov = (da * db).sum(axis=(-2, -1)) / (n - 1)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def random_logit(explain_fn: Callable[[np.ndarray, int], np.ndarray], x: np.ndarray, heatmap: np.ndarray,
                 true_class: int, n_classes: int, rng: np.random.Generator) -> float:
    """SSIM between ``heatmap`` and the explanation of a uniformly drawn other class."""
    if n_classes < 2:
        raise MetricError("random logit test needs at least two classes")
    other = int(rng.integers(n_classes - 1))
    if other >= true_class:
        other += 1
    return ssim(heatmap, explain_fn(x, other))


# ---- faithfulness -------------------------------------------------------------------------------

def pearson(u: np.ndarray, v: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; ``(0.0, True)`` when either series has zero variance."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    du, dv = u - u.mean(), v - v.mean()
    su, sv = np.sqrt((du * du).sum()), np.sqrt((dv * dv).sum())
    if su == 0 or sv == 0:
        return 0.0, True
    return float(np.clip((du * dv).sum() / (su * sv), -1.0, 1.0)), False


def faithfulness_correlation_detail(score_fn: ScoreFn, x: np.ndarray, heatmap: np.ndarray,
                                    cfg: FaithCorrConfig, rng: np.random.Generator) -> tuple[float, bool]:
    x = np.asarray(x, dtype=np.float32)
    h = _check_map(heatmap)
    if x.ndim != 3 or x.shape[1:] != h.shape:
        raise DimensionError(f"heatmap {h.shape} does not match input {x.shape}")
    hw = h.size
    count = int(np.floor(cfg.subset_fraction * hw))
    if count < 1 or count >= hw:
        raise MetricError(f"subset of {count} pixels out of {hw} is degenerate")
    f0 = float(score_fn(x))
    sums, drops = np.empty(cfg.iterations), np.empty(cfg.iterations)
    flat_h = h.ravel()
    for i in range(cfg.iterations):
        idx = rng.choice(hw, size=count, replace=False)
        xp = x.reshape(x.shape[0], -1).copy()
        xp[:, idx] = cfg.baseline
        sums[i] = flat_h[idx].sum()
        drops[i] = f0 - float(score_fn(xp.reshape(x.shape)))
    return pearson(sums, drops)


def faithfulness_correlation(score_fn: ScoreFn, x, heatmap, cfg: FaithCorrConfig, rng) -> float:
    return faithfulness_correlation_detail(score_fn, x, heatmap, cfg, rng)[0]
