"""Divergence-vector guided merging of independently trained site models.

Pipeline: geometric median of the site models, per-site divergence from the
median, per-parameter retention of confident local values, and a final
average weighted by ``exp(-lambda * ||divergence||)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .params import ParamMap, check_aligned, l2_norm, weighted_sum

EPS = 1e-12


@dataclass
class MergeConfig:
    lam: float = 0.005
    gamma: float = 0.1
    weiszfeld_tol: float = 1e-9
    weiszfeld_max_iters: int = 100
    site_weights: list[float] | None = None
    retention_then_weight: bool = True
    normalize_divergence_by_sqrt_d: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lambda must be finite and >= 0")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be finite and >= 0")
        if self.weiszfeld_tol <= 0:
            raise ValueError("weiszfeld_tol must be > 0")
        if self.site_weights is not None and min(self.site_weights) <= 0:
            raise ValueError("site weights must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MergeConfig:
        return cls(**d)


@dataclass
class MedianResult:
    median: ParamMap
    iterations: int
    objective: float
    converged: bool
    history: list[float] = field(default_factory=list)


def optimal_vertex(points: np.ndarray, w: np.ndarray) -> int | None:
    """Index of an input point that is the geometric median, if any.

    Point ``i`` is optimal iff the weighted unit vectors toward all other
    points sum to a vector no longer than the weight sitting at ``i``. The
    test is strict, so ties (e.g. two points) fall through to the iteration.
    """
    for i in range(len(points)):
        diff = points - points[i]
        dist = np.linalg.norm(diff, axis=1)
        at = dist <= EPS
        pull = (w[~at] / dist[~at]) @ diff[~at]
        if np.linalg.norm(pull) < w[at].sum() * (1.0 - 1e-9):
            return i
    return None


def weiszfeld(points: np.ndarray, weights: np.ndarray | None = None, tol: float = 1e-9,
              max_iters: int = 100) -> tuple[np.ndarray, int, bool, list[float]]:
    """Weighted geometric median of the rows of ``points``.

    Starts from the weighted mean; distances in the update are floored at
    ``EPS``. Stops once the relative objective improvement drops below
    ``tol``. Returns ``(median, iterations, converged, objective history)``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float) / np.sum(weights)

    def objective(z):
        return float(w @ np.linalg.norm(points - z, axis=1))

    z = w @ points
    history = [objective(z)]
    vertex = optimal_vertex(points, w)
    if vertex is not None:
        history.append(objective(points[vertex]))
        return points[vertex].copy(), 0, True, history
    converged = n == 1
    it = 0
    while not converged and it < max_iters:
        dist = np.maximum(np.linalg.norm(points - z, axis=1), EPS)
        beta = w / dist
        z_new = beta @ points / beta.sum()
        f_new = objective(z_new)
        it += 1
        if f_new > history[-1]:
            # only reachable through the EPS floor; keep the better iterate
            converged = True
            break
        improvement = history[-1] - f_new
        z = z_new
        history.append(f_new)
        if improvement <= tol * max(abs(f_new), EPS):
            converged = True

    # when the optimum sits on an input point Weiszfeld only creeps toward it
    obj_pts = [objective(p) for p in points]
    best = int(np.argmin(obj_pts))
    if obj_pts[best] < history[-1] * (1.0 - 1e-12):
        z = points[best].copy()
        history.append(obj_pts[best])
    return z, it, converged, history


def geometric_median(models: Sequence[ParamMap], weights: Sequence[float] | None = None,
                     tol: float = 1e-9, max_iters: int = 100) -> MedianResult:
    """Point minimizing the weighted sum of Euclidean distances to ``models``."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    for m in models[1:]:
        check_aligned(models[0], m)
    if len(models) == 1:
        only = models[0]
        return MedianResult(only, iterations=0, objective=0.0, converged=True, history=[0.0])
    points = np.stack([m.flatten() for m in models])
    z, it, converged, history = weiszfeld(points, weights, tol, max_iters)
    if not converged:
        warnings.warn(f"geometric median did not converge in {max_iters} iterations",
                      RuntimeWarning, stacklevel=2)
    return MedianResult(models[0].unflatten(z), iterations=it, objective=history[-1],
                        converged=converged, history=history)


def divergence_vector(model: ParamMap, median: ParamMap) -> ParamMap:
    """Site model minus geometric median."""
    check_aligned(model, median)
    return ParamMap({
        k: model[k].astype(np.float64) - median[k].astype(np.float64) for k in model
    })


def dynamic_weights(divergences: Sequence[ParamMap] | Sequence[float], lam: float,
                    normalize_by_sqrt_d: bool = False) -> np.ndarray:
    """Normalized ``exp(-lam * ||Delta_i||)`` weights.

    Accepts divergence maps or precomputed norms. The smallest exponent is
    subtracted before exponentiating; normalization cancels the shift.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    norms = []
    for d in divergences:
        if isinstance(d, ParamMap):
            v = l2_norm(d)
            if normalize_by_sqrt_d and d.size:
                v /= np.sqrt(d.size)
            norms.append(v)
        else:
            norms.append(float(d))
    x = lam * np.asarray(norms, dtype=np.float64)
    alpha = np.exp(-(x - x.min()))
    return alpha / alpha.sum()


def retention_mask(model: ParamMap, divergence: ParamMap, gamma: float) -> dict[str, np.ndarray]:
    """True where ``|theta| >= gamma * |Delta|`` (the local value is kept)."""
    check_aligned(model, divergence)
    return {
        k: np.abs(model[k].astype(np.float64)) >= gamma * np.abs(divergence[k].astype(np.float64))
        for k in model
    }


def selective_retention(model: ParamMap, median: ParamMap, divergence: ParamMap,
                        gamma: float) -> ParamMap:
    """Keep confident local parameters, fall back to the median elsewhere."""
    check_aligned(model, median)
    mask = retention_mask(model, divergence, gamma)
    return ParamMap({k: np.where(mask[k], model[k], median[k]) for k in model})


def model_soup(models: Sequence[ParamMap]) -> ParamMap:
    """Uniform parameter average."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    return weighted_sum([1.0 / len(models)] * len(models), models)


@dataclass
class SiteReport:
    divergence_norm: float
    alpha_raw: float
    alpha: float
    retained_fraction: float
    replaced_fraction: float


@dataclass
class DivergenceReport:
    sites: list[SiteReport]
    median_iterations: int
    median_objective: float
    median_converged: bool
    lam: float
    gamma: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def merge(models: Sequence[ParamMap], config: MergeConfig | None = None
          ) -> tuple[ParamMap, DivergenceReport]:
    """DivMerge: median, divergences, retention, divergence-weighted average."""
    cfg = config or MergeConfig()
    models = list(models)
    med = geometric_median(models, cfg.site_weights, cfg.weiszfeld_tol, cfg.weiszfeld_max_iters)
    divs = [divergence_vector(m, med.median) for m in models]
    norms = [l2_norm(d) for d in divs]
    scaled = [n / np.sqrt(models[0].size) if cfg.normalize_divergence_by_sqrt_d and models[0].size
              else n for n in norms]
    alpha = dynamic_weights(scaled, cfg.lam)

    sites = []
    if cfg.retention_then_weight:
        updated = [selective_retention(m, med.median, d, cfg.gamma) for m, d in zip(models, divs)]
        merged = weighted_sum(alpha, updated)
        masks = [retention_mask(m, d, cfg.gamma) for m, d in zip(models, divs)]
    else:
        # retention applied once, to the weighted average against its own
        # divergence from the median
        avg = weighted_sum(alpha, models)
        avg_div = divergence_vector(avg, med.median)
        merged = selective_retention(avg, med.median, avg_div, cfg.gamma)
        masks = [retention_mask(avg, avg_div, cfg.gamma)] * len(models)

    total = models[0].size
    for n, a_raw, a, mk in zip(norms, np.exp(-cfg.lam * np.asarray(scaled)), alpha, masks):
        kept = sum(int(v.sum()) for v in mk.values())
        frac = kept / total if total else 1.0
        sites.append(SiteReport(float(n), float(a_raw), float(a), frac, 1.0 - frac))
    report = DivergenceReport(sites, med.iterations, float(med.objective), med.converged,
                              cfg.lam, cfg.gamma)
    return merged, report
