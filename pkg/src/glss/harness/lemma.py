"""Empirical check that the nearest source sample closes in on a target point.

For growing sample counts ``n`` we draw ``n`` i.i.d. source points, one query
from a shifted distribution, and record the nearest-neighbour distance. The
medians must fall strictly with ``n``. Separately, for a fixed query, the
fraction of trials whose nearest neighbour lands within ``delta`` must match
``1 - (1 - p_delta)^n`` where ``p_delta`` is the source mass of the
``delta``-ball, estimated by Monte Carlo.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from glss import kernels
from glss.errors import InvalidInputError
from glss.imgmath import SSIMParams, gaussian_window

DISTRIBUTIONS = ("uniform-square", "gaussian-2d", "synthetic-image-patches")
METRICS = ("euclidean", "ssim-distance")
DEFAULT_N = (10, 100, 1000, 10000)
PATCH = 11


@dataclass
class LemmaCheckReport:
    distribution: str
    metric: str
    n_list: list[int]
    median: list[float]
    p95: list[float]
    verdict: bool
    trials: int
    note: str = ""
    coverage: list[dict] = field(default_factory=list)

    @property
    def coverage_ok(self) -> bool:
        return all(row["within"] for row in self.coverage)

    def rows(self) -> list[dict]:
        return [
            {"distribution": self.distribution, "metric": self.metric, "n": n, "median": m, "p95": q}
            for n, m, q in zip(self.n_list, self.median, self.p95)
        ]


# --- distributions --------------------------------------------------------

def _patches(rng, n, shifted):
    """Anti-aliased disk-edge patches: a low-dimensional family in 121-d."""
    cy, cx = rng.uniform(-3.0, PATCH + 3.0, (2, n))
    r = rng.uniform(3.0, 9.0, n)
    if shifted:
        # low-contrast corner of the same support
        skin = rng.uniform(0.55, 0.65, n)
        bg = rng.uniform(0.40, 0.50, n)
    else:
        skin = rng.uniform(0.55, 0.85, n)
        bg = rng.uniform(0.15, 0.50, n)
    yy, xx = np.mgrid[0:PATCH, 0:PATCH] + 0.5
    d = np.hypot(yy[None] - cy[:, None, None], xx[None] - cx[:, None, None]) - r[:, None, None]
    cov = np.clip(0.5 - d, 0.0, 1.0)
    return (bg[:, None, None] * (1 - cov) + skin[:, None, None] * cov).reshape(n, -1)


def sample_source(name: str, rng: np.random.Generator, n: int) -> np.ndarray:
    if name == "uniform-square":
        return rng.random((n, 2))
    if name == "gaussian-2d":
        return rng.standard_normal((n, 2))
    if name == "synthetic-image-patches":
        return _patches(rng, n, shifted=False)
    raise InvalidInputError(f"unknown distribution {name!r}; expected one of {DISTRIBUTIONS}")


def sample_query(name: str, rng: np.random.Generator) -> np.ndarray:
    """One draw from the shifted (target) distribution."""
    if name == "uniform-square":
        return np.clip(rng.normal((0.6, 0.4), 0.15), 0.0, 1.0)
    if name == "gaussian-2d":
        return rng.normal((1.0, -0.5), 0.5)
    if name == "synthetic-image-patches":
        return _patches(rng, 1, shifted=True)[0]
    raise InvalidInputError(f"unknown distribution {name!r}; expected one of {DISTRIBUTIONS}")


# --- distances --------------------------------------------------------------

def _ssim_distance(points: np.ndarray, query: np.ndarray, p: SSIMParams = SSIMParams()) -> np.ndarray:
    """``1 - SSIM`` of each patch against the query; one window covers a patch."""
    w = gaussian_window(PATCH, p.window_sigma).ravel()
    mx = points @ w
    my = float(query @ w)
    vx = (points * points) @ w - mx * mx
    vy = float((query * query) @ w) - my * my
    cxy = points @ (w * query) - mx * my
    s = ((2 * mx * my + p.c1) * (2 * cxy + p.c2)) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2))
    return 1.0 - s


def distances(points: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        d = points - query
        return np.sqrt(np.einsum("ij,ij->i", d, d))
    if metric == "ssim-distance":
        if points.shape[1] != PATCH * PATCH:
            raise InvalidInputError("ssim-distance needs image patches")
        return _ssim_distance(points, query)
    raise InvalidInputError(f"unknown metric {metric!r}; expected one of {METRICS}")


def prefix_nn_distance(points: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    """Nearest-neighbour distance among the first ``k`` points, for every ``k``."""
    if metric == "euclidean":
        return np.sqrt(kernels.prefix_min_sqdist(points, query))
    return np.minimum.accumulate(distances(points, query, metric))


def _validate(distribution, metric, n_list, trials):
    if distribution not in DISTRIBUTIONS:
        raise InvalidInputError(f"unknown distribution {distribution!r}; expected one of {DISTRIBUTIONS}")
    if metric not in METRICS:
        raise InvalidInputError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if metric == "ssim-distance" and distribution != "synthetic-image-patches":
        raise InvalidInputError("ssim-distance is only defined for synthetic-image-patches")
    n_list = [int(n) for n in n_list]
    if not n_list or any(n < 1 for n in n_list) or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise InvalidInputError("n list must be non-empty and strictly increasing")
    if trials < 30:
        raise InvalidInputError("lemma_check needs at least 30 trials")
    return n_list


def default_metric(distribution: str) -> str:
    return "ssim-distance" if distribution == "synthetic-image-patches" else "euclidean"


def lemma_check(distribution: str, metric: str | None = None, n_list=DEFAULT_N, trials: int = 100,
                seed: int = 0, coverage: bool = True, mc_samples: int = 1_000_000) -> LemmaCheckReport:
    metric = metric or default_metric(distribution)
    n_list = _validate(distribution, metric, n_list, trials)
    n_max = n_list[-1]
    nn = np.empty((trials, len(n_list)))
    for t in range(trials):
        rng = np.random.default_rng([seed, 1, t])
        pts = sample_source(distribution, rng, n_max)
        q = sample_query(distribution, rng)
        pref = prefix_nn_distance(pts, q, metric)
        nn[t] = pref[np.asarray(n_list) - 1]
    med = np.median(nn, axis=0)
    p95 = np.percentile(nn, 95, axis=0)
    note = "insufficient points" if len(n_list) < 2 else ""
    verdict = bool(np.all(np.diff(med) < 0))
    report = LemmaCheckReport(distribution, metric, n_list, med.tolist(), p95.tolist(), verdict, trials, note)
    if coverage:
        report.coverage = coverage_check(distribution, metric, n_list, trials, seed, mc_samples)
    return report


def _mc_distances(distribution, metric, query, rng, m, chunk=200_000):
    out = []
    for s in range(0, m, chunk):
        out.append(distances(sample_source(distribution, rng, min(chunk, m - s)), query, metric))
    return np.concatenate(out)


def coverage_check(distribution: str, metric: str, n_list, trials: int, seed: int = 0,
                   mc_samples: int = 1_000_000) -> list[dict]:
    """Compare the observed ``P[NN within delta]`` to ``1 - (1 - p_delta)^n`` for a fixed query.

    ``delta`` is chosen per ``n`` from a pilot sample so the predicted
    probability is near 1/2; ``p_delta`` is then re-estimated on an
    independent sample. The standard error combines trial and Monte-Carlo noise.
    """
    rng = np.random.default_rng([seed, 2])
    query = sample_query(distribution, rng)
    pilot = np.sort(_mc_distances(distribution, metric, query, rng, mc_samples))
    fresh = _mc_distances(distribution, metric, query, rng, mc_samples)
    n_max = max(n_list)
    hits = np.zeros((trials, len(n_list)))
    deltas = []
    for n in n_list:
        p_star = 1.0 - 0.5 ** (1.0 / n)
        deltas.append(pilot[min(len(pilot) - 1, int(p_star * len(pilot)))])
    for t in range(trials):
        trng = np.random.default_rng([seed, 3, t])
        pref = prefix_nn_distance(sample_source(distribution, trng, n_max), query, metric)
        for j, n in enumerate(n_list):
            hits[t, j] = pref[n - 1] < deltas[j]
    rows = []
    for j, n in enumerate(n_list):
        p = float(np.mean(fresh < deltas[j]))
        predicted = 1.0 - (1.0 - p) ** n
        observed = float(hits[:, j].mean())
        se_trials = math.sqrt(max(predicted * (1 - predicted), 1e-12) / trials)
        se_mc = n * (1.0 - p) ** (n - 1) * math.sqrt(p * (1 - p) / len(fresh))
        se = math.hypot(se_trials, se_mc)
        rows.append({
            "n": n, "delta": float(deltas[j]), "p_delta": p, "predicted": predicted,
            "observed": observed, "se": se, "within": abs(observed - predicted) <= 3.0 * se,
        })
    return rows
