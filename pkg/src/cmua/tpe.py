"""Tree-structured Parzen Estimator over a bounded box (maximization).

Scores are higher-is-better. Internally observations are ranked by the
loss ``-y``: the best ``ceil(gamma * n)`` form the "good" set whose Parzen
density is ``l(x)``; the rest form ``g(x)``. Candidates drawn from ``l``
are ranked by ``l(x) / g(x)``, which orders them exactly as expected
improvement does. Only the ranking of scores is ever used, so any strictly
increasing transform of the objective leaves the search unchanged.

Dimensions are modeled independently (the box has no conditional
structure). Each per-dimension density is a truncated-Gaussian mixture
plus a uniform prior component.
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TPEConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    bandwidth_floor: float = 0.01


@dataclass
class SearchSpace:
    low: tuple
    high: tuple

    def __post_init__(self):
        self.low = tuple(float(v) for v in self.low)
        self.high = tuple(float(v) for v in self.high)
        if len(self.low) != len(self.high) or not self.low:
            raise ValueError("bounds must be non-empty and of equal length")
        for lo, hi in zip(self.low, self.high):
            if not lo < hi:
                raise ValueError(f"each dimension needs lo < hi, got [{lo}, {hi}]")

    @classmethod
    def box(cls, dim, low=0.0, high=10.0):
        return cls((low,) * dim, (high,) * dim)

    @property
    def dim(self):
        return len(self.low)

    def contains(self, x):
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.low) and np.all(x <= self.high))


@dataclass
class Observation:
    index: int
    x: tuple
    y: float
    wall_time: float = 0.0

    def to_line(self):
        y = self.y if math.isfinite(self.y) else ("-inf" if self.y < 0 else "nan")
        return json.dumps({"index": self.index, "x": list(self.x), "y": y, "wall_time": self.wall_time})

    @classmethod
    def from_line(cls, line):
        d = json.loads(line)
        return cls(index=int(d["index"]), x=tuple(float(v) for v in d["x"]), y=float(d["y"]),
                   wall_time=float(d.get("wall_time", 0.0)))


@dataclass
class TrialHistory:
    observations: list = field(default_factory=list)
    gamma: float = 0.25
    y_star: float = None

    def __len__(self):
        return len(self.observations)

    def add(self, x, y, wall_time=0.0):
        obs = Observation(len(self.observations), tuple(float(v) for v in x), float(y), float(wall_time))
        self.observations.append(obs)
        return obs

    @property
    def xs(self):
        return np.array([o.x for o in self.observations], dtype=np.float64)

    @property
    def ys(self):
        return np.array([o.y for o in self.observations], dtype=np.float64)

    def best(self):
        if not self.observations:
            raise ValueError("empty history")
        # max score; earliest trial wins ties
        return max(self.observations, key=lambda o: (o.y, -o.index))

    def to_lines(self):
        return "".join(o.to_line() + "\n" for o in self.observations)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_lines())

    @classmethod
    def load(cls, path, gamma=0.25):
        with open(path) as fh:
            obs = [Observation.from_line(line) for line in fh if line.strip()]
        for i, o in enumerate(obs):
            if o.index != i:
                raise ValueError(f"trial log {path} is not contiguous at line {i + 1}")
        return cls(observations=obs, gamma=gamma)


def split(history, gamma=None):
    """Rank observations and split them into (good, bad, y_star).

    ``good`` holds the best ``ceil(gamma * n)`` observations by score, with
    earlier trials first among equal scores; ``y_star`` is the worst score
    inside ``good``.
    """
    gamma = history.gamma if gamma is None else gamma
    n = len(history)
    if n < 2:
        raise ValueError(f"split needs at least 2 observations, have {n}")
    # minimization of the loss -y; nan counts as the worst possible score
    def loss(o):
        return math.inf if math.isnan(o.y) else -o.y

    ranked = sorted(history.observations, key=lambda o: (loss(o), o.index))
    n_good = min(n, max(1, math.ceil(gamma * n)))
    good, bad = ranked[:n_good], ranked[n_good:]
    history.y_star = good[-1].y
    return good, bad, history.y_star


class ParzenDensity:
    """One-dimensional truncated-Gaussian Parzen estimator with a uniform prior."""

    def __init__(self, centers, low, high, bandwidth_floor=0.01):
        self.low, self.high = float(low), float(high)
        span = self.high - self.low
        self.centers = np.sort(np.asarray(centers, dtype=np.float64))
        n = len(self.centers)
        if n:
            padded = np.concatenate([[self.low], self.centers, [self.high]])
            gaps = np.diff(padded)
            sigma = np.maximum(gaps[:-1], gaps[1:])
            self.sigmas = np.clip(sigma, bandwidth_floor * span, span)
        else:
            self.sigmas = np.zeros(0)
        self.weight = 1.0 / (n + 1)
        a = (self.low - self.centers) / np.where(self.sigmas > 0, self.sigmas, 1)
        b = (self.high - self.centers) / np.where(self.sigmas > 0, self.sigmas, 1)
        self._cdf_a, self._cdf_b = ndtr(a), ndtr(b)
        self._mass = self._cdf_b - self._cdf_a

    def pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        inside = (x >= self.low) & (x <= self.high)
        out = np.full(x.shape, self.weight / (self.high - self.low))
        if len(self.centers):
            z = (x[..., None] - self.centers) / self.sigmas
            k = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigmas * self._mass)
            out = out + self.weight * k.sum(axis=-1)
        return np.where(inside, out, 0.0)

    def logpdf(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(x))

    def sample(self, rng, size):
        n = len(self.centers)
        comp = rng.integers(0, n + 1, size=size)
        u = rng.random(size)
        out = self.low + u * (self.high - self.low)
        k = comp < n
        if np.any(k):
            c = comp[k]
            q = self._cdf_a[c] + u[k] * self._mass[c]
            q = np.clip(q, 1e-300, 1 - 1e-16)
            out[k] = self.centers[c] + self.sigmas[c] * ndtri(q)
        return np.clip(out, self.low, self.high)


class ProductDensity:
    """Independent per-dimension Parzen densities over a box."""

    def __init__(self, points, space, bandwidth_floor=0.01):
        points = np.asarray(points, dtype=np.float64).reshape(-1, space.dim)
        self.dims = [
            ParzenDensity(points[:, d], space.low[d], space.high[d], bandwidth_floor) for d in range(space.dim)
        ]

    def logpdf(self, xs):
        xs = np.atleast_2d(xs)
        return sum(dim.logpdf(xs[:, d]) for d, dim in enumerate(self.dims))

    def sample(self, rng, n):
        return np.stack([dim.sample(rng, n) for dim in self.dims], axis=1)


def _startup_points(space, n, seed):
    sampler = qmc.Halton(d=space.dim, scramble=True, rng=np.random.default_rng(derive_seed(seed, "tpe-startup")))
    return qmc.scale(sampler.random(max(n, 1)), space.low, space.high)


def suggest(history, space, n_candidates=24, rng=None, config=None, seed=0):
    """Next point to evaluate.

    The first ``config.n_startup`` trials (or any history too small to split)
    come from a scrambled Halton sequence; afterwards the candidate from
    ``l`` with the largest ``l / g`` wins.
    """
    config = config or TPEConfig(n_candidates=n_candidates)
    rng = rng if rng is not None else np.random.default_rng(derive_seed(seed, "tpe", len(history)))
    n = len(history)
    if n < max(config.n_startup, 2):
        return _startup_points(space, max(config.n_startup, n + 1), seed)[n]
    good, bad, _ = split(history, config.gamma)
    l_dens = ProductDensity([o.x for o in good], space, config.bandwidth_floor)
    g_dens = ProductDensity([o.x for o in bad], space, config.bandwidth_floor)
    candidates = l_dens.sample(rng, n_candidates)
    score = l_dens.logpdf(candidates) - g_dens.logpdf(candidates)
    return candidates[int(np.argmax(score))]


def optimize(objective, space, budget, seed=0, config=None, history=None, log_path=None):
    """Sequential TPE loop: suggest, evaluate, record; returns (best_x, best_y, history).

    A failing objective scores ``-inf`` for that trial. When ``log_path``
    names an existing trial log and no history is passed, the run resumes
    from it; every trial draws from its own seeded stream, so a resumed run
    matches an uninterrupted one.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    config = config or TPEConfig()
    if history is None:
        if log_path is not None and os.path.exists(log_path):
            history = TrialHistory.load(log_path, gamma=config.gamma)
            log.info("resuming from %s with %d trials", log_path, len(history))
        else:
            history = TrialHistory(gamma=config.gamma)
            if log_path is not None:
                open(log_path, "w").close()
    while len(history) < budget:
        t = len(history)
        rng = np.random.default_rng([derive_seed(seed, "tpe"), t])
        x = suggest(history, space, config.n_candidates, rng=rng, config=config, seed=seed)
        start = time.perf_counter()
        try:
            y = float(objective(x))
            if math.isnan(y):
                y = -math.inf
        except Exception as exc:  # recorded, search continues
            log.warning("trial %d failed: %s", t, exc)
            y = -math.inf
        obs = history.add(x, y, time.perf_counter() - start)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(obs.to_line() + "\n")
    best = history.best()
    return np.array(best.x), best.y, history


def random_search(objective, space, budget, seed=0):
    """Uniform random search with the same interface as :func:`optimize`."""
    rng = np.random.default_rng(derive_seed(seed, "random-search"))
    history = TrialHistory()
    for _ in range(budget):
        x = rng.uniform(space.low, space.high)
        history.add(x, float(objective(x)))
    best = history.best()
    return np.array(best.x), best.y, history
