"""Hard interventions on a trained flow or a ground-truth SCM."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .flow import FlowModel, forward_sample, inverse_and_loglik, sample_base
from .permutation import from_ordering
from .scm_bench import ScmSpec, ancestral_sample
from .trainer import StandardizationStats


class FlowGenerator:
    """A trained flow plus its ordering, sampling on the original data scale."""

    def __init__(self, model: FlowModel, ordering: Sequence[int], stats: StandardizationStats | None = None):
        self.model = model
        self.ordering = tuple(int(v) for v in ordering)
        self.p = from_ordering(self.ordering)
        self.stats = stats or StandardizationStats.identity(model.config.d, 0)

    @property
    def d(self) -> int:
        return self.model.config.d

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = sample_base(self.model.config, n, rng)
        return self.stats.invert(forward_sample(self.model, self.p, u))

    def sample_do(self, v: int, y: float, n: int, rng: np.random.Generator) -> np.ndarray:
        """Noise replacement: swap ``u_v`` for the noise that makes ``x_v = y``.

        ``u_v`` depends only on ``x_v`` and the variables before it in the
        ordering, which the replacement does not touch, so the inverse at the
        clamped row gives exactly that noise. Everything after ``v`` is then
        regenerated from it.
        """
        y_std = (y - self.stats.means[v]) / self.stats.stds[v]
        u = sample_base(self.model.config, n, rng)
        x = forward_sample(self.model, self.p, u)
        x[:, v] = y_std
        u[:, v] = inverse_and_loglik(self.model, self.p, x)[0][:, v]
        x = self.stats.invert(forward_sample(self.model, self.p, u))
        x[:, v] = y
        return x


class ScmGenerator:
    def __init__(self, spec: ScmSpec):
        self.spec = spec

    @property
    def d(self) -> int:
        return self.spec.dag.d

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return ancestral_sample(self.spec, n, rng)

    def sample_do(self, v: int, y: float, n: int, rng: np.random.Generator) -> np.ndarray:
        return ancestral_sample(self.spec, n, rng, {v: y})


def as_generator(generator):
    if isinstance(generator, ScmSpec):
        return ScmGenerator(generator)
    if not hasattr(generator, "sample_do"):
        raise TypeError(f"cannot sample interventions from {type(generator).__name__}")
    return generator


def _check_target(gen, v: int, y: float) -> None:
    if not 0 <= v < gen.d:
        raise IndexError(f"variable {v} out of range for d={gen.d}")
    if not math.isfinite(y):
        raise ValueError("intervention value must be finite")


def do_sample(generator, v: int, y: float, rng: np.random.Generator) -> np.ndarray:
    """One draw from the interventional distribution under do(x_v = y)."""
    gen = as_generator(generator)
    _check_target(gen, v, y)
    return gen.sample_do(v, float(y), 1, rng)[0]


@dataclass(frozen=True)
class DoQuery:
    target: int
    value: float
    responses: tuple[int, ...] | None = None
    num_samples: int = 50
    level: float = 0.99

    def __post_init__(self):
        if self.target < 0:
            raise ValueError("target must be a non-negative index")
        if self.num_samples < 2:
            raise ValueError("num_samples must be >= 2")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")


@dataclass
class DoEstimate:
    responses: tuple[int, ...]
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: int
    degenerate: np.ndarray

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.ci_high - self.ci_low)


def estimate_do_expectation(generator, q: DoQuery, rng: np.random.Generator) -> DoEstimate:
    """Mean and normal-approximation confidence interval of each response."""
    gen = as_generator(generator)
    _check_target(gen, q.target, q.value)
    responses = tuple(range(gen.d)) if q.responses is None else tuple(q.responses)
    if any(not 0 <= r < gen.d for r in responses):
        raise IndexError(f"response out of range for d={gen.d}")
    x = gen.sample_do(q.target, float(q.value), q.num_samples, rng)[:, list(responses)]
    # a constant column (the clamped target) gets its value and a zero-width interval
    constant = np.ptp(x, axis=0) == 0
    mean = np.where(constant, x[0], x.mean(axis=0))
    sd = np.where(constant, 0.0, x.std(axis=0, ddof=1))
    half = norm.ppf(0.5 + q.level / 2) * sd / math.sqrt(q.num_samples)
    return DoEstimate(responses, mean, mean - half, mean + half, q.num_samples, constant)


@dataclass
class SweepRow:
    y: float
    response: int
    mean: float
    ci_low: float
    ci_high: float
    n: int


def sweep(generator, v: int, y_grid: Sequence[float], responses=None, num_samples: int = 50,
          level: float = 0.99, seed: int = 0) -> list[SweepRow]:
    """One estimate per grid value, each with its own seed derived from ``seed``."""
    grid = [float(y) for y in y_grid]
    if not grid:
        raise ValueError("empty intervention grid")
    gen = as_generator(generator)
    rows = []
    for y, ss in zip(grid, np.random.SeedSequence(seed).spawn(len(grid))):
        est = estimate_do_expectation(gen, DoQuery(v, y, responses, num_samples, level), np.random.default_rng(ss))
        for i, r in enumerate(est.responses):
            rows.append(SweepRow(y, r, float(est.mean[i]), float(est.ci_low[i]), float(est.ci_high[i]), est.n))
    return rows


def parse_grid(text: str) -> list[float]:
    """``"start:stop:count"`` (inclusive, like ``linspace``) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid must look like start:stop:count, got {text!r}")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ValueError("grid count must be >= 1")
        return np.linspace(start, stop, count).tolist()
    return [float(t) for t in text.split(",") if t.strip()]


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    """CSV with 1-based response indices."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["y", "response", "mean", "ci_low", "ci_high", "n"])
    for r in rows:
        writer.writerow([repr(r.y), r.response + 1, repr(r.mean), repr(r.ci_low), repr(r.ci_high), r.n])
    return buf.getvalue()
