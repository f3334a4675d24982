"""Gaussian-process Bayesian optimisation over augmentation-mix plans.

Plans are integer sample counts on a 1000-sample grid under a fixed total
budget; the GP works on counts expressed in thousands.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ObjectiveError, SingularKernel

DEFAULT_DIMS = ("sensor", "downsample", "segment")
DEFAULT_ITERS = 25
INITIAL_DESIGN = 5
JITTER = 1e-8


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple = DEFAULT_DIMS
    step: int = 1000
    max_count: int = 10000
    budget: int = 10000

    def __post_init__(self):
        if self.budget % self.step:
            raise ValueError(f"budget {self.budget} is not a multiple of the step {self.step}")
        if not self.feasible().size:
            raise ValueError("search space has no feasible plan")

    def feasible(self) -> np.ndarray:
        """All plans (in samples) on the grid whose counts sum to the budget, lexicographic order."""
        levels = self.budget // self.step
        top = self.max_count // self.step
        pts = [p for p in itertools.product(range(top + 1), repeat=len(self.dims)) if sum(p) == levels]
        return np.array(pts, dtype=np.int64).reshape(-1, len(self.dims)) * self.step

    def to_units(self, plan) -> np.ndarray:
        return np.asarray(plan, dtype=np.float64) / 1000.0

    def as_counts(self, plan) -> dict:
        return {d: int(c) for d, c in zip(self.dims, plan)}


@dataclass
class GpState:
    """Exact GP regression with a squared-exponential kernel."""

    X: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    length_scales: np.ndarray = field(default_factory=lambda: np.full(3, 3.0))
    signal_var: float = 1.0
    noise_var: float = 1e-4
    prior_mean: float = 0.0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.length_scales = np.broadcast_to(np.asarray(self.length_scales, dtype=np.float64),
                                             (self.X.shape[1],)).copy()
        if (self.length_scales <= 0).any() or self.signal_var <= 0 or self.noise_var < 0:
            raise ValueError("kernel hyperparameters must be positive")

    def kernel(self, A, B) -> np.ndarray:
        d = (np.atleast_2d(A)[:, None, :] - np.atleast_2d(B)[None, :, :]) / self.length_scales
        return self.signal_var * np.exp(-0.5 * (d ** 2).sum(-1))

    def _factor(self):
        K = self.kernel(self.X, self.X) + self.noise_var * np.eye(len(self.X))
        for jitter in (0.0, JITTER * self.signal_var, 10 * JITTER * self.signal_var):
            try:
                return np.linalg.cholesky(K + jitter * np.eye(len(K)))
            except np.linalg.LinAlgError:
                continue
        raise SingularKernel("Gram matrix is singular even after jitter")


def gp_posterior(state: GpState, x) -> tuple:
    """Posterior mean and variance at one point or an (N, d) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    Xq = np.atleast_2d(x)
    if len(state.X) == 0:
        mean = np.full(len(Xq), state.prior_mean)
        var = np.full(len(Xq), state.signal_var)
    else:
        L = state._factor()
        Ks = state.kernel(state.X, Xq)
        alpha = np.linalg.solve(L.T, np.linalg.solve(L, state.y - state.prior_mean))
        mean = state.prior_mean + Ks.T @ alpha
        v = np.linalg.solve(L, Ks)
        var = np.maximum(state.signal_var - (v ** 2).sum(0), 0.0)
    return (float(mean[0]), float(var[0])) if single else (mean, var)


def ei_from_moments(mean, var, best):
    """Expected improvement for maximisation given posterior moments."""
    mean, var = np.asarray(mean, dtype=float), np.asarray(var, dtype=float)
    sd = np.sqrt(np.maximum(var, 0.0))
    gain = mean - best
    with np.errstate(divide="ignore", invalid="ignore"):
        z = gain / sd
        ei = gain * norm.cdf(z) + sd * norm.pdf(z)
    return np.where(sd > 0, np.maximum(ei, 0.0), np.maximum(gain, 0.0))


def expected_improvement(state: GpState, x, best: float):
    if len(state.X) == 0:
        raise ValueError("expected improvement needs at least one observation")
    mean, var = gp_posterior(state, x)
    ei = ei_from_moments(mean, var, best)
    return float(ei) if np.ndim(ei) == 0 else ei


def fit_state(space: SearchSpace, plans, values, length_scale: float = 3.0, noise_var: float = 1e-4) -> GpState:
    """GP over observed plans with fixed hyperparameters (signal variance = sample variance)."""
    y = np.asarray(values, dtype=float)
    sv = float(y.var()) if len(y) > 1 and y.var() > 0 else 1e-2
    return GpState(space.to_units(plans), y, np.full(len(space.dims), length_scale), sv, noise_var, float(y.mean()))


@dataclass
class BoResult:
    best_plan: tuple
    best_value: float
    history: list  # [(iteration, plan tuple, value)]
    space: SearchSpace

    def incumbents(self) -> list:
        out, best = [], -math.inf
        for _, _, v in self.history:
            best = max(best, v)
            out.append(best)
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *self.space.dims, "accuracy"])
            for it, plan, value in self.history:
                w.writerow([it, *plan, f"{value:.6f}"])
        return path


def optimize_mix(objective, space: SearchSpace = SearchSpace(), iters: int = DEFAULT_ITERS, seed: int = 0,
                 initial: int = INITIAL_DESIGN, length_scale: float = 3.0, noise_var: float = 1e-4) -> BoResult:
    """Maximise ``objective(plan_counts_dict)`` over the feasible grid.

    Starts from ``initial`` distinct plans drawn uniformly, then each
    iteration fits the GP, scores every unevaluated feasible plan by expected
    improvement (ties -> lexicographically smallest plan) and evaluates the
    winner. Iteration numbers start at 0 for the initial design.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    grid = space.feasible()
    rng = np.random.default_rng(seed)
    start = rng.choice(len(grid), size=min(initial, len(grid)), replace=False)
    history = []

    def evaluate(plan, it):
        plan = tuple(int(c) for c in plan)
        try:
            value = float(objective(space.as_counts(plan)))
        except Exception as exc:
            raise ObjectiveError(plan, exc) from exc
        history.append((it, plan, value))

    for k in start:
        evaluate(grid[k], 0)
    for it in range(1, iters + 1):
        seen = {p for _, p, _ in history}
        todo = np.array([tuple(g) not in seen for g in grid])
        if not todo.any():
            break
        plans = np.array([p for _, p, _ in history])
        values = [v for _, _, v in history]
        state = fit_state(space, plans, values, length_scale, noise_var)
        cand = grid[todo]
        ei = expected_improvement(state, space.to_units(cand), max(values))
        # candidates are in lexicographic order, argmax returns the first maximum
        evaluate(cand[int(np.argmax(ei))], it)

    best = max(range(len(history)), key=lambda i: (history[i][2], -i))
    return BoResult(history[best][1], history[best][2], history, space)
