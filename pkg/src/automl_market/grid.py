"""Discrete metric grid and the time-inhomogeneous Markov chain over it.

The market reveals one rounded performance metric per period, so metric
dynamics live on a finite grid Q with a per-period transition matrix. The
chain is estimated from observed metric trajectories and sampled from when
generating synthetic market data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-9
RESOLUTION_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MetricGrid:
    """Strictly increasing metric values, each a multiple of ``resolution``."""

    values: np.ndarray
    resolution: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))
        v = self.values
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("grid needs a non-empty 1-d value array")
        if not np.all(np.diff(v) > 0):
            raise ValueError("grid values must be strictly increasing")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        mult = v / self.resolution
        if np.max(np.abs(mult - np.round(mult))) > RESOLUTION_TOL / self.resolution:
            raise ValueError("grid values must be integer multiples of the resolution")

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MetricGrid)
            and self.resolution == other.resolution
            and np.array_equal(self.values, other.values)
        )

    @staticmethod
    def default() -> "MetricGrid":
        # 0.00 .. 1.00 in steps of 0.01
        return MetricGrid(np.round(np.arange(101) * 0.01, 10), resolution=0.01)


@dataclass(frozen=True)
class Trajectory:
    """One revealed metric sequence, stored as grid indices for exact equality."""

    metrics: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(int(m) for m in self.metrics))
        if len(self.metrics) < 1:
            raise ValueError("trajectory must have length >= 1")
        if any(m < 0 for m in self.metrics):
            raise ValueError("negative grid index")

    def __len__(self) -> int:
        return len(self.metrics)

    def validate_for(self, grid: MetricGrid) -> None:
        if max(self.metrics) >= len(grid):
            raise ValueError("trajectory index out of range for grid")


@dataclass(frozen=True)
class MarkovChain:
    """Time-inhomogeneous chain: initial row P_1 plus one matrix per later period."""

    grid: MetricGrid
    horizon: int
    initial: np.ndarray
    transitions: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "initial", _readonly(self.initial))
        object.__setattr__(
            self, "transitions", tuple(_readonly(p) for p in self.transitions)
        )
        n = len(self.grid)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if len(self.transitions) != self.horizon - 1:
            raise ValueError("need horizon-1 transition matrices")
        _check_prob_row(self.initial, n)
        for p in self.transitions:
            if p.shape != (n, n):
                raise ValueError("transition matrix shape mismatch")
            for row in p:
                _check_prob_row(row, n)

    @property
    def n_states(self) -> int:
        return len(self.grid)

    def marginals(self) -> np.ndarray:
        """Analytic per-period state distributions, shape (T, |Q|)."""
        out = np.empty((self.horizon, self.n_states))
        out[0] = self.initial
        for t, p in enumerate(self.transitions):
            out[t + 1] = out[t] @ p
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "grid_values": self.grid.values.tolist(),
                "resolution": self.grid.resolution,
                "horizon": self.horizon,
                "initial": self.initial.tolist(),
                "transitions": [p.tolist() for p in self.transitions],
            }
        )

    @staticmethod
    def from_json(text: str) -> "MarkovChain":
        d = json.loads(text)
        grid = MetricGrid(np.array(d["grid_values"]), d["resolution"])
        return MarkovChain(
            grid=grid,
            horizon=int(d["horizon"]),
            initial=np.array(d["initial"]),
            transitions=tuple(np.array(p) for p in d["transitions"]),
        )


def _check_prob_row(row: np.ndarray, n: int) -> None:
    if row.shape != (n,):
        raise ValueError("probability row has wrong length")
    if np.any(row < -1e-15) or np.any(row > 1 + 1e-12):
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(row.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"probability row sums to {row.sum()!r}, not 1")


def quantize(metric: float, grid: MetricGrid) -> int:
    """Index of the nearest grid value; ties round up, out-of-range clamps."""
    if np.isnan(metric):
        raise ValueError("cannot quantize NaN")
    v = grid.values
    i = int(np.searchsorted(v, metric, side="left"))
    if i == 0:
        return 0
    if i == len(v):
        return len(v) - 1
    # tie (equidistant) goes to the higher value, i.e. index i
    return i if metric - v[i - 1] >= v[i] - metric else i - 1


def estimate_chain(
    trajectories: list[Trajectory] | tuple[Trajectory, ...],
    grid: MetricGrid,
    smoothing: float = 0.0,
) -> MarkovChain:
    """Empirical chain from a trajectory set.

    Rows with no observed outgoing transition become identity (self-loop)
    rows, which keeps the chain row-stochastic without inventing smoothing
    mass. ``smoothing`` adds an optional additive count to every cell
    (default 0) for learning experiments.
    """
    if len(trajectories) == 0:
        raise ValueError("empty trajectory set")
    horizon = len(trajectories[0])
    n = len(grid)
    for s in trajectories:
        if len(s) != horizon:
            raise ValueError("trajectories must share one length")
        s.validate_for(grid)

    data = np.array([s.metrics for s in trajectories])  # (m, T)
    initial = np.bincount(data[:, 0], minlength=n).astype(float)
    if smoothing > 0:
        initial += smoothing
    initial /= initial.sum()

    transitions = []
    for t in range(1, horizon):
        counts = np.zeros((n, n))
        np.add.at(counts, (data[:, t - 1], data[:, t]), 1.0)
        if smoothing > 0:
            counts += smoothing
        row_sums = counts.sum(axis=1)
        unvisited = row_sums == 0
        counts[unvisited] = np.eye(n)[unvisited]
        transitions.append(counts / counts.sum(axis=1, keepdims=True))
    return MarkovChain(grid, horizon, initial, tuple(transitions))


def sample_trajectory(chain: MarkovChain, rng: np.random.Generator) -> Trajectory:
    """Draw one trajectory of length T from (initial, transitions)."""
    path = [int(rng.choice(chain.n_states, p=chain.initial))]
    for p in chain.transitions:
        path.append(int(rng.choice(chain.n_states, p=p[path[-1]])))
    return Trajectory(tuple(path))


def sample_trajectories(
    chain: MarkovChain, m: int, rng: np.random.Generator
) -> list[Trajectory]:
    return [sample_trajectory(chain, rng) for _ in range(m)]


def write_trajectories_csv(path, trajectories, grid: MetricGrid) -> None:
    """One row per trajectory, columns q_1..q_T holding grid values."""
    horizon = len(trajectories[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"q_{t}" for t in range(1, horizon + 1)])
        for s in trajectories:
            w.writerow([f"{grid.values[i]:.12g}" for i in s.metrics])


def read_trajectories_csv(path, grid: MetricGrid) -> list[Trajectory]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)  # header
        for row in r:
            out.append(Trajectory(tuple(quantize(float(x), grid) for x in row)))
    return out
