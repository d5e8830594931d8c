"""Joint augmentation-and-model discovery against pluggable environments.

Each iteration evaluates exactly one (model, augmentation) pair: the
augmentation comes from a cluster-greedy selector, the model from an Exp3
draw whose reward is the realized metric. A final pass re-checks the
top-scoring augmentations under the current best model, correcting for
augmentations that were unlucky with weak models. Alternative loop
drivers (probe every model, fixed probe model with periodic full sweeps,
model search only) run against the same environments for benchmarking.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
import threading
import time
from dataclasses import dataclass, replace

import numpy as np

from .grid import MetricGrid, Trajectory, quantize


@dataclass(frozen=True)
class Augmentation:
    id: int
    cluster: int
    features: tuple[float, ...] = ()


class PoolExhaustedError(RuntimeError):
    """No augmentations to pick from."""


@dataclass(frozen=True)
class Exp3State:
    """Exponential weights over models, stored in log space.

    Probabilities only depend on weight ratios, so the exposed weights are
    rescaled by the max; this keeps 1e4+ updates finite without changing
    the sampling law.
    """

    log_weights: np.ndarray
    gamma: float = 0.1

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        if lw.ndim != 1 or len(lw) == 0 or not np.all(np.isfinite(lw)):
            raise ValueError("log weights must be a finite vector")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        lw.flags.writeable = False
        object.__setattr__(self, "log_weights", lw)

    @staticmethod
    def uniform(n_models: int, gamma: float = 0.1) -> "Exp3State":
        return Exp3State(np.zeros(n_models), gamma)

    @property
    def n_models(self) -> int:
        return len(self.log_weights)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - self.log_weights.max())


def exp3_probabilities(state: Exp3State) -> np.ndarray:
    """(1-gamma) * weight share + gamma uniform; floor gamma/|M| per arm."""
    w = state.weights
    return (1.0 - state.gamma) * w / w.sum() + state.gamma / state.n_models


def exp3_update(state: Exp3State, chosen: int, reward: float) -> Exp3State:
    """Importance-weighted exponential bump of the chosen arm.

    reward must already live in [0, 1]; the estimator divides by the
    sampling probability and the exponent carries the standard gamma/|M|
    step.
    """
    if not 0.0 <= reward <= 1.0:
        raise ValueError("reward must lie in [0, 1]")
    p = exp3_probabilities(state)[chosen]
    r_hat = reward / p
    lw = state.log_weights.copy()
    lw[chosen] += state.gamma * r_hat / state.n_models
    return replace(state, log_weights=lw)


def select_augmentation(pool, history, rng: np.random.Generator | None = None) -> int:
    """Cluster-greedy pick: best estimated cluster, round-robin inside it.

    Cluster estimates are mean realized metrics from ``history`` (pairs of
    augmentation id and metric); untried clusters carry an optimistic
    prior of 1.0 and win ties by label order. Within the chosen cluster
    the least-visited augmentation (then lowest id) is returned, so
    repeated calls cycle. Deterministic given the history.
    """
    pool = list(pool)
    if not pool:
        raise PoolExhaustedError("augmentation pool is empty")
    by_id = {a.id: a for a in pool}
    visits: dict[int, int] = {a.id: 0 for a in pool}
    gains: dict[int, list[float]] = {}
    for aug_id, metric in history:
        if aug_id in visits:
            visits[aug_id] += 1
            gains.setdefault(by_id[aug_id].cluster, []).append(metric)
    clusters = sorted({a.cluster for a in pool})
    untried = {c for c in clusters if c not in gains}
    est = {c: 1.0 if c in untried else float(np.mean(gains[c])) for c in clusters}
    order = sorted(clusters, key=lambda c: (-est[c], c not in untried, c))
    for c in order:
        members = sorted((a for a in pool if a.cluster == c), key=lambda a: a.id)
        if members:
            return min(members, key=lambda a: (visits[a.id], a.id)).id
    raise PoolExhaustedError("augmentation pool is empty")  # pragma: no cover


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    model: int
    augmentation: int | None
    metric: float
    best: float


@dataclass(frozen=True)
class DiscoveryTrace:
    records: tuple[TraceRecord, ...]
    best_model: int
    best_augmentation: int | None
    best_metric: float
    loop_evaluations: int
    repass_evaluations: int

    @property
    def total_evaluations(self) -> int:
        return self.loop_evaluations + self.repass_evaluations

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "model", "augmentation", "metric", "best"])
            for r in self.records:
                w.writerow(
                    [r.iteration, r.model,
                     "" if r.augmentation is None else r.augmentation,
                     f"{r.metric:.12g}", f"{r.best:.12g}"]
                )


@dataclass(frozen=True)
class StoppingRule:
    max_iterations: int | None = None
    wall_budget_s: float | None = None
    stop_signal: "callable | None" = None

    def exhausted(self, iteration: int, started: float) -> bool:
        if self.max_iterations is not None and iteration >= self.max_iterations:
            return True
        if self.wall_budget_s is not None and time.monotonic() - started >= self.wall_budget_s:
            return True
        if self.stop_signal is not None and self.stop_signal():
            return True
        return False


def run_discovery(
    env,
    stopping: StoppingRule,
    rng: np.random.Generator,
    gamma: float = 0.1,
) -> DiscoveryTrace:
    """Bandit model selection interleaved with greedy augmentation search.

    One environment evaluation per loop iteration. On stop, the top
    ceil(log2 |pool|) augmentations by realized metric are re-evaluated
    under the highest-weight model; the returned pair is the best over
    every evaluation made, so its metric dominates each single evaluation
    in a noiseless environment.
    """
    pool = list(env.augmentations)
    if not pool:
        raise PoolExhaustedError("augmentation pool is empty")
    state = Exp3State.uniform(len(env.models), gamma)
    history: list[tuple[int, float]] = []
    records: list[TraceRecord] = []
    utility: dict[int, float] = {}
    best = (-float("inf"), -1, None)  # metric, model, augmentation
    started = time.monotonic()
    it = 0
    while not stopping.exhausted(it, started):
        it += 1
        aug = select_augmentation(pool, history, rng)
        probs = exp3_probabilities(state)
        model = int(rng.choice(state.n_models, p=probs))
        metric = float(env.evaluate(model, (aug,)))
        state = exp3_update(state, model, min(max(metric, 0.0), 1.0))
        history.append((aug, metric))
        utility[aug] = metric
        if metric > best[0]:
            best = (metric, model, aug)
        records.append(TraceRecord(it, model, aug, metric, best[0]))

    repass = 0
    if utility:
        t_top = max(1, math.ceil(math.log2(max(len(pool), 2))))
        top = sorted(utility, key=lambda a: (-utility[a], a))[:t_top]
        best_model = int(np.argmax(state.weights))
        for aug in top:
            metric = float(env.evaluate(best_model, (aug,)))
            repass += 1
            if metric > best[0]:
                best = (metric, best_model, aug)
    return DiscoveryTrace(
        tuple(records), best[1], best[2], best[0],
        loop_evaluations=len(records), repass_evaluations=repass,
    )


# ---------------------------------------------------------------------------
# benchmark drivers over the same environment


def run_data_all(env, iterations: int, rng: np.random.Generator) -> DiscoveryTrace:
    """Every model evaluated on each chosen augmentation (|M| per iteration)."""
    pool = list(env.augmentations)
    history: list[tuple[int, float]] = []
    records: list[TraceRecord] = []
    best = (-float("inf"), -1, None)
    for it in range(1, iterations + 1):
        aug = select_augmentation(pool, history, rng)
        best_metric_iter = -float("inf")
        for m in range(len(env.models)):
            metric = float(env.evaluate(m, (aug,)))
            if metric > best[0]:
                best = (metric, m, aug)
            best_metric_iter = max(best_metric_iter, metric)
            records.append(TraceRecord(it, m, aug, metric, best[0]))
        history.append((aug, best_metric_iter))
    return DiscoveryTrace(tuple(records), best[1], best[2], best[0],
                          loop_evaluations=len(records), repass_evaluations=0)


def run_data_alt(
    env, iterations: int, rng: np.random.Generator, automl_period: int = 10
) -> DiscoveryTrace:
    """Fixed probe model per iteration, full model sweep on the incumbent
    augmentation every ``automl_period`` iterations."""
    pool = list(env.augmentations)
    history: list[tuple[int, float]] = []
    records: list[TraceRecord] = []
    best = (-float("inf"), -1, None)
    best_aug = (-float("inf"), None)
    for it in range(1, iterations + 1):
        aug = select_augmentation(pool, history, rng)
        metric = float(env.evaluate(0, (aug,)))
        history.append((aug, metric))
        if metric > best[0]:
            best = (metric, 0, aug)
        if metric > best_aug[0]:
            best_aug = (metric, aug)
        records.append(TraceRecord(it, 0, aug, metric, best[0]))
        if it % automl_period == 0 and best_aug[1] is not None:
            for m in range(len(env.models)):
                metric = float(env.evaluate(m, (best_aug[1],)))
                if metric > best[0]:
                    best = (metric, m, best_aug[1])
                records.append(TraceRecord(it, m, best_aug[1], metric, best[0]))
    return DiscoveryTrace(tuple(records), best[1], best[2], best[0],
                          loop_evaluations=len(records), repass_evaluations=0)


def run_automl_only(
    env, iterations: int, rng: np.random.Generator, gamma: float = 0.1
) -> DiscoveryTrace:
    """Model search without any augmentation (empty join set)."""
    state = Exp3State.uniform(len(env.models), gamma)
    records: list[TraceRecord] = []
    best = (-float("inf"), -1, None)
    for it in range(1, iterations + 1):
        probs = exp3_probabilities(state)
        model = int(rng.choice(state.n_models, p=probs))
        metric = float(env.evaluate(model, ()))
        state = exp3_update(state, model, min(max(metric, 0.0), 1.0))
        if metric > best[0]:
            best = (metric, model, None)
        records.append(TraceRecord(it, model, None, metric, best[0]))
    return DiscoveryTrace(tuple(records), best[1], best[2], best[0],
                          loop_evaluations=len(records), repass_evaluations=0)


DRIVERS = {
    "data-bandit": None,  # run_discovery, wired in the CLI (different signature)
    "data-all": run_data_all,
    "data-alt": run_data_alt,
    "automl-only": run_automl_only,
}


# ---------------------------------------------------------------------------
# environments


@dataclass(frozen=True)
class EnvSpec:
    """Synthetic stand-in for a real training backend."""

    n_models: int
    n_augmentations: int
    n_clusters: int
    base: float = 0.3
    model_offsets: tuple[float, ...] | None = None
    cluster_gains: tuple[float, ...] | None = None
    noise_sigma: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__)

    @staticmethod
    def from_json(text: str) -> "EnvSpec":
        d = json.loads(text)
        for k in ("model_offsets", "cluster_gains"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return EnvSpec(**d)


class SyntheticTaskEnvironment:
    """metric = clamp(base + model offset + sum of cluster gains + noise).

    Offsets/gains not pinned in the spec are drawn once at construction.
    Noise draws are serialized by a lock so concurrent evaluate calls stay
    safe; a single run's call sequence is deterministic given the seed.
    """

    def __init__(self, spec: EnvSpec, rng: np.random.Generator):
        self.spec = spec
        self.models = [f"model_{i}" for i in range(spec.n_models)]
        if spec.model_offsets is not None:
            self._offsets = np.array(spec.model_offsets, dtype=float)
        else:
            self._offsets = rng.uniform(0.0, 0.3, spec.n_models)
        if spec.cluster_gains is not None:
            self._gains = np.array(spec.cluster_gains, dtype=float)
        else:
            self._gains = rng.uniform(0.0, 0.2, spec.n_clusters)
        clusters = rng.integers(0, spec.n_clusters, spec.n_augmentations)
        self.augmentations = [
            Augmentation(i, int(clusters[i])) for i in range(spec.n_augmentations)
        ]
        self._cluster_of = clusters
        self._noise = np.random.default_rng(rng.integers(0, 2**63 - 1))
        self._lock = threading.Lock()
        self.eval_count = 0

    def noiseless(self, model: int, augmentation_ids) -> float:
        total = self.spec.base + self._offsets[model]
        total += sum(self._gains[self._cluster_of[a]] for a in augmentation_ids)
        return float(np.clip(total, 0.0, 1.0))

    def evaluate(self, model: int, augmentation_ids) -> float:
        with self._lock:
            self.eval_count += 1
            noise = self._noise.normal(0.0, self.spec.noise_sigma) if self.spec.noise_sigma else 0.0
        total = self.spec.base + self._offsets[model]
        total += sum(self._gains[self._cluster_of[a]] for a in augmentation_ids)
        return float(np.clip(total + noise, 0.0, 1.0))


def make_synthetic_env(spec: EnvSpec, rng: np.random.Generator) -> SyntheticTaskEnvironment:
    return SyntheticTaskEnvironment(spec, rng)


class ExternalProcessEnvironment:
    """Adapter for a real training backend over standard streams.

    Protocol: one JSON object per line. Request
    ``{"model": int, "augmentation_ids": [int, ...]}``; response
    ``{"metric": float}``. Model and augmentation inventories are declared
    at construction since the wire protocol only covers evaluation.
    """

    def __init__(self, cmd, models, augmentations):
        self.models = list(models)
        self.augmentations = list(augmentations)
        self._proc = subprocess.Popen(
            cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True
        )
        self._lock = threading.Lock()
        self.eval_count = 0

    def evaluate(self, model: int, augmentation_ids) -> float:
        req = json.dumps({"model": int(model), "augmentation_ids": [int(a) for a in augmentation_ids]})
        with self._lock:
            self.eval_count += 1
            self._proc.stdin.write(req + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("external environment closed its stream")
        return float(json.loads(line)["metric"])

    def close(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)


def trace_to_trajectory(
    trace: DiscoveryTrace, grid: MetricGrid, period: int
) -> Trajectory:
    """Latest realized metric at each period boundary, quantized.

    The market reveals the latest metric, not the best so far, so dips in
    the trace produce non-monotone trajectories.
    """
    if period < 1:
        raise ValueError("period must be >= 1")
    n = len(trace.records)
    if n < period:
        raise ValueError("trace shorter than one period")
    picks = range(period - 1, n, period)
    return Trajectory(tuple(quantize(trace.records[i].metric, grid) for i in picks))
