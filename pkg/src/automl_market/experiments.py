"""Instance generators and seed plumbing shared by the CLI, scripts and tests.

Every random object derives from a master seed through a named stage, so
adding a stage never shifts the streams of existing ones.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .buyer import BuyerType, Population, PriceCurve, SearchCost
from .discovery import EnvSpec, SyntheticTaskEnvironment, make_synthetic_env
from .grid import MarkovChain, MetricGrid
from .learning import precompute_likelihoods


def stage_rng(master_seed: int, stage: str) -> np.random.Generator:
    """Independent, reproducible stream for a named pipeline stage."""
    key = zlib.crc32(stage.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), key]))


def make_grid(size: int, lo: float = 0.0, resolution: float = 0.01) -> MetricGrid:
    values = np.round(lo + np.arange(size) * resolution, 12)
    return MetricGrid(values, resolution)


def random_chain(
    grid: MetricGrid,
    horizon: int,
    rng: np.random.Generator,
    concentration: float = 1.0,
) -> MarkovChain:
    """Dirichlet rows; higher concentration spreads mass, lower peaks it."""
    n = len(grid)
    alpha = np.full(n, concentration)
    initial = rng.dirichlet(alpha)
    transitions = tuple(
        np.array([rng.dirichlet(alpha) for _ in range(n)]) for _ in range(horizon - 1)
    )
    return MarkovChain(grid, horizon, initial, transitions)


def drifting_chain(
    grid: MetricGrid, horizon: int, rng: np.random.Generator, step_scale: float = 2.0
) -> MarkovChain:
    """Upward-drifting local-move chain, a caricature of model search:
    early periods improve often, later ones mostly plateau."""
    n = len(grid)
    initial = np.zeros(n)
    start = max(0, n // 4)
    initial[: start + 1] = rng.dirichlet(np.ones(start + 1))
    transitions = []
    for t in range(horizon - 1):
        p = np.zeros((n, n))
        up = max(0.1, 0.6 * (1.0 - t / max(horizon - 1, 1)))
        for q in range(n):
            p[q, q] += 1.0 - up - 0.1
            p[q, min(q + int(rng.integers(1, step_scale + 1)), n - 1)] += up
            p[q, max(q - 1, 0)] += 0.1
        transitions.append(p / p.sum(axis=1, keepdims=True))
    return MarkovChain(grid, horizon, initial, tuple(transitions))


def random_types(
    n_types: int, n_metrics: int, rng: np.random.Generator, bound: float = 1.0
) -> tuple[BuyerType, ...]:
    return tuple(
        BuyerType(f"type_{i}", rng.uniform(0.0, bound, n_metrics))
        for i in range(n_types)
    )


PRIOR_FAMILIES = ("random", "uniform", "slightly-skewed", "highly-skewed")


def make_prior(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Prior families of the learning experiment grid; the skewed ones
    normalize iid beta draws (slightly: beta(2,3), highly: beta(1,5))."""
    if family == "random":
        return rng.dirichlet(np.ones(n))
    if family == "uniform":
        return np.full(n, 1.0 / n)
    if family == "slightly-skewed":
        w = rng.beta(2.0, 3.0, n)
    elif family == "highly-skewed":
        w = rng.beta(1.0, 5.0, n)
    else:
        raise ValueError(f"unknown prior family {family!r}")
    w = np.maximum(w, 1e-9)
    return w / w.sum()


@dataclass(frozen=True)
class LearningSetup:
    population: Population
    price: PriceCurve
    chain: MarkovChain
    cost: SearchCost
    retries: int


def generate_learning_setup(
    rng: np.random.Generator,
    n_types: int = 5,
    n_metrics: int = 10,
    horizon: int = 15,
    cost: float = 0.02,
    min_row_tv: float = 0.10,
    min_singular: float = 0.05,
    max_tries: int = 200,
) -> LearningSetup:
    """Random learning instance with identifiable stop-time rows.

    Candidates are resampled until every pair of per-type stop
    distributions differs by at least ``min_row_tv`` in total variation
    and the likelihood matrix is well-conditioned; learning targets are
    unreachable for any estimator without identifiability, which the
    underlying model assumes outright.
    """
    grid = make_grid(n_metrics, lo=round(1.0 - (n_metrics - 1) * 0.01, 10))
    sc = SearchCost(cost)
    for attempt in range(max_tries):
        chain = random_chain(grid, horizon, rng)
        types = random_types(n_types, n_metrics, rng)
        price = PriceCurve(rng.uniform(0.0, 0.8, n_metrics))
        pop = Population(types, np.full(n_types, 1.0 / n_types))
        table = precompute_likelihoods(pop, price, chain, sc)
        p = table.probs
        tvs = [
            0.5 * float(np.abs(p[i] - p[j]).sum())
            for i in range(n_types)
            for j in range(i + 1, n_types)
        ]
        sv = np.linalg.svd(p, compute_uv=False)
        if (not tvs or min(tvs) >= min_row_tv) and sv[-1] >= min_singular:
            return LearningSetup(pop, price, chain, sc, attempt)
    raise RuntimeError("could not generate an identifiable learning instance")


def planted_env(
    rng: np.random.Generator,
    n_models: int = 8,
    n_augmentations: int = 200,
    n_clusters: int = 10,
    best_offset: float = 0.25,
    other_offset: float = 0.05,
    planted_gain: float = 0.2,
    noise_sigma: float = 0.0,
) -> tuple[SyntheticTaskEnvironment, int, int, float]:
    """Environment with one dominant model and one dominant cluster.

    Returns (env, best model, planted cluster, optimum metric). The
    planted cluster label is drawn from the back half of the label range
    so it never coincides with the selector's deterministic warm-up start.
    """
    offsets = np.full(n_models, other_offset)
    best_model = int(rng.integers(0, n_models))
    offsets[best_model] = best_offset
    gains = np.zeros(n_clusters)
    planted = int(rng.integers(n_clusters // 2, n_clusters))
    gains[planted] = planted_gain
    spec = EnvSpec(
        n_models, n_augmentations, n_clusters,
        base=0.3, model_offsets=tuple(offsets), cluster_gains=tuple(gains),
        noise_sigma=noise_sigma,
    )
    env = make_synthetic_env(spec, rng)
    optimum = min(0.3 + best_offset + planted_gain, 1.0)
    return env, best_model, planted, optimum
