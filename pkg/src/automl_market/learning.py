"""Learning the buyer-type prior from observed stopping times.

Phase 1 precomputes each type's exact stop-time law under the posted
curve; phase 2 replays observed stopping rounds through Bayes updates,
smoothing each round's (batch-averaged) posterior into the running prior
with a learning rate. The cost-of-estimation-error experiment reprices
under a perturbed prior/chain and measures the revenue lost under the
truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .buyer import BuyerType, Population, PriceCurve, SearchCost, stopping_distribution
from .grid import MarkovChain, sample_trajectories
from .milp import MIPConfig
from .pricing import PricingInstance, evaluate_revenue, solve_optimal_pricing

RATE_SCHEDULES = {
    "1/(t+1)": lambda t: 1.0 / (t + 1),
    "1/sqrt(t)": lambda t: 1.0 / math.sqrt(t),
    "0.5": lambda t: 0.5,
}


class ImpossibleObservationError(ValueError):
    """Observed stop round has zero likelihood under every type."""


@dataclass(frozen=True)
class StoppingLikelihoodTable:
    """Per-type stop probabilities, probs[i, t-1] = Pr(stop at t | type i)."""

    type_ids: tuple[str, ...]
    probs: np.ndarray
    joints: tuple[np.ndarray, ...]  # per type: (T, |Q|+1, |Q|) stop-state law

    @property
    def horizon(self) -> int:
        return self.probs.shape[1]

    @property
    def n_types(self) -> int:
        return self.probs.shape[0]


def precompute_likelihoods(
    population: Population,
    price: PriceCurve,
    chain: MarkovChain,
    cost: SearchCost,
) -> StoppingLikelihoodTable:
    rows = []
    joints = []
    for t in population.types:
        dist = stopping_distribution(t, price, chain, cost)
        rows.append(dist.probs)
        joints.append(dist.joint)
    return StoppingLikelihoodTable(
        tuple(t.id for t in population.types), np.array(rows), tuple(joints)
    )


def posterior_update(
    table: StoppingLikelihoodTable, prior: np.ndarray, observed_stop: int
) -> np.ndarray:
    """w(theta) proportional to Pr(stop round | theta) * prior(theta)."""
    if not 1 <= observed_stop <= table.horizon:
        raise ValueError("observed stop round outside the horizon")
    like = table.probs[:, observed_stop - 1]
    w = like * prior
    total = w.sum()
    if total <= 0:
        raise ImpossibleObservationError(
            f"no type stops at round {observed_stop} with positive prior mass"
        )
    return w / total


def merge_indistinguishable(
    population: Population, table: StoppingLikelihoodTable, tol: float = 1e-9
):
    """Group types whose stop-time rows coincide; prior mass sums.

    Types the stopping data cannot tell apart act as one effective type,
    so learning (and its KL target) runs on the merged population.
    """
    groups: list[list[int]] = []
    for i in range(table.n_types):
        for g in groups:
            if np.max(np.abs(table.probs[i] - table.probs[g[0]])) <= tol:
                g.append(i)
                break
        else:
            groups.append([i])
    if len(groups) == table.n_types:
        return population, table, [[i] for i in range(table.n_types)]
    reps = [g[0] for g in groups]
    merged_pop = Population(
        tuple(population.types[r] for r in reps),
        np.array([population.prior[list(g)].sum() for g in groups]),
    )
    merged_table = StoppingLikelihoodTable(
        tuple(table.type_ids[r] for r in reps),
        table.probs[reps],
        tuple(table.joints[r] for r in reps),
    )
    return merged_pop, merged_table, groups


@dataclass(frozen=True)
class LearningState:
    current_prior: np.ndarray
    round: int = 1
    rate_schedule: str = "1/sqrt(t)"
    batch_size: int = 1

    def __post_init__(self):
        p = np.asarray(self.current_prior, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("prior must stay on the simplex")
        if self.rate_schedule not in RATE_SCHEDULES:
            raise ValueError(f"unknown rate schedule {self.rate_schedule!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        p = p / p.sum()
        p.flags.writeable = False
        object.__setattr__(self, "current_prior", p)

    @property
    def rate(self) -> float:
        return RATE_SCHEDULES[self.rate_schedule](self.round)


def learning_step(
    state: LearningState,
    batch,
    table: StoppingLikelihoodTable,
    rate: float | None = None,
) -> tuple[LearningState, int]:
    """One smoothed update from a batch of observed stop rounds.

    Posteriors are computed per observation under the current prior and
    averaged; the prior moves by the round's learning rate. Impossible
    observations (zero likelihood everywhere, possible under a
    misspecified chain) are skipped and counted, not fatal.
    """
    batch = np.asarray(list(batch), dtype=int)
    if len(batch) != state.batch_size:
        raise ValueError("batch length must equal the configured batch size")
    if np.any(batch < 1) or np.any(batch > table.horizon):
        raise ValueError("observed stop round outside the horizon")
    eta = state.rate if rate is None else rate
    like = table.probs[:, batch - 1]              # (n_types, b)
    w = like * state.current_prior[:, None]
    totals = w.sum(axis=0)
    ok = totals > 0
    skipped = int(np.count_nonzero(~ok))
    if np.any(ok):
        w_hat = (w[:, ok] / totals[ok]).mean(axis=1)
        new_prior = (1.0 - eta) * state.current_prior + eta * w_hat
    else:
        new_prior = state.current_prior
    return replace(state, current_prior=new_prior, round=state.round + 1), skipped


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    with np.errstate(divide="ignore"):
        terms = p[mask] * (np.log(p[mask]) - np.log(q[mask]))
    return float(terms.sum())


@dataclass(frozen=True)
class LearningTrace:
    kl: np.ndarray
    final_prior: np.ndarray
    type_ids: tuple[str, ...]
    skipped_observations: int
    merged_groups: tuple[tuple[int, ...], ...]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "kl"])
            for t, v in enumerate(self.kl, start=1):
                w.writerow([t, f"{v:.12g}"])


def run_learning(
    true_prior: np.ndarray,
    population: Population,
    price: PriceCurve,
    chain: MarkovChain,
    cost: SearchCost,
    rounds: int,
    batch_size: int,
    schedule: str,
    rng: np.random.Generator,
    kl_direction: str = "true-vs-learned",
    reprice: "callable | None" = None,
    reprice_every: int = 0,
) -> LearningTrace:
    """Simulate buyers from the true prior and learn it back.

    Stop rounds are drawn from the precomputed per-type laws (types
    indistinguishable under the posted curve are merged first, with prior
    mass summed). The default KL is KL(true || learned); pass
    ``kl_direction="learned-vs-true"`` to flip. ``reprice``, if given, is
    called every ``reprice_every`` rounds with the current prior and must
    return a new PriceCurve; the likelihood table is then rebuilt.
    """
    if rounds < 1:
        raise ValueError("need at least one learning round")
    true_prior = np.asarray(true_prior, dtype=float)
    pop_true = Population(population.types, true_prior)
    table = precompute_likelihoods(pop_true, price, chain, cost)
    pop_m, table, groups = merge_indistinguishable(pop_true, table)
    target = pop_m.prior
    n = pop_m.n_types

    state = LearningState(np.full(n, 1.0 / n), 1, schedule, batch_size)
    kl = np.empty(rounds)
    skipped = 0
    cdf = np.cumsum(table.probs, axis=1)
    for t in range(rounds):
        if reprice is not None and reprice_every > 0 and t > 0 and t % reprice_every == 0:
            price = reprice(state.round, state.current_prior)
            table = precompute_likelihoods(pop_m, price, chain, cost)
            cdf = np.cumsum(table.probs, axis=1)
        types = rng.choice(n, size=batch_size, p=target)
        u = rng.random(batch_size)
        stops = np.minimum((cdf[types] < u[:, None]).sum(axis=1) + 1, table.horizon)
        state, s = learning_step(state, stops, table)
        skipped += s
        if kl_direction == "true-vs-learned":
            kl[t] = kl_divergence(target, state.current_prior)
        else:
            kl[t] = kl_divergence(state.current_prior, target)
    return LearningTrace(
        kl, state.current_prior, table.type_ids, skipped,
        tuple(tuple(g) for g in groups),
    )


# ---------------------------------------------------------------------------
# cost of estimation error


@dataclass(frozen=True)
class CeeTemplate:
    """Shared scaffolding for one CEE measurement: the value vectors, the
    sample size, the search cost, and the trajectory seed."""

    types: tuple[BuyerType, ...]
    m: int
    cost: SearchCost
    seed: int
    mip: MIPConfig | None = None


def cee(
    true_prior: np.ndarray,
    true_chain: MarkovChain,
    perturbed_prior: np.ndarray,
    perturbed_chain: MarkovChain,
    template: CeeTemplate,
) -> float:
    """Revenue lost by pricing under the perturbed prior and chain.

    Both curves are solved exactly by the pricing program on samples drawn
    with the template seed (so a zero perturbation reproduces the same
    instance), then evaluated under the true prior on the true sample.
    """
    mip = template.mip or MIPConfig(time_budget=None, gap_tol=0.0)
    rng_true = np.random.default_rng(template.seed)
    rng_pert = np.random.default_rng(template.seed)
    sample_true = tuple(sample_trajectories(true_chain, template.m, rng_true))
    sample_pert = tuple(sample_trajectories(perturbed_chain, template.m, rng_pert))

    pop_true = Population(template.types, np.asarray(true_prior, dtype=float))
    pop_pert = Population(template.types, np.asarray(perturbed_prior, dtype=float))
    curve_true = solve_optimal_pricing(
        PricingInstance(pop_true, sample_true, template.cost), mip
    )
    curve_pert = solve_optimal_pricing(
        PricingInstance(pop_pert, sample_pert, template.cost), mip
    )
    rev_true = evaluate_revenue(curve_true, pop_true, sample_true, "IS").expected_revenue
    rev_pert = evaluate_revenue(curve_pert, pop_true, sample_true, "IS").expected_revenue
    return rev_true - rev_pert


def perturb_simplex(p: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Random simplex point within L2 distance eps of p (nonnegativity may
    shorten the step)."""
    p = np.asarray(p, dtype=float)
    if eps == 0 or len(p) < 2:
        return p.copy()
    d = rng.normal(size=len(p))
    d -= d.mean()
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        return p.copy()
    d /= norm
    neg = d < 0
    feas = np.min(p[neg] / -d[neg]) if np.any(neg) else np.inf
    step = min(eps, feas)
    out = np.maximum(p + step * d, 0.0)
    return out / out.sum()


def perturb_chain(chain: MarkovChain, eps: float, rng: np.random.Generator) -> MarkovChain:
    """Perturb every probability row, total Frobenius movement <= eps."""
    rows = 1 + sum(p.shape[0] for p in chain.transitions)
    per_row = eps / math.sqrt(rows)
    initial = perturb_simplex(chain.initial, per_row, rng)
    transitions = tuple(
        np.array([perturb_simplex(row, per_row, rng) for row in p])
        for p in chain.transitions
    )
    return MarkovChain(chain.grid, chain.horizon, initial, transitions)
