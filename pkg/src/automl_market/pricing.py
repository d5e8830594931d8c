"""Seller-side pricing of the revealed-metric menu.

The seller posts one price per grid metric. Against a sampled trajectory
set, each (type, trajectory) buyer picks the surplus-maximizing metric
seen (or walks away), and the seller's exact problem is a mixed-integer
program over prices and choice indicators. Three heuristics (independent
posted prices, rank shifting, local rank search) give fast curves and the
warm start for the exact solve.

Buyers here choose over the whole trajectory with no search cost: the
negligible-cost regime of the sample-complexity guarantee. Search cost
enters through the stopping model in :mod:`automl_market.buyer`, not
through revenue.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .buyer import Population, PriceCurve, SearchCost
from .grid import Trajectory
from .milp import (
    INF,
    LPBuilder,
    MIPConfig,
    MIPModel,
    MIPSolution,
    solve_lp,
    solve_mip,
)

TIE_TOL = 1e-9


def thin_uniform_half(trajectory: Trajectory, rng: np.random.Generator) -> tuple[int, ...]:
    """Keep a uniform random ceil(T/2)-subset of the revealed periods."""
    t = len(trajectory)
    keep = rng.choice(t, size=(t + 1) // 2, replace=False)
    return tuple(trajectory.metrics[i] for i in sorted(keep))


def thin_identity(trajectory: Trajectory, rng: np.random.Generator) -> tuple[int, ...]:
    return trajectory.metrics


OOS_SUBSET_RULES = {
    "uniform-half": thin_uniform_half,
    "identity": thin_identity,
}


@dataclass(frozen=True)
class PricingInstance:
    """Everything a pricing scheme sees: population, sample, cost, options."""

    population: Population
    sample: tuple[Trajectory, ...]
    cost: SearchCost = SearchCost(0.0)
    allow_no_purchase: bool = True
    big_m: float | None = None
    oos_subset_rule: str = "uniform-half"

    def __post_init__(self):
        object.__setattr__(self, "sample", tuple(self.sample))
        if len(self.sample) < 1:
            raise ValueError("need at least one sampled trajectory")
        n = self.population.n_metrics
        for s in self.sample:
            if max(s.metrics) >= n:
                raise ValueError("trajectory metric outside the population grid")
        if self.oos_subset_rule not in OOS_SUBSET_RULES:
            raise ValueError(f"unknown OOS subset rule {self.oos_subset_rule!r}")

    @property
    def m(self) -> int:
        return len(self.sample)

    def effective_big_m(self) -> float:
        if self.big_m is not None:
            return self.big_m
        return max(2.0 * self.population.value_bound, 1.0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "types": [
                    {"id": t.id, "values": t.values.tolist()}
                    for t in self.population.types
                ],
                "prior": self.population.prior.tolist(),
                "sample": [list(s.metrics) for s in self.sample],
                "cost": self.cost.per_period,
                "allow_no_purchase": self.allow_no_purchase,
                "big_m": self.big_m,
                "oos_subset_rule": self.oos_subset_rule,
            }
        )

    @staticmethod
    def from_json(text: str) -> "PricingInstance":
        from .buyer import BuyerType

        d = json.loads(text)
        pop = Population(
            tuple(BuyerType(t["id"], np.array(t["values"])) for t in d["types"]),
            np.array(d["prior"]),
        )
        return PricingInstance(
            population=pop,
            sample=tuple(Trajectory(tuple(s)) for s in d["sample"]),
            cost=SearchCost(d["cost"]),
            allow_no_purchase=d["allow_no_purchase"],
            big_m=d["big_m"],
            oos_subset_rule=d["oos_subset_rule"],
        )


@dataclass(frozen=True)
class RevenueReport:
    expected_revenue: float
    total_welfare: float
    fraction_of_welfare: float
    per_type_revenue: np.ndarray
    per_type_welfare: np.ndarray


# ---------------------------------------------------------------------------
# compiled choice sets
#
# A buyer's problem depends on the trajectory only through its set of
# distinct metrics, so trajectories collapse to weighted choice sets and
# (type, set) pairs form the working unit everywhere below.


@dataclass(frozen=True)
class _Groups:
    sets: tuple[tuple[int, ...], ...]
    set_weights: np.ndarray       # (n_sets,) trajectory mass, sums to 1
    items: np.ndarray             # (n_pairs, kmax) grid index, -1 pad
    mask: np.ndarray              # (n_pairs, kmax) True where real
    values: np.ndarray            # (n_pairs, kmax) buyer valuation
    weight: np.ndarray            # (n_pairs,) mu(theta) * set weight
    type_of: np.ndarray           # (n_pairs,)
    set_of: np.ndarray            # (n_pairs,)


def _compile_groups(population: Population, metric_sets) -> _Groups:
    counts = Counter(tuple(sorted(set(s))) for s in metric_sets)
    sets = tuple(sorted(counts))
    m = sum(counts.values())
    set_w = np.array([counts[s] / m for s in sets])
    kmax = max(len(s) for s in sets)
    nt, ns = population.n_types, len(sets)
    items = np.full((nt * ns, kmax), -1, dtype=int)
    mask = np.zeros((nt * ns, kmax), dtype=bool)
    values = np.zeros((nt * ns, kmax))
    weight = np.zeros(nt * ns)
    type_of = np.zeros(nt * ns, dtype=int)
    set_of = np.zeros(nt * ns, dtype=int)
    p = 0
    for i, ty in enumerate(population.types):
        for k, s in enumerate(sets):
            items[p, : len(s)] = s
            mask[p, : len(s)] = True
            values[p, : len(s)] = ty.values[list(s)]
            weight[p] = population.prior[i] * set_w[k]
            type_of[p] = i
            set_of[p] = k
            p += 1
    return _Groups(sets, set_w, items, mask, values, weight, type_of, set_of)


@dataclass(frozen=True)
class _Evaluation:
    revenue: float
    welfare: float
    chosen: np.ndarray            # (n_pairs,) slot index into items, -1 = null
    purchase_prob: np.ndarray     # (n_metrics,) weighted purchase mass
    pair_revenue: np.ndarray


def _evaluate_groups(groups: _Groups, prices: np.ndarray, n_metrics: int) -> _Evaluation:
    """Vectorized buyer choice under a curve, seller-favorable tie-breaking.

    Ties in surplus (within TIE_TOL, absorbing solver round-off) go to the
    highest price; a zero-surplus purchase beats walking away whenever its
    price is positive.
    """
    safe = np.where(groups.items < 0, 0, groups.items)
    item_prices = prices[safe]
    surplus = np.where(groups.mask, groups.values - item_prices, -np.inf)
    smax = surplus.max(axis=1)
    tied = surplus >= smax[:, None] - TIE_TOL
    pick_price = np.where(tied, item_prices, -np.inf)
    chosen = pick_price.argmax(axis=1)
    rows = np.arange(len(chosen))
    chosen_price = item_prices[rows, chosen]
    # walk away when the best surplus is negative, or zero with a free item
    buy = (smax > 0) | ((smax >= -TIE_TOL) & (chosen_price > 0))
    chosen = np.where(buy, chosen, -1)
    pair_rev = np.where(buy, chosen_price, 0.0) * groups.weight
    welfare = float(
        groups.weight @ np.maximum(np.where(groups.mask, groups.values, -np.inf).max(axis=1), 0.0)
    )
    purchase = np.zeros(n_metrics)
    bought_items = groups.items[rows[buy], chosen[buy]]
    np.add.at(purchase, bought_items, groups.weight[buy])
    return _Evaluation(float(pair_rev.sum()), welfare, chosen, purchase, pair_rev)


def _groups_for_mode(
    instance_pop: Population,
    sample,
    mode: str,
    rng: np.random.Generator | None,
    subset_rule: str,
) -> _Groups:
    if mode == "IS":
        return _compile_groups(instance_pop, [s.metrics for s in sample])
    if mode == "OOS":
        if rng is None:
            raise ValueError("OOS evaluation needs a random source")
        rule = OOS_SUBSET_RULES[subset_rule]
        return _compile_groups(instance_pop, [rule(s, rng) for s in sample])
    raise ValueError(f"mode must be IS or OOS, got {mode!r}")


def evaluate_revenue(
    curve: PriceCurve,
    population: Population,
    sample,
    mode: str = "IS",
    rng: np.random.Generator | None = None,
    subset_rule: str = "uniform-half",
) -> RevenueReport:
    """Expected revenue and welfare of a posted curve on a trajectory set.

    IS evaluates buyers on full trajectories; OOS first thins each
    trajectory by the configured subset rule (seeded), then evaluates
    identically. Welfare is the zero-price surplus on the same sets and
    normalizes the revenue fraction.
    """
    groups = _groups_for_mode(population, tuple(sample), mode, rng, subset_rule)
    ev = _evaluate_groups(groups, curve.prices, population.n_metrics)
    per_rev = np.zeros(population.n_types)
    per_wel = np.zeros(population.n_types)
    pair_wel = groups.weight * np.maximum(
        np.where(groups.mask, groups.values, -np.inf).max(axis=1), 0.0
    )
    np.add.at(per_rev, groups.type_of, ev.pair_revenue)
    np.add.at(per_wel, groups.type_of, pair_wel)
    frac = ev.revenue / ev.welfare if ev.welfare > 0 else 0.0
    return RevenueReport(ev.revenue, ev.welfare, frac, per_rev, per_wel)


# ---------------------------------------------------------------------------
# exact program


@dataclass(frozen=True)
class PricingModelIndex:
    """Variable layout of the pricing MIP, for extraction and warm starts."""

    groups: _Groups
    x: np.ndarray                      # (n_metrics,) variable ids
    z: tuple[tuple[int, ...], ...]     # per pair: item z ids (+ null last if present)
    y: tuple[tuple[int, ...], ...]     # per pair: item y ids
    a: np.ndarray                      # (n_pairs,)
    has_null: bool


def build_pricing_milp(instance: PricingInstance) -> MIPModel:
    model, _ = build_pricing_milp_indexed(instance)
    return model


def build_pricing_milp_indexed(
    instance: PricingInstance,
) -> tuple[MIPModel, PricingModelIndex]:
    """Assemble the price-curve MIP.

    Per (type, choice-set) pair: binaries z pick one item (SOS1 row,
    including a null item of value and price zero when walking away is
    allowed), a free variable a carries the chosen surplus, and y
    linearizes x*z. The objective is the weighted sum of chosen prices.
    Without the null option prices are left uncapped and single-item
    choice sets collapse to equalities, exposing the unboundedness of the
    literal formulation.
    """
    pop = instance.population
    groups = _compile_groups(pop, [s.metrics for s in instance.sample])
    n = pop.n_metrics
    big_m = instance.effective_big_m()
    allow = instance.allow_no_purchase

    b = LPBuilder()
    x_ub = big_m if allow else INF
    x_ids = np.array([b.add_var(0.0, x_ub) for _ in range(n)])
    z_ids: list[tuple[int, ...]] = []
    y_ids: list[tuple[int, ...]] = []
    a_ids = np.zeros(len(groups.weight), dtype=int)
    binaries: list[int] = []
    sos1: list[tuple[int, ...]] = []

    for p in range(len(groups.weight)):
        s = groups.sets[groups.set_of[p]]
        vals = groups.values[p, : len(s)]
        w = groups.weight[p]
        a = b.add_var(-INF, INF)
        a_ids[p] = a
        zs = tuple(b.add_var(0.0, 1.0) for _ in s)
        z_all = zs
        if allow:
            z_null = b.add_var(0.0, 1.0)
            z_all = zs + (z_null,)
        ys = tuple(b.add_var(0.0, INF, objective=w) for _ in s)
        z_ids.append(z_all)
        y_ids.append(ys)
        binaries.extend(z_all)
        sos1.append(z_all)
        b.add_row({z: 1.0 for z in z_all}, "=", 1.0)

        if not allow and len(s) == 1:
            # forced choice: drop the big-M machinery entirely
            q, v = s[0], vals[0]
            b.add_row({a: 1.0, x_ids[q]: 1.0}, "=", float(v))
            b.add_row({ys[0]: 1.0, x_ids[q]: -1.0}, "=", 0.0)
            continue

        for j, (q, v) in enumerate(zip(s, vals)):
            z, y = zs[j], ys[j]
            b.add_row({a: 1.0, x_ids[q]: 1.0}, ">=", float(v))
            b.add_row({a: 1.0, x_ids[q]: 1.0, z: big_m}, "<=", float(v) + big_m)
            b.add_row({y: 1.0, x_ids[q]: -1.0}, "<=", 0.0)
            b.add_row({y: 1.0, z: -big_m}, "<=", 0.0)
            b.add_row({y: 1.0, x_ids[q]: -1.0, z: -big_m}, ">=", -big_m)
        if allow:
            b.add_row({a: 1.0}, ">=", 0.0)
            b.add_row({a: 1.0, z_all[-1]: big_m}, "<=", big_m)

    model = MIPModel(b.build(), tuple(binaries), tuple(sos1))
    index = PricingModelIndex(groups, x_ids, tuple(z_ids), tuple(y_ids), a_ids, allow)
    return model, index


def warm_start_vector(
    model: MIPModel, index: PricingModelIndex, curve: PriceCurve, n_metrics: int
) -> np.ndarray:
    """Feasible full assignment for a heuristic curve, matching the
    evaluator's seller-favorable choices."""
    ev = _evaluate_groups(index.groups, curve.prices, n_metrics)
    x = np.zeros(model.lp.n_vars)
    x[index.x] = curve.prices
    for p, zs in enumerate(index.z):
        s = index.groups.sets[index.groups.set_of[p]]
        surplus = index.groups.values[p, : len(s)] - curve.prices[list(s)]
        slot = int(ev.chosen[p])
        if slot < 0 and not index.has_null:
            # the literal formulation forces a choice even at negative surplus
            slot = int(np.argmax(surplus))
        if slot < 0:
            x[zs[-1]] = 1.0
            a_val = max(float(surplus.max()), 0.0)
        else:
            a_val = float(surplus[slot])
            if index.has_null:
                a_val = max(a_val, 0.0)
            x[zs[slot]] = 1.0
            x[index.y[p][slot]] = curve.prices[s[slot]]
        x[index.a[p]] = a_val
    return x


@dataclass
class PricingResult:
    curve: PriceCurve
    objective: float
    mip: MIPSolution
    warm_objective: float


def solve_optimal_pricing(
    instance: PricingInstance,
    config: MIPConfig | None = None,
    full_result: bool = False,
):
    """Exact price curve via branch-and-bound, warm-started by jiggle.

    The warm start makes the returned objective at least the jiggle
    curve's in-sample revenue even when the budget runs out, and the
    returned objective always equals the in-sample revenue of the
    returned curve under seller-favorable tie-breaking.
    """
    model, index = build_pricing_milp_indexed(instance)
    warm_curve = jiggle_pricing(instance)
    warm = warm_start_vector(model, index, warm_curve, instance.population.n_metrics)
    cfg = replace(config or MIPConfig(), warm_start=warm)
    sol = solve_mip(model, cfg)
    curve = PriceCurve(np.maximum(sol.x[index.x], 0.0))
    if full_result:
        warm_obj = float(model.lp.objective @ warm)
        return PricingResult(curve, float(sol.objective), sol, warm_obj)
    return curve


def brute_force_optimal(
    instance: PricingInstance, cap: int = 100_000, full_result: bool = False
):
    """Exactness oracle: enumerate one chosen item per (type, set) pair.

    Each assignment induces an LP over prices (chosen item weakly beats
    every alternative, chosen surplus nonnegative); the best feasible
    assignment's curve is optimal. Guarded by a product cap.
    """
    pop = instance.population
    groups = _compile_groups(pop, [s.metrics for s in instance.sample])
    n = pop.n_metrics
    n_pairs = len(groups.weight)
    options = []
    total = 1
    for p in range(n_pairs):
        s = groups.sets[groups.set_of[p]]
        opts = list(range(len(s)))
        if instance.allow_no_purchase:
            opts.append(-1)
        options.append(opts)
        total *= len(opts)
        if total > cap:
            raise ValueError(f"assignment space exceeds cap ({cap})")

    big_m = instance.effective_big_m()
    best_obj, best_x = -INF, None
    import itertools

    for assign in itertools.product(*options):
        b = LPBuilder()
        x_ids = [b.add_var(0.0, big_m if instance.allow_no_purchase else INF) for _ in range(n)]
        obj_w = np.zeros(n)
        for p, choice in enumerate(assign):
            s = groups.sets[groups.set_of[p]]
            vals = groups.values[p, : len(s)]
            if choice == -1:
                for q, v in zip(s, vals):
                    b.add_row({x_ids[q]: 1.0}, ">=", float(v))
                continue
            cq, cv = s[choice], vals[choice]
            obj_w[cq] += groups.weight[p]
            b.add_row({x_ids[cq]: 1.0}, "<=", float(cv))  # chosen surplus >= 0
            for j, (q, v) in enumerate(zip(s, vals)):
                if j == choice:
                    continue
                b.add_row({x_ids[cq]: 1.0, x_ids[q]: -1.0}, "<=", float(cv - v))
        for q in range(n):
            if obj_w[q]:
                b.set_objective(x_ids[q], float(obj_w[q]))
        sol = solve_lp(b.build())
        if sol.status == "optimal" and sol.objective > best_obj + 1e-12:
            best_obj, best_x = sol.objective, sol.x
    if best_x is None:
        raise ValueError("no feasible assignment (expected with the null option on)")
    curve = PriceCurve(np.maximum(best_x[:n], 0.0))
    if full_result:
        return curve, best_obj
    return curve


# ---------------------------------------------------------------------------
# heuristic schemes


def _sorted_values_per_metric(pop: Population) -> list[np.ndarray]:
    return [
        np.sort(np.array([t.values[q] for t in pop.types]))
        for q in range(pop.n_metrics)
    ]


def _independent_ranks(instance: PricingInstance) -> np.ndarray:
    """Per metric, the rank (into ascending type values) of the
    revenue-maximizing posted price; ties take the lower price."""
    pop = instance.population
    ranks = np.zeros(pop.n_metrics, dtype=int)
    for q, vals in enumerate(_sorted_values_per_metric(pop)):
        mass = np.array(
            [sum(pop.prior[i] for i, t in enumerate(pop.types) if t.values[q] >= p)
             for p in vals]
        )
        rev = vals * mass
        ranks[q] = int(np.argmax(rev > rev.max() - 1e-15))
    return ranks


def _curve_from_ranks(instance: PricingInstance, ranks: np.ndarray) -> PriceCurve:
    svals = _sorted_values_per_metric(instance.population)
    return PriceCurve(np.array([svals[q][r] for q, r in enumerate(ranks)]))


def independent_pricing(instance: PricingInstance) -> PriceCurve:
    """Per-metric revenue-maximizing posted price against the prior,
    each metric treated as an independent single item."""
    return _curve_from_ranks(instance, _independent_ranks(instance))


def _is_revenue(instance: PricingInstance, groups: _Groups, prices: np.ndarray) -> float:
    return _evaluate_groups(groups, prices, instance.population.n_metrics).revenue


def shift_pricing(instance: PricingInstance, full_result: bool = False):
    """Scan a common rank offset k applied to the independent prices.

    k = 0 reproduces independent pricing, so the in-sample revenue is
    never below it. Ties prefer |k| small, then k small.
    """
    pop = instance.population
    groups = _compile_groups(pop, [s.metrics for s in instance.sample])
    base = _independent_ranks(instance)
    nt = pop.n_types
    best = None
    for k in sorted(range(-nt, nt + 1), key=lambda k: (abs(k), k)):
        ranks = np.clip(base + k, 0, nt - 1)
        rev = _is_revenue(instance, groups, _curve_from_ranks(instance, ranks).prices)
        if best is None or rev > best[0] + 1e-15:
            best = (rev, k, ranks)
    rev, k, ranks = best
    curve = _curve_from_ranks(instance, ranks)
    if full_result:
        return curve, k, ranks
    return curve


def jiggle_pricing(instance: PricingInstance) -> PriceCurve:
    """Local search over single-metric rank moves, seeded by shift.

    From each kept node, raising the rank of high-purchase-probability
    metrics and lowering it for low-probability ones are the candidate
    moves; modifications that raise in-sample revenue are expanded
    best-first. At most |types|*|metrics| modifications are evaluated, so
    the result never falls below the shift curve's in-sample revenue.
    """
    pop = instance.population
    groups = _compile_groups(pop, [s.metrics for s in instance.sample])
    _, _, ranks0 = shift_pricing(instance, full_result=True)
    nt, n = pop.n_types, pop.n_metrics
    budget = nt * n

    def measure(ranks):
        curve = _curve_from_ranks(instance, ranks)
        ev = _evaluate_groups(groups, curve.prices, n)
        return ev.revenue, ev.purchase_prob

    rev0, prob0 = measure(ranks0)
    best_rev, best_ranks = rev0, ranks0
    visited = {tuple(ranks0)}
    counter = 0
    frontier = [(-rev0, 0, ranks0, prob0)]
    evaluated = 0
    while frontier and evaluated < budget:
        neg_rev, _, ranks, prob = heapq.heappop(frontier)
        parent_rev = -neg_rev
        up = sorted((q for q in range(n) if prob[q] > 0), key=lambda q: (-prob[q], q))
        down = sorted(range(n), key=lambda q: (prob[q], q))
        moves = []
        for i in range(max(len(up), len(down))):
            if i < len(up):
                moves.append((up[i], +1))
            if i < len(down):
                moves.append((down[i], -1))
        for q, d in moves:
            if evaluated >= budget:
                break
            r = int(np.clip(ranks[q] + d, 0, nt - 1))
            if r == ranks[q]:
                continue
            child = ranks.copy()
            child[q] = r
            key = tuple(child)
            if key in visited:
                continue
            visited.add(key)
            rev, cprob = measure(child)
            evaluated += 1
            if rev > parent_rev + 1e-15:
                counter += 1
                heapq.heappush(frontier, (-rev, counter, child, cprob))
                if rev > best_rev + 1e-15:
                    best_rev, best_ranks = rev, child
    return _curve_from_ranks(instance, best_ranks)
