"""Buyer side of the market: types, utilities and optimal stopping.

A buyer watching the revealed metric sequence faces an optimal-stopping
problem: keep paying the per-period search cost for a chance at a better
metric, or stop and buy the best surplus seen so far (or walk away).
The policy is computed by backward induction over states
(best-seen item, current metric, period); a virtual "null" best-seen item
with zero surplus and zero price models the walk-away option.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .grid import MarkovChain, Trajectory

PRIOR_TOL = 1e-9


@dataclass(frozen=True)
class BuyerType:
    """Valuation vector over grid indices."""

    id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or np.any(v < 0):
            raise ValueError("valuations must be a nonnegative vector")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Population:
    types: tuple[BuyerType, ...]
    prior: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prior, dtype=float)
        if p.shape != (len(self.types),):
            raise ValueError("prior length must match the number of types")
        if np.any(p < 0) or abs(p.sum() - 1.0) > PRIOR_TOL:
            raise ValueError("prior must be a probability vector")
        if len({len(t.values) for t in self.types}) != 1:
            raise ValueError("all types must share one grid size")
        p.flags.writeable = False
        object.__setattr__(self, "prior", p)
        object.__setattr__(self, "types", tuple(self.types))

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def n_metrics(self) -> int:
        return len(self.types[0].values)

    @property
    def value_bound(self) -> float:
        """b: the largest valuation any type assigns to any metric."""
        return max(float(t.values.max()) for t in self.types)


@dataclass(frozen=True)
class SearchCost:
    per_period: float = 0.0

    def __post_init__(self):
        if self.per_period < 0:
            raise ValueError("search cost must be nonnegative")


@dataclass(frozen=True)
class PriceCurve:
    """Posted price per grid metric, identical for every buyer."""

    prices: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float)
        if p.ndim != 1 or np.any(p < 0):
            raise ValueError("prices must be a nonnegative vector")
        p.flags.writeable = False
        object.__setattr__(self, "prices", p)

    def __len__(self) -> int:
        return len(self.prices)

    def shifted(self, delta: float) -> "PriceCurve":
        return PriceCurve(np.maximum(self.prices + delta, 0.0))

    def to_json(self) -> str:
        return json.dumps({"prices": self.prices.tolist()})

    @staticmethod
    def from_json(text: str) -> "PriceCurve":
        return PriceCurve(np.array(json.loads(text)["prices"]))


@dataclass(frozen=True)
class PolicyTable:
    """Backward-induction value and action tables.

    Axis 0 is the best-seen item with one extra trailing index for the
    null outside option; axis 1 the current metric; axis 2 the period.
    ``stop[q1, q2, t]`` is True where stopping is weakly preferred.
    ``best_update[q1, q]`` is the best-seen state after also observing q
    (raw surplus comparison, price breaks ties in the seller's favor).
    """

    phi: np.ndarray
    stop: np.ndarray
    best_update: np.ndarray
    state_surplus: np.ndarray
    state_price: np.ndarray
    initial_value: float
    cost: float

    @property
    def horizon(self) -> int:
        return self.phi.shape[2]

    @property
    def null_state(self) -> int:
        return self.phi.shape[0] - 1

    def stop_value(self, q1: int, t: int) -> float:
        """Utility of stopping at period t+1 (0-indexed t) in state q1."""
        return max(self.state_surplus[q1], 0.0) - self.cost * (t + 1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "shape": list(self.phi.shape),
                "phi": self.phi.ravel().tolist(),
                "stop": self.stop.ravel().astype(int).tolist(),
                "initial_value": self.initial_value,
            }
        )


@dataclass(frozen=True)
class StoppingOutcome:
    stop_time: int
    purchased: int | None
    payment: float
    search_cost_paid: float
    buyer_utility: float


def _check_dims(buyer: BuyerType, price: PriceCurve, chain: MarkovChain) -> None:
    n = chain.n_states
    if len(buyer.values) != n or len(price) != n:
        raise ValueError("valuation/price length must match the chain's grid")


def _state_vectors(buyer: BuyerType, price: PriceCurve):
    """Surplus and price per best-seen state, null appended last."""
    sigma = np.append(buyer.values - price.prices, 0.0)
    prices = np.append(price.prices, 0.0)
    return sigma, prices


def _best_update_matrix(sigma: np.ndarray, prices: np.ndarray, n: int) -> np.ndarray:
    """(n+1, n) table: state after observing metric q from state q1."""
    s1 = sigma[:, None]
    p1 = prices[:, None]
    sq = sigma[None, :n]
    pq = prices[None, :n]
    replace = (sq > s1) | ((sq == s1) & (pq > p1))
    q_idx = np.broadcast_to(np.arange(n), (len(sigma), n))
    q1_idx = np.broadcast_to(np.arange(len(sigma))[:, None], (len(sigma), n))
    return np.where(replace, q_idx, q1_idx).astype(int)


def solve_optimal_stopping(
    buyer: BuyerType,
    price: PriceCurve,
    chain: MarkovChain,
    cost: SearchCost,
) -> PolicyTable:
    """Backward induction over (best-seen, current metric, period).

    Stop value in state q1 at period t is max(surplus(q1), 0) - c*t: the
    walk-away option is always on the table. The best-seen update compares
    raw surpluses only; the period cost is sunk and common to both arms of
    the comparison. Continuation takes expectation over the next metric.
    Ties between stopping and continuing resolve to stop (fewer cost
    periods at equal value).
    """
    _check_dims(buyer, price, chain)
    n, big_t = chain.n_states, chain.horizon
    c = cost.per_period
    sigma, prices = _state_vectors(buyer, price)
    upd = _best_update_matrix(sigma, prices, n)
    qcols = np.arange(n)

    stop_gain = np.maximum(sigma, 0.0)  # stop value + c*t
    phi = np.empty((n + 1, n, big_t))
    stop = np.empty((n + 1, n, big_t), dtype=bool)
    phi[:, :, big_t - 1] = stop_gain[:, None] - c * big_t
    stop[:, :, big_t - 1] = True
    for t in range(big_t - 2, -1, -1):
        nxt = phi[:, :, t + 1][upd, qcols]          # (n+1, n): value if q arrives
        cont = nxt @ chain.transitions[t].T         # expectation over q | q2
        sv = stop_gain[:, None] - c * (t + 1)
        phi[:, :, t] = np.maximum(sv, cont)
        stop[:, :, t] = sv >= cont

    first = phi[:, :, 0][upd[n], qcols]
    initial_value = float(chain.initial @ first)
    phi.flags.writeable = False
    stop.flags.writeable = False
    return PolicyTable(
        phi=phi,
        stop=stop,
        best_update=upd,
        state_surplus=sigma,
        state_price=prices,
        initial_value=initial_value,
        cost=c,
    )


def simulate_buyer(
    buyer: BuyerType,
    policy: PolicyTable,
    trajectory: Trajectory,
    price: PriceCurve,
    cost: SearchCost,
) -> StoppingOutcome:
    """Walk one trajectory under the policy's stop table."""
    big_t = policy.horizon
    if len(trajectory) != big_t:
        raise ValueError("trajectory length must equal the policy horizon")
    state = policy.null_state
    stop_time = big_t
    for t, q in enumerate(trajectory.metrics):
        state = int(policy.best_update[state, q])
        if policy.stop[state, q, t] or t == big_t - 1:
            stop_time = t + 1
            break
    surplus = policy.state_surplus[state]
    purchased = state if (surplus > 0 and state != policy.null_state) else None
    payment = float(policy.state_price[state]) if purchased is not None else 0.0
    paid_cost = cost.per_period * stop_time
    utility = (surplus if purchased is not None else 0.0) - paid_cost
    return StoppingOutcome(stop_time, purchased, payment, paid_cost, float(utility))


def best_choice_full_trajectory(
    buyer: BuyerType, price: PriceCurve, trajectory: Trajectory
) -> int | None:
    """Surplus-maximizing metric over the whole trajectory, if any.

    Returns None when every surplus is negative (the buyer walks away).
    Surplus ties break toward the higher price; this matches the revenue
    maximizer's implicit selection in the pricing program.
    """
    best = None
    for q in set(trajectory.metrics):
        s = buyer.values[q] - price.prices[q]
        if s < 0:
            continue
        if best is None:
            best = q
            continue
        bs = buyer.values[best] - price.prices[best]
        if s > bs or (s == bs and price.prices[q] > price.prices[best]):
            best = q
    return best


@dataclass(frozen=True)
class ReservationValues:
    """Surplus thresholds z[t, q2] above which stopping is preferred.

    -inf marks "stop regardless" (every state stops, e.g. the final
    period), +inf marks "never stop here". Thresholds are in surplus
    units, measured on the effective best-seen surplus max(v-x, 0).
    """

    thresholds: np.ndarray  # (T, |Q|)

    def per_round(self, t: int) -> np.ndarray:
        return self.thresholds[t - 1]


def reservation_values(
    buyer: BuyerType,
    price: PriceCurve,
    chain: MarkovChain,
    cost: SearchCost,
    policy: PolicyTable | None = None,
) -> ReservationValues:
    """Extract per-(period, current-metric) stop thresholds from the DP.

    The stop region is an upper set in the best-seen surplus (the stop
    value rises one-for-one with surplus, the continuation at most
    one-for-one), so the smallest stopping surplus characterizes the
    action table exactly.
    """
    if policy is None:
        policy = solve_optimal_stopping(buyer, price, chain, cost)
    n, big_t = chain.n_states, chain.horizon
    null = policy.null_state
    eff = np.maximum(policy.state_surplus, 0.0)
    out = np.full((big_t, n), np.inf)
    for t in range(big_t):
        for q2 in range(n):
            if policy.stop[null, q2, t]:
                out[t, q2] = -np.inf
                continue
            stops = [eff[q1] for q1 in range(n) if policy.stop[q1, q2, t] and eff[q1] > 0]
            if stops:
                out[t, q2] = min(stops)
    return ReservationValues(out)


@dataclass(frozen=True)
class StoppingDistribution:
    """Exact stop-time law of one type under a posted curve.

    ``joint[t, q1, q2]`` is the probability of stopping at period t+1 with
    best-seen state q1 (null last) and current metric q2; ``probs`` are its
    per-period sums. ``expected_payment``/``expected_utility`` aggregate the
    purchase rule (buy iff surplus > 0) over the same table.
    """

    probs: np.ndarray
    joint: np.ndarray
    expected_payment: float
    expected_utility: float

    @property
    def horizon(self) -> int:
        return len(self.probs)


def stopping_distribution(
    buyer: BuyerType,
    price: PriceCurve,
    chain: MarkovChain,
    cost: SearchCost,
    policy: PolicyTable | None = None,
) -> StoppingDistribution:
    """Forward recursion over (best-seen, current metric) pairs.

    Propagates the joint law of the not-yet-stopped buyer one period at a
    time; the stop test at each state is the DP's surplus-threshold rule,
    so the result matches simulation exactly up to Monte-Carlo noise.
    """
    if policy is None:
        policy = solve_optimal_stopping(buyer, price, chain, cost)
    n, big_t = chain.n_states, chain.horizon
    upd = policy.best_update
    qcols = np.arange(n)

    p = np.zeros((n + 1, n))
    np.add.at(p, (upd[policy.null_state, qcols], qcols), chain.initial)

    probs = np.zeros(big_t)
    joint = np.zeros((big_t, n + 1, n))
    pay = 0.0
    util = 0.0
    buy = policy.state_surplus > 0
    buy[policy.null_state] = False
    for t in range(big_t):
        mask = policy.stop[:, :, t] if t < big_t - 1 else np.ones_like(p, dtype=bool)
        stopped = np.where(mask, p, 0.0)
        joint[t] = stopped
        probs[t] = stopped.sum()
        by_state = stopped.sum(axis=1)
        pay += float(by_state @ (policy.state_price * buy))
        util += float(
            by_state @ (policy.state_surplus * buy) - probs[t] * cost.per_period * (t + 1)
        )
        if t == big_t - 1:
            break
        carry = np.where(mask, 0.0, p)
        w = carry @ chain.transitions[t]  # (n+1, n): mass arriving at metric q
        p = np.zeros((n + 1, n))
        np.add.at(p, (upd[:, qcols], np.broadcast_to(qcols, (n + 1, n))), w)
    return StoppingDistribution(probs, joint, pay, util)


def write_stopping_distributions_csv(path, entries) -> None:
    """Rows (type, t, probability) for an iterable of (type_id, distribution)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["type", "t", "probability"])
        for type_id, dist in entries:
            for t, pr in enumerate(dist.probs, start=1):
                w.writerow([type_id, t, f"{pr:.12g}"])
