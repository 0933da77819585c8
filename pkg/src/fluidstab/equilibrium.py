"""Equilibrium of the fluid model: rates, loads, drop and loss probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .network import P_CLIP, Link, Regime, Topology, link_drop_probability
from .protocols import W_MIN, WindowPolicy, eval_decrement, eval_increment, stack_exponents


class EquilibriumError(RuntimeError):
    pass


class NonConvergence(EquilibriumError):
    def __init__(self, iterations, residual):
        super().__init__(f"no convergence after {iterations} iterations (best residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class NoRoot(EquilibriumError):
    def __init__(self, lo, hi, message="no sign change on bracket"):
        super().__init__(f"{message}: w in [{lo:.6g}, {hi:.6g}]")
        self.bracket = (lo, hi)


class NoLossEquilibrium(EquilibriumError):
    """Loss never balances window growth: unbounded window growth under the fluid model."""


@dataclass(frozen=True)
class EquilibriumPoint:
    x_star: np.ndarray
    w_star: np.ndarray
    y_star: np.ndarray
    p_star: np.ndarray
    q_star: np.ndarray
    residual: float
    iterations: int = 0


def _drops(topology: Topology, y: np.ndarray) -> np.ndarray:
    return np.array([float(link_drop_probability(l, v)) for l, v in zip(topology.links, y)])


def _losses(A: np.ndarray, p: np.ndarray) -> np.ndarray:
    # 0.0 - expm1 rather than -expm1: a loss-free route must give +0, not -0
    return 0.0 - np.expm1(A.T @ np.log1p(-p))


class _Rates:
    """Maps link drop probabilities to per-source equilibrium rates."""

    def __init__(self, topology: Topology):
        self.A = topology.incidence()
        self.T = topology.rtts
        self.alpha, self.m, self.beta, self.n = stack_exponents(s.policy for s in topology.sources)
        if np.any(self.m + self.n <= 0):
            raise EquilibriumError("a policy has i/(i+d) non-decreasing in w")

    def __call__(self, p: np.ndarray) -> np.ndarray:
        q = _losses(self.A, p)
        with np.errstate(divide="ignore", over="ignore"):
            w = (self.alpha * (1.0 - q) / (self.beta * q)) ** (1.0 / (self.m + self.n))
        return np.maximum(w, W_MIN) / self.T


def _solve_link(topology, rates, p, l):
    """Gauss-Seidel step: load on link l consistent with the other links' drops."""
    link = topology.links[l]
    on = rates.A[l] > 0
    trial = p.copy()

    def mismatch(log_y):
        y = np.exp(log_y)
        trial[l] = float(link_drop_probability(link, y))
        return log_y - np.log(np.sum(rates(trial)[on]))

    if link.regime is Regime.INTERMEDIATE:
        trial[l] = 0.0
        demand = np.sum(rates(trial)[on])
        if np.isfinite(demand) and demand <= link.capacity:
            return demand
        lo, hi = np.log(link.capacity), np.log(link.capacity / (1.0 - P_CLIP))
    else:
        # keep p(lo) representable (>= 1e-300) so the bracket end is finite
        lo = np.log(link.capacity) - min(60.0, 690.0 / link.effective_buffer)
        hi = np.log(link.capacity)
    if mismatch(lo) > 0:
        return np.exp(lo)
    if mismatch(hi) < 0:
        return np.exp(hi)
    return np.exp(optimize.brentq(mismatch, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500))


def equilibrium_residual(topology: Topology, point: EquilibriumPoint) -> float:
    """Worst relative violation of i = q(i+d) per source plus load balance per link."""
    worst = 0.0
    for j, src in enumerate(topology.sources):
        i = float(eval_increment(src.policy, point.w_star[j]))
        d = float(eval_decrement(src.policy, point.w_star[j]))
        worst = max(worst, abs(i - point.q_star[j] * (i + d)) / (i + d))
    A = topology.incidence()
    caps = np.array([l.capacity for l in topology.links])
    balance = np.max(np.abs(point.y_star - A @ point.x_star) / caps) if len(caps) else 0.0
    return worst + float(balance)


def _point_from_loads(topology, rates, y):
    p = _drops(topology, y)
    x = rates(p)
    y_star = rates.A @ x
    p_star = _drops(topology, y_star)
    q_star = _losses(rates.A, p_star)
    point = EquilibriumPoint(x, x * rates.T, y_star, p_star, q_star, 0.0)
    return point


def solve_equilibrium(topology: Topology, tol: float = 1e-10, max_iter: int = 500) -> EquilibriumPoint:
    """Joint equilibrium over all links.

    Loads are solved link by link (Gauss-Seidel, each step an exact monotone
    root find in log-load), then polished with a Newton-type solve on the
    vector of log-loads when the sweep stalls above tolerance.
    """
    rates = _Rates(topology)
    caps = np.array([l.capacity for l in topology.links])
    y = np.array([0.9 * c if l.is_small else 1.1 * c for c, l in zip(caps, topology.links)])
    p = _drops(topology, y)
    best = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        y_old = y.copy()
        for l in range(len(caps)):
            y[l] = _solve_link(topology, rates, p, l)
            p[l] = float(link_drop_probability(topology.links[l], y[l]))
        change = np.max(np.abs(y - y_old) / y_old)
        if change < 1e-13:
            break
        if it % 20 == 0:
            point = _point_from_loads(topology, rates, y)
            if np.all(np.isfinite(point.x_star)):
                best = min(best, equilibrium_residual(topology, point))
                if best <= tol:
                    break
    point = _point_from_loads(topology, rates, y)
    if not np.all(np.isfinite(point.x_star)) or np.any(point.q_star <= 0):
        raise NoLossEquilibrium("some source sees no loss at equilibrium: unbounded window growth")
    residual = equilibrium_residual(topology, point)
    if residual > tol:
        def F(log_y):
            p_ = _drops(topology, np.exp(log_y))
            return log_y - np.log(rates.A @ rates(p_))

        sol = optimize.root(F, np.log(y), method="hybr", options={"xtol": 1e-15})
        if np.all(np.isfinite(sol.x)):
            cand = _point_from_loads(topology, rates, np.exp(sol.x))
            if np.all(np.isfinite(cand.x_star)) and np.all(cand.q_star > 0):
                r = equilibrium_residual(topology, cand)
                if r < residual:
                    point, residual = cand, r
    if residual > tol:
        raise NonConvergence(it, residual)
    return EquilibriumPoint(point.x_star, point.w_star, point.y_star, point.p_star,
                            point.q_star, residual, it)


def solve_single_link(policy: WindowPolicy, T: float, link: Link, w_cap: float = 2.0):
    """Bisection for one flow on one link: i/(i+d) = p(w/T). Returns (w*, p*)."""

    def g(w):
        i = float(eval_increment(policy, w))
        d = float(eval_decrement(policy, w))
        return i / (i + d) - float(link_drop_probability(link, w / T))

    lo = W_MIN
    for attempt in range(2):
        hi = link.capacity * T * w_cap * (2.0**attempt)
        if g(lo) > 0 > g(hi):
            break
    else:
        if link.regime is Regime.INTERMEDIATE and g(hi) > 0:
            raise NoLossEquilibrium(
                f"link {link.id}: loss never balances window growth up to w={hi:.6g}")
        raise NoRoot(lo, hi)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) <= 1e-12 and hi - lo <= 1e-12 * mid:
            break
        if gm > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * mid:
            break
    w = 0.5 * (lo + hi)
    return w, float(link_drop_probability(link, w / T))
