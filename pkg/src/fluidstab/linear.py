"""Linearization about equilibrium, stability conditions and frequency scans.

The linearized source dynamics are

    T_j u_j'(t) = -a_j u_j(t) - sum_l g_jl sum_{k: l in R_k} u_k(t - T_j - T_kl + T_jl)

with a_j = -x_j i_j' + x_j q_j (i_j' + d_j') and the per-link gain

    g_jl = (x_j i_j / q_j) * dp_l/dy * prod_{m in R_j, m != l} (1 - p_m).

In the Laplace domain u = -L(s) u, where the return ratio is

    L(s)_jk = e^{-s T_j} / (a_j + s T_j) * sum_l g_jl e^{s T_jl} e^{-s T_kl}.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .equilibrium import EquilibriumPoint
from .network import P_CLIP, Regime, Topology, link_drop_derivative
from .protocols import Kind, eval_increment, eval_rate_derivatives


class LinearizationError(ValueError):
    pass


class NarrowGridWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LinearizedSystem:
    topology: Topology
    eq: EquilibriumPoint
    a: np.ndarray            # (S,) self coefficients
    T: np.ndarray            # (S,) round-trip times
    gain: np.ndarray         # (S, L) g_jl, zero off-route
    fwd: np.ndarray          # (S, L) forward delays T_jl
    on_route: np.ndarray     # (S, L) bool
    i_star: np.ndarray       # (S,) increment at equilibrium window

    @property
    def n_sources(self) -> int:
        return len(self.a)

    def coupling_terms(self) -> list[tuple[int, int, int, float, float]]:
        """(j, k, l, coefficient, delay) for every delayed coupling u_k -> u_j via link l.

        The k == j entries are the b_j terms, the rest the c_jk terms.
        """
        terms = []
        S, L = self.gain.shape
        for j in range(S):
            for l in range(L):
                if not self.on_route[j, l]:
                    continue
                for k in range(S):
                    if self.on_route[k, l]:
                        delay = self.T[j] + self.fwd[k, l] - self.fwd[j, l]
                        terms.append((j, k, l, float(self.gain[j, l]), float(delay)))
        return terms

    def source_gain(self) -> np.ndarray:
        """Row sums sum_l g_jl y_l / x_j: the frequency-independent loop gain per source."""
        return (self.gain @ self.eq.y_star) / self.eq.x_star


def linearize(topology: Topology, eq: EquilibriumPoint) -> LinearizedSystem:
    if eq.residual > 1e-8:
        raise LinearizationError(f"equilibrium residual {eq.residual:.2e} exceeds 1e-8")
    S, L = len(topology.sources), len(topology.links)
    idx = topology.link_index
    x, q = eq.x_star, eq.q_star
    T = topology.rtts
    a = np.empty(S)
    i_star = np.empty(S)
    for j, src in enumerate(topology.sources):
        di, dd = eval_rate_derivatives(src.policy, x[j], T[j])
        a[j] = -x[j] * di + x[j] * q[j] * (di + dd)
        i_star[j] = eval_increment(src.policy, eq.w_star[j])

    dp = np.zeros(L)
    for l, link in enumerate(topology.links):
        y = eq.y_star[l]
        if link.regime is Regime.INTERMEDIATE:
            if abs(y - link.capacity) <= 1e-9 * link.capacity:
                raise LinearizationError(f"link {link.id}: load sits on the drop-law kink y=C")
            dp[l] = link_drop_derivative(link, y) if y > link.capacity else 0.0
        else:
            if eq.p_star[l] >= P_CLIP:
                raise LinearizationError(f"link {link.id}: drop probability saturated")
            dp[l] = link_drop_derivative(link, y)

    on = np.zeros((S, L), dtype=bool)
    fwd = np.zeros((S, L))
    gain = np.zeros((S, L))
    for j, src in enumerate(topology.sources):
        for lid, t in zip(src.route, src.forward_delays):
            l = idx[lid]
            on[j, l] = True
            fwd[j, l] = t
            others = (1.0 - q[j]) / (1.0 - eq.p_star[l])
            gain[j, l] = x[j] * i_star[j] / q[j] * dp[l] * others
    return LinearizedSystem(topology, eq, a, T, gain, fwd, on, i_star)


# ---------------------------------------------------------------- conditions

class Verdict(str, enum.Enum):
    HOLDS = "SufficientHolds"
    VIOLATED = "SufficientViolated"


_INCREMENT_LABEL = {
    Kind.RENO: "1/w_j",
    Kind.COMPOUND: "alpha*w_j^(k-1)",
    Kind.SCALABLE: "a",
    Kind.POWERLAW: "alpha*w_j^(-m)",
}
_VARIANT_LABEL = {
    Kind.RENO: "TCP Reno",
    Kind.COMPOUND: "Compound TCP",
    Kind.SCALABLE: "Scalable TCP",
    Kind.POWERLAW: "Generalized TCP",
}


@dataclass
class ConditionRow:
    source: str
    variant: str
    buffer_class: str
    label: str
    n_bottlenecks: int
    value: float
    threshold: float
    margin: float
    a: float
    necessary_ok: bool

    @property
    def holds(self) -> bool:
        return self.margin < 1.0 and self.necessary_ok


@dataclass
class StabilityReport:
    rows: list[ConditionRow]
    verdict: Verdict

    @property
    def margins(self) -> np.ndarray:
        return np.array([r.margin for r in self.rows])

    @property
    def n_bottlenecks(self) -> np.ndarray:
        return np.array([r.n_bottlenecks for r in self.rows])

    @property
    def necessary_ok(self) -> bool:
        return all(r.necessary_ok for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "necessary_ok": self.necessary_ok,
            "max_margin": float(np.max(self.margins)) if self.rows else None,
            "sources": [dict(r.__dict__) for r in self.rows],
        }


def necessary_condition(linsys: LinearizedSystem) -> tuple[np.ndarray, np.ndarray]:
    """Self-damping a_j and whether a_j > 0, per source."""
    return linsys.a.copy(), linsys.a > 0


def sufficient_condition(linsys: LinearizedSystem) -> StabilityReport:
    """Per-source decentralized (small buffer) or N_j-aware (intermediate) conditions.

    Only links carrying loss at equilibrium count as bottlenecks. Routes that
    mix small and intermediate bottlenecks fall back to the row-sum form
    sum_l g_jl y_l / x_j < pi/2, which both pure forms imply.
    """
    topo, eq = linsys.topology, linsys.eq
    idx = topo.link_index
    kappa = linsys.source_gain()
    _, ok = necessary_condition(linsys)
    rows = []
    for j, src in enumerate(topo.sources):
        links = [topo.links[idx[lid]] for lid in src.route if eq.p_star[idx[lid]] > 0]
        n_j = len(links)
        inc = float(linsys.i_star[j])
        kind = src.policy.kind
        lhs = _INCREMENT_LABEL[kind]
        if n_j and all(l.is_small for l in links):
            b_eff = max(l.effective_buffer for l in links)
            bursty = any(l.regime is Regime.SMALL_BURSTY for l in links)
            value, threshold = inc, math.pi / (2.0 * b_eff)
            cls = "small_bursty" if bursty else "small"
            label = f"{lhs} < pi*M/(2B)" if bursty else f"{lhs} < pi/(2B)"
        elif n_j and all(not l.is_small for l in links):
            q = float(eq.q_star[j])
            value, threshold = inc * (1.0 - q) / q, math.pi / (2.0 * n_j)
            cls = "intermediate"
            label = f"{lhs} < pi/(2N_j) * q_j/(1-q_j)"
        else:
            value, threshold = float(kappa[j]), math.pi / 2.0
            cls = "mixed"
            label = "sum_l g_jl y_l / x_j < pi/2"
        rows.append(ConditionRow(src.id, _VARIANT_LABEL[kind], cls, label, n_j, value,
                                 threshold, value / threshold, float(linsys.a[j]), bool(ok[j])))
    holds = all(r.holds for r in rows)
    return StabilityReport(rows, Verdict.HOLDS if holds else Verdict.VIOLATED)


# ---------------------------------------------------------------- frequency domain

def _loop_factor(linsys: LinearizedSystem, omega: np.ndarray) -> np.ndarray:
    s = 1j * omega[:, None]
    return np.exp(-s * linsys.T) / (linsys.a + s * linsys.T)


def return_ratio_batch(linsys: LinearizedSystem, omega) -> np.ndarray:
    """L(i omega) for a vector of frequencies, shape (n, S, S)."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(omega == 0) and np.any(linsys.a == 0):
        raise ZeroDivisionError("return ratio has a pole at omega=0 when some a_j = 0")
    w = omega[:, None, None]
    K = linsys.gain * np.exp(1j * w * linsys.fwd)                       # (n, S, L)
    R = (linsys.on_route * np.exp(-1j * w * linsys.fwd)).transpose(0, 2, 1)  # (n, L, S)
    h = _loop_factor(linsys, omega)
    return h[:, :, None] * (K @ R)


def return_ratio(linsys: LinearizedSystem, omega: float) -> np.ndarray:
    return return_ratio_batch(linsys, [omega])[0]


def routing_weighting_bound(linsys: LinearizedSystem) -> float:
    """|| Y^-1 R(i omega) diag(x) ||_inf; delays drop out because |e^{-i omega T}| = 1."""
    x, y = linsys.eq.x_star, linsys.eq.y_star
    A = linsys.on_route.T
    return float(np.max((A @ x) / y))


def spectral_bound(linsys: LinearizedSystem, omega: float) -> tuple[float, float]:
    """(row-sum bound, exact spectral radius) of L(i omega)."""
    bound, radius = _bounds(linsys, np.array([float(omega)]))
    return float(bound[0]), float(radius[0])


def _bounds(linsys, omega, Ls=None):
    if Ls is None:
        Ls = return_ratio_batch(linsys, omega)
    h = np.abs(_loop_factor(linsys, omega))
    bound = np.max(h * linsys.source_gain(), axis=1) * routing_weighting_bound(linsys)
    radius = np.max(np.abs(np.linalg.eigvals(Ls)), axis=1)
    return bound, radius


@dataclass
class FrequencyGrid:
    omega_lo: float | None = None
    omega_hi: float | None = None
    n: int = 10_000

    def resolve(self, T: np.ndarray) -> np.ndarray:
        lo = self.omega_lo if self.omega_lo is not None else 1e-3 / np.max(T)
        hi = self.omega_hi if self.omega_hi is not None else 1e3 / np.min(T)
        if not 0 < lo < hi:
            raise ValueError(f"bad frequency range [{lo}, {hi}]")
        return np.geomspace(lo, hi, int(self.n))


@dataclass
class Crossing:
    omega: float
    value: complex
    locus: int


@dataclass
class NyquistScan:
    omega: np.ndarray
    eigenvalues: np.ndarray       # (n, S), columns follow continuous loci
    row_sum_bound: np.ndarray
    exact_radius: np.ndarray
    encirclements: int
    crossings: list[Crossing] = field(default_factory=list)
    winding_angle: float = 0.0
    narrow_grid: bool = False

    def leftmost_crossing(self) -> Crossing | None:
        neg = [c for c in self.crossings if c.value.real < 0]
        return min(neg, key=lambda c: c.value.real) if neg else None

    def write_csv(self, path) -> None:
        S = self.eigenvalues.shape[1]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            header = ["omega"]
            for i in range(S):
                header += [f"re_lambda_{i}", f"im_lambda_{i}"]
            out.writerow(header + ["row_sum_bound"])
            for k, w in enumerate(self.omega):
                row = [repr(float(w))]
                for i in range(S):
                    lam = self.eigenvalues[k, i]
                    row += [repr(float(lam.real)), repr(float(lam.imag))]
                out.writerow(row + [repr(float(self.row_sum_bound[k]))])


def _track(eigs: np.ndarray) -> np.ndarray:
    """Reorder columns so each follows its nearest neighbour at the previous frequency."""
    out = eigs.copy()
    if eigs.shape[1] == 1:
        return out
    for k in range(1, len(out)):
        cost = np.abs(out[k - 1][:, None] - eigs[k][None, :])
        _, cols = linear_sum_assignment(cost)
        out[k] = eigs[k][cols]
    return out


def _det_phase(linsys, omega):
    Ls = return_ratio_batch(linsys, omega)
    eye = np.eye(linsys.n_sources)
    return np.angle(np.linalg.det(eye + Ls)), Ls


def _winding(linsys, omega, max_levels=6):
    """Unwrapped phase change of det(I + L(i omega)) from omega=0+ to the top of the grid."""
    phase, _ = _det_phase(linsys, omega)
    w, ph = omega, phase
    for _ in range(max_levels):
        jumps = np.abs(np.angle(np.exp(1j * np.diff(ph))))
        bad = np.nonzero(jumps > np.pi / 4)[0]
        if len(bad) == 0:
            break
        extra = np.concatenate([np.linspace(w[b], w[b + 1], 12)[1:-1] for b in bad])
        ep, _ = _det_phase(linsys, extra)
        w = np.concatenate([w, extra])
        ph = np.concatenate([ph, ep])
        order = np.argsort(w)
        w, ph = w[order], ph[order]
    # det(I + L) is real positive at omega = 0 (or at the indentation when a_j = 0)
    unwrapped = np.unwrap(np.concatenate([[0.0], ph]))
    return float(unwrapped[-1] - unwrapped[0])


def _nearest(eigs, guess):
    return eigs[np.arange(len(eigs)), np.argmin(np.abs(eigs - guess[:, None]), axis=1)]


def _refine_crossings(linsys, lo, hi, lam_lo, lam_hi, iters=80):
    """Bisect every bracketed real-axis crossing at once, one batched eigensolve per step."""
    lo, hi = lo.astype(float), hi.astype(float)
    lam_lo, lam_hi = lam_lo.astype(complex), lam_hi.astype(complex)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        live = (mid > lo) & (mid < hi)
        if not live.any():
            break
        lam = _nearest(np.linalg.eigvals(return_ratio_batch(linsys, mid)), 0.5 * (lam_lo + lam_hi))
        left = live & (np.sign(lam.imag) == np.sign(lam_lo.imag))
        right = live & ~left
        lo, lam_lo = np.where(left, mid, lo), np.where(left, lam, lam_lo)
        hi, lam_hi = np.where(right, mid, hi), np.where(right, lam, lam_hi)
    mid = 0.5 * (lo + hi)
    return mid, _nearest(np.linalg.eigvals(return_ratio_batch(linsys, mid)), 0.5 * (lam_lo + lam_hi))


def nyquist_scan(linsys: LinearizedSystem, grid: FrequencyGrid | None = None,
                 refine_crossings: bool = True, max_crossings: int | None = None) -> NyquistScan:
    """Eigenloci of L(i omega), their real-axis crossings and the encirclement count.

    Encirclements of -1 are counted through det(I + L), whose winding about the
    origin equals the summed winding of all eigenloci about -1. Over the full
    contour the count is -2 * (phase change over omega > 0) / 2 pi.
    """
    grid = grid or FrequencyGrid()
    omega = grid.resolve(linsys.T)
    Ls = return_ratio_batch(linsys, omega)
    eigs = _track(np.linalg.eigvals(Ls))
    bound, radius = _bounds(linsys, omega, Ls)
    angle = _winding(linsys, omega)
    encirclements = int(round(-angle / np.pi))

    im = eigs.imag
    ks, loci = np.nonzero(np.sign(im[:-1]) * np.sign(im[1:]) < 0)
    order = np.lexsort((ks, loci))[:max_crossings]
    ks, loci = ks[order], loci[order]
    if refine_crossings and len(ks):
        ws, lams = _refine_crossings(linsys, omega[ks], omega[ks + 1], eigs[ks, loci], eigs[ks + 1, loci])
    else:
        t = im[ks, loci] / (im[ks, loci] - im[ks + 1, loci])
        ws = omega[ks] + t * (omega[ks + 1] - omega[ks])
        lams = eigs[ks, loci] + t * (eigs[ks + 1, loci] - eigs[ks, loci])
    crossings = sorted((Crossing(float(w), complex(lam), int(i)) for w, lam, i in zip(ws, lams, loci)),
                       key=lambda c: c.omega)

    narrow = bool(np.max(np.abs(eigs[-1])) > 1e-3)
    if narrow:
        warnings.warn(f"largest eigenlocus magnitude at omega_hi={omega[-1]:.4g} is "
                      f"{np.max(np.abs(eigs[-1])):.3g} > 1e-3; frequency grid may be too narrow",
                      NarrowGridWarning, stacklevel=2)
    return NyquistScan(omega, eigs, bound, radius, encirclements, crossings, angle, narrow)


def unit_loop(T: float, gain: float = 1.0, a: float = 0.0) -> LinearizedSystem:
    """Scalar loop gain * e^{-sT} / (a + sT), packaged as a one-source system."""
    from .equilibrium import EquilibriumPoint
    from .network import Link, Source, Topology
    from .protocols import make_variant

    topo = Topology((Source("ref", make_variant("scalable"), T, ("ref",), (0.0,)),),
                    (Link("ref", 1.0, 1.0),))
    one = np.ones(1)
    eq = EquilibriumPoint(one, one * T, one, 0.5 * one, 0.5 * one, 0.0)
    return LinearizedSystem(topo, eq, np.array([a], dtype=float), np.array([T], dtype=float),
                            np.array([[gain]], dtype=float), np.zeros((1, 1)),
                            np.ones((1, 1), dtype=bool), np.array([gain]))
