"""Fixed-step integration of the nonlinear delayed fluid model.

Classical RK4 on a uniform grid; delayed rates are read from the stored
history by cubic Hermite interpolation (stored values plus stored slopes), so
interpolation error stays O(h^4) like the scheme itself.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .equilibrium import EquilibriumPoint
from .network import P_CLIP, Regime, Topology
from .protocols import W_MIN, stack_exponents


class HistoryInit(str, enum.Enum):
    PERTURBED = "constant_at_perturbed"
    EQUILIBRIUM = "constant_at_equilibrium"


class SimulationError(ValueError):
    pass


@dataclass
class SimulationConfig:
    step: float
    horizon: float
    perturbation: float | tuple[float, ...] = 0.05
    history_init: HistoryInit = HistoryInit.PERTURBED
    record_stride: int = 1

    def check(self, topology: Topology) -> list[str]:
        problems = []
        delays = _delays(topology)
        positive = delays[delays > 0]
        if positive.size and self.step > positive.min() / 20 * (1 + 1e-12):
            problems.append(f"step {self.step:g} exceeds min positive delay / 20 = {positive.min() / 20:g}")
        if self.horizon < 20 * topology.rtts.max() * (1 - 1e-12):
            problems.append("horizon shorter than 20 max RTT")
        if np.any(np.abs(np.atleast_1d(self.perturbation)) > 0.2):
            problems.append("|perturbation| must be <= 0.2")
        if self.record_stride < 1:
            problems.append("record_stride must be >= 1")
        return problems


def default_config(topology: Topology, perturbation=0.05, horizon_rtts=20.0, record_stride=None):
    """Largest admissible step and a horizon of `horizon_rtts` max RTTs."""
    delays = _delays(topology)
    h = delays[delays > 0].min() / 20
    horizon = horizon_rtts * topology.rtts.max()
    if record_stride is None:
        record_stride = max(1, int(topology.rtts.max() / h / 20))
    return SimulationConfig(h, horizon, perturbation, HistoryInit.PERTURBED, record_stride)


def _delays(topology: Topology) -> np.ndarray:
    out = list(topology.rtts)
    D = topology.forward_delay_matrix()
    A = topology.incidence()
    for j, src in enumerate(topology.sources):
        for l in np.nonzero(A[:, j])[0]:
            for k in np.nonzero(A[l])[0]:
                out.append(src.rtt - D[l, j] + D[l, k])
    return np.array(out)


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray           # (n, S)
    p: np.ndarray           # (n, L)
    q: np.ndarray           # (n, S)
    u: np.ndarray           # (n,) max relative rate deviation
    x_star: np.ndarray
    y: np.ndarray           # (n, L) undelayed link loads
    max_rtt: float
    floor_fraction: float = 0.0
    aborted_at: float | None = None

    def write_csv(self, path, window: float | None = None) -> None:
        env = perturbation_norm(self, window or self.max_rtt)
        S, L = self.x.shape[1], self.p.shape[1]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["time"] + [f"x_{j}" for j in range(S)] + [f"p_{l}" for l in range(L)]
                         + [f"q_{j}" for j in range(S)] + ["envelope"])
            for i in range(len(self.t)):
                vals = [self.t[i], *self.x[i], *self.p[i], *self.q[i], env[i]]
                out.writerow([repr(float(v)) for v in vals])


class _Reads:
    """Delayed reads x_k(t + c h - D), with Hermite weights precomputed per RK stage.

    History lives in one flat buffer laid out as (rows, 2, S): states, then slopes.
    """

    def __init__(self, src: np.ndarray, delay: np.ndarray, h: float, S: int):
        self.src = src
        self.now = np.nonzero(delay == 0)[0]
        self.row_width = 2 * S
        self.stage = {}
        for c in (0.0, 0.5, 1.0):
            s = c - delay / h
            fl = np.floor(s)
            th = s - fl
            th2, th3 = th * th, th * th * th
            weights = np.stack([2 * th3 - 3 * th2 + 1, (th3 - 2 * th2 + th) * h,
                                -2 * th3 + 3 * th2, (th3 - th2) * h])
            base = fl.astype(np.intp) * self.row_width + src
            offsets = np.stack([base, base + S, base + self.row_width, base + self.row_width + S])
            self.stage[c] = (offsets, weights)

    def __call__(self, Hf, row, c, x_stage):
        offsets, w = self.stage[c]
        val = (w * Hf[offsets + row * self.row_width]).sum(axis=0)
        if len(self.now):
            val[self.now] = x_stage[self.src[self.now]]
        return val


def simulate(topology: Topology, eq: EquilibriumPoint, config: SimulationConfig,
             check: bool = True) -> Trajectory:
    if check:
        problems = config.check(topology)
        if problems:
            raise SimulationError("; ".join(problems))
    S, L = len(topology.sources), len(topology.links)
    h = config.step
    T = topology.rtts
    alpha, m, beta, n = stack_exponents(s.policy for s in topology.sources)
    x_min = W_MIN / T
    A = topology.incidence()
    D = topology.forward_delay_matrix()

    # one "pair" per (source j, link l on its route); loads seen by j at l are sums over triples
    pair_src, pair_link, tri_pair, tri_src, tri_delay = [], [], [], [], []
    for j in range(S):
        for l in np.nonzero(A[:, j])[0]:
            pid = len(pair_src)
            pair_src.append(j)
            pair_link.append(l)
            for k in np.nonzero(A[l])[0]:
                tri_pair.append(pid)
                tri_src.append(k)
                tri_delay.append(T[j] - D[l, j] + D[l, k])
    pair_src = np.array(pair_src)
    pair_link = np.array(pair_link)
    tri_pair = np.array(tri_pair)
    n_pairs = len(pair_src)
    n_tri = len(tri_src)
    # loads at every (source, link) pair and each source's own lagged rate, in one gather
    reads = _Reads(np.concatenate([np.array(tri_src, dtype=np.intp), np.arange(S)]),
                   np.concatenate([np.maximum(np.array(tri_delay), 0.0), T]), h, S)
    rec_link, rec_src, rec_delay = [], [], []
    for l in range(L):
        for k in np.nonzero(A[l])[0]:
            rec_link.append(l)
            rec_src.append(k)
            rec_delay.append(D[l, k])
    rec_link = np.array(rec_link)
    rec_reads = _Reads(np.array(rec_src, dtype=np.intp), np.array(rec_delay), h, S)

    caps = np.array([lk.capacity for lk in topology.links])
    scale = np.array([lk.capacity / lk.burst if lk.regime is Regime.SMALL_BURSTY else lk.capacity
                      for lk in topology.links])
    expo = np.array([lk.effective_buffer for lk in topology.links])
    inter = np.array([lk.regime is Regime.INTERMEDIATE for lk in topology.links])

    def drop(y, links):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            small = (y / scale[links]) ** expo[links]
            mid = np.maximum(1.0 - caps[links] / np.where(y > 0, y, np.inf), 0.0)
        return np.minimum(np.where(inter[links], mid, small), P_CLIP)

    p_scale, p_expo, p_cap, p_inter = scale[pair_link], expo[pair_link], caps[pair_link], inter[pair_link]

    any_inter, all_inter = bool(p_inter.any()), bool(p_inter.all())

    # rates never drop below x_min, so loads stay positive
    def pair_drop(y):
        if not any_inter:
            return (y / p_scale) ** p_expo
        mid = np.maximum(1.0 - p_cap / y, 0.0)
        return mid if all_inter else np.where(p_inter, mid, (y / p_scale) ** p_expo)

    def raw_rhs(Hf, row, c, xs):
        vals = reads(Hf, row, c, xs)
        y = np.bincount(tri_pair, weights=vals[:n_tri], minlength=n_pairs)
        p = np.minimum(pair_drop(y), P_CLIP)
        q = -np.expm1(np.bincount(pair_src, weights=np.log1p(-p), minlength=S))
        x_del = vals[n_tri:]
        w = xs * T
        inc = alpha * w ** (-m)
        dec = beta * w**n
        return x_del * (inc - q * (inc + dec)) / T, q

    n_steps = int(round(config.horizon / h))
    n_hist = int(np.ceil(max(_delays(topology).max(), h) / h)) + 2
    x_star = eq.x_star.astype(float)

    # The solved equilibrium balances only to solver tolerance; subtracting the
    # stage-wise right-hand side at x* makes it an exact fixed point of the scheme,
    # so an equilibrium start cannot drift through round-off in unstable networks.
    H0 = np.zeros((n_hist + 3, 2, S))
    H0[:, 0] = x_star
    with np.errstate(divide="ignore"):
        bias = {c: raw_rhs(H0.reshape(-1), n_hist, c, x_star)[0] for c in (0.0, 0.5, 1.0)}

    def rhs(Hf, row, c, xs):
        dx, q = raw_rhs(Hf, row, c, xs)
        return dx - bias[c], q
    rows = n_hist + n_steps + 2
    H = np.zeros((rows, 2, S))
    X, F = H[:, 0], H[:, 1]
    if config.history_init is HistoryInit.EQUILIBRIUM:
        x0 = x_star.copy()
    else:
        delta = np.broadcast_to(np.asarray(config.perturbation, dtype=float), (S,))
        x0 = x_star * (1.0 + delta)
    X[: n_hist + 1] = x0
    r0 = n_hist

    rec_t, rec_x, rec_q, rec_y = [], [], [], []
    floor_hits = 0
    aborted = None
    x = x0.copy()
    # overflow in a diverging run is caught below as a non-finite state
    Hf = H.reshape(-1)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(n_steps + 1):
            row = r0 + step
            X[row] = x
            k1, q_now = rhs(Hf, row, 0.0, x)
            F[row] = k1
            if step % config.record_stride == 0 or step == n_steps:
                y_now = np.bincount(rec_link, weights=rec_reads(Hf, row, 0.0, x), minlength=L)
                rec_t.append(step * h)
                rec_x.append(x.copy())
                rec_q.append(q_now)
                rec_y.append(y_now)
            if step == n_steps:
                break
            x2 = np.maximum(x + 0.5 * h * k1, x_min)
            k2, _ = rhs(Hf, row, 0.5, x2)
            x3 = np.maximum(x + 0.5 * h * k2, x_min)
            k3, _ = rhs(Hf, row, 0.5, x3)
            x4 = np.maximum(x + h * k3, x_min)
            k4, _ = rhs(Hf, row, 1.0, x4)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                aborted = (step + 1) * h
                break
            pinned = x <= x_min
            if pinned.any():
                floor_hits += 1
                x = np.maximum(x, x_min)

    xs = np.array(rec_x)
    ys = np.array(rec_y)
    ps = np.column_stack([drop(ys[:, l], np.full(len(ys), l)) for l in range(L)]) if L else ys
    u = np.max(np.abs(xs - x_star) / x_star, axis=1)
    return Trajectory(np.array(rec_t), xs, ps, np.array(rec_q), u, x_star, ys, float(T.max()),
                      floor_hits / max(n_steps, 1), aborted)


def perturbation_norm(traj: Trajectory, window: float) -> np.ndarray:
    """Trailing-window maximum of u(t)."""
    t, u = traj.t, traj.u
    start = np.searchsorted(t, t - window * (1 - 1e-12), side="left")
    env = np.empty_like(u)
    # monotone deque would be O(n); windows here are short relative to n so a loop is fine
    for i in range(len(u)):
        env[i] = u[start[i]: i + 1].max()
    return env


class TrajectoryClass(str, enum.Enum):
    CONVERGING = "Converging"
    OSCILLATING = "Oscillating"
    DIVERGING = "Diverging"


@dataclass
class Classification:
    kind: TrajectoryClass
    envelope_ratio: float
    limit_cycle_like: bool
    last_window_ratio: float


def classify_trajectory(traj: Trajectory, window: float | None = None) -> Classification:
    """Compare the envelope over the first and last windows of the run."""
    window = window or 5.0 * traj.max_rtt
    t, u = traj.t, traj.u
    first = u[t <= t[0] + window].max()
    last = u[t >= t[-1] - window].max()
    prev_mask = (t >= t[-1] - 2 * window) & (t < t[-1] - window)
    prev = u[prev_mask].max() if prev_mask.any() else first
    last_ratio = last / prev if prev > 0 else 1.0
    if traj.aborted_at is not None or not np.isfinite(last):
        return Classification(TrajectoryClass.DIVERGING, np.inf, False, np.inf)
    if first <= 1e-12:
        ratio = 1.0 if last <= 1e-12 else np.inf
        kind = TrajectoryClass.CONVERGING if last <= 1e-8 else TrajectoryClass.DIVERGING
        return Classification(kind, ratio, False, last_ratio)
    ratio = last / first
    if ratio <= 0.1:
        kind = TrajectoryClass.CONVERGING
    elif ratio >= 10:
        kind = TrajectoryClass.DIVERGING
    else:
        kind = TrajectoryClass.OSCILLATING
    limit = kind is TrajectoryClass.OSCILLATING and 0.95 <= last_ratio <= 1.05
    return Classification(kind, ratio, limit, last_ratio)
