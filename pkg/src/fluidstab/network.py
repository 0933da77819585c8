"""Topology, drop-probability models, aggregate loss and routing gains."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .protocols import WindowPolicy

P_CLIP = 1.0 - 1e-12


class Regime(str, enum.Enum):
    SMALL_SMOOTH = "small_smooth"
    SMALL_BURSTY = "small_bursty"
    INTERMEDIATE = "intermediate"


class NoLossRegion(ValueError):
    """Intermediate link evaluated at or below capacity, where p is identically 0."""


@dataclass(frozen=True)
class Link:
    id: str
    capacity: float
    buffer: float
    regime: Regime = Regime.SMALL_SMOOTH
    burst: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))

    @property
    def is_small(self) -> bool:
        return self.regime is not Regime.INTERMEDIATE

    @property
    def effective_buffer(self) -> float:
        """Exponent of the small-buffer drop law: B, or B/M when bursty."""
        if self.regime is Regime.SMALL_BURSTY:
            return self.buffer / self.burst
        return self.buffer


@dataclass(frozen=True)
class Source:
    id: str
    policy: WindowPolicy
    rtt: float
    route: tuple[str, ...]
    forward_delays: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "route", tuple(self.route))
        object.__setattr__(self, "forward_delays", tuple(float(t) for t in self.forward_delays))


@dataclass(frozen=True)
class Topology:
    sources: tuple[Source, ...]
    links: tuple[Link, ...]
    tandem_delay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def link_index(self) -> dict[str, int]:
        return {link.id: i for i, link in enumerate(self.links)}

    @property
    def rtts(self) -> np.ndarray:
        return np.array([s.rtt for s in self.sources], dtype=float)

    def incidence(self) -> np.ndarray:
        """0/1 matrix, links x sources."""
        idx = self.link_index
        A = np.zeros((len(self.links), len(self.sources)))
        for j, src in enumerate(self.sources):
            for lid in src.route:
                A[idx[lid], j] = 1.0
        return A

    def forward_delay_matrix(self) -> np.ndarray:
        """T_jl arranged links x sources; zero where the link is off-route."""
        idx = self.link_index
        D = np.zeros((len(self.links), len(self.sources)))
        for j, src in enumerate(self.sources):
            for lid, t in zip(src.route, src.forward_delays):
                D[idx[lid], j] = t
        return D


def default_forward_delays(rtt: float, route_length: int) -> tuple[float, ...]:
    # half the RTT is the forward path, split evenly over the hops
    return tuple(rtt * (i + 1) / route_length / 2.0 for i in range(route_length))


def validate_topology(topology: Topology) -> list[str]:
    """List every invariant violation; an empty list means the topology is usable."""
    problems = []
    seen = set()
    for link in topology.links:
        if link.id in seen:
            problems.append(f"duplicate link id {link.id!r}")
        seen.add(link.id)
        if not link.capacity > 0:
            problems.append(f"link {link.id}: capacity must be > 0")
        if not link.buffer >= 1:
            problems.append(f"link {link.id}: buffer must be >= 1")
        if link.regime is Regime.SMALL_BURSTY and not link.burst >= 1:
            problems.append(f"link {link.id}: burst size M must be >= 1")
    used = set()
    sids = set()
    for src in topology.sources:
        if src.id in sids:
            problems.append(f"duplicate source id {src.id!r}")
        sids.add(src.id)
        if not src.rtt > 0:
            problems.append(f"source {src.id}: rtt must be > 0")
        if not src.route:
            problems.append(f"source {src.id}: empty route")
        if len(set(src.route)) != len(src.route):
            problems.append(f"source {src.id}: route visits a link twice")
        if len(src.forward_delays) != len(src.route):
            problems.append(f"source {src.id}: need one forward delay per route link")
        for lid in src.route:
            if lid not in seen:
                problems.append(f"source {src.id}: unknown link {lid!r}")
            used.add(lid)
        for lid, t in zip(src.route, src.forward_delays):
            if t < 0:
                problems.append(f"source {src.id}: T_jl<0 on link {lid}")
            if t > src.rtt:
                problems.append(f"source {src.id}: T_jl>T_j on link {lid}")
        if any(b < a for a, b in zip(src.forward_delays, src.forward_delays[1:])):
            problems.append(f"source {src.id}: forward delays decrease along the route")
    for link in topology.links:
        if link.id not in used:
            problems.append(f"link {link.id}: no source traverses it")
    return problems


def link_drop_probability(link: Link, y):
    y = np.asarray(y, dtype=float)
    if link.regime is Regime.INTERMEDIATE:
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(y > 0, 1.0 - link.capacity / np.where(y > 0, y, 1.0), 0.0)
        p = np.maximum(p, 0.0)
    elif link.regime is Regime.SMALL_BURSTY:
        p = (y / (link.capacity / link.burst)) ** (link.buffer / link.burst)
    else:
        p = (y / link.capacity) ** link.buffer
    return np.minimum(p, P_CLIP)


def link_drop_derivative(link: Link, y):
    """dp/dy in the differentiable interior of the drop law."""
    y = np.asarray(y, dtype=float)
    if link.regime is Regime.INTERMEDIATE:
        if np.any(y <= link.capacity):
            raise NoLossRegion(f"link {link.id}: load at or below capacity, derivative undefined")
        return link.capacity / y**2
    p = link_drop_probability(link, y)
    return link.effective_buffer * p / y


def aggregate_loss(per_link_drops: Mapping[str, float], route: Sequence[str]) -> float:
    survive = 1.0
    for lid in route:
        survive *= 1.0 - per_link_drops[lid]
    return 1.0 - survive


def routing_gain(topology: Topology, s: complex) -> np.ndarray:
    """R(s): entry (l, j) is exp(-s T_jl) when link l is on source j's route."""
    A = topology.incidence()
    return A * np.exp(-s * topology.forward_delay_matrix())


def tandem_groups(topology: Topology) -> list[list[int]]:
    """Groups of links with identical source sets and a constant delay offset."""
    A = topology.incidence()
    D = topology.forward_delay_matrix()
    groups: list[list[int]] = []
    assigned = set()
    for a in range(len(topology.links)):
        if a in assigned:
            continue
        group = [a]
        on = A[a] > 0
        for b in range(a + 1, len(topology.links)):
            if b in assigned or not np.array_equal(A[a], A[b]):
                continue
            offset = D[b, on] - D[a, on]
            if np.ptp(offset) <= 1e-12 * max(1.0, float(np.max(np.abs(D[:, on])))):
                group.append(b)
        if len(group) > 1:
            assigned.update(group)
            groups.append(group)
    return groups


def _route_position(topology: Topology, link_pos: int) -> int:
    lid = topology.links[link_pos].id
    for src in topology.sources:
        if lid in src.route:
            return src.route.index(lid)
    return 0


def reduce_tandem(topology: Topology) -> Topology:
    """Collapse serial links that carry the same flows to their tightest member."""
    groups = tandem_groups(topology)
    if not groups:
        return topology
    drop = set()
    for group in groups:
        ordered = sorted(group, key=lambda i: _route_position(topology, i))
        keep = min(ordered, key=lambda i: topology.links[i].capacity)
        drop.update(i for i in group if i != keep)
    dropped = {topology.links[i].id for i in drop}
    links = tuple(link for i, link in enumerate(topology.links) if i not in drop)
    sources = []
    for src in topology.sources:
        kept = [(lid, t) for lid, t in zip(src.route, src.forward_delays) if lid not in dropped]
        sources.append(replace(src, route=tuple(l for l, _ in kept),
                               forward_delays=tuple(t for _, t in kept)))
    return Topology(tuple(sources), links, topology.tandem_delay)


def near_equal_tandem_capacities(topology: Topology, rel: float = 0.01) -> list[str]:
    """Notes for tandem groups whose capacities are too close for a single clear bottleneck."""
    notes = []
    for group in tandem_groups(topology):
        caps = sorted(topology.links[i].capacity for i in group)
        if caps[1] <= caps[0] * (1.0 + rel):
            ids = [topology.links[i].id for i in group]
            notes.append(f"tandem links {ids} have capacities within {rel:.0%}; "
                         "both may carry loss at equilibrium")
    return notes

