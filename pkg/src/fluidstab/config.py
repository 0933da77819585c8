"""TOML topology config: parsing, validation and serialization.

Example::

    [[links]]
    id = "l1"
    capacity_pkts_per_s = 100.0
    buffer_pkts = 100
    regime = "small_smooth"      # small_bursty (needs burst_M) | intermediate

    [[sources]]
    id = "s1"
    variant = "scalable"
    params = { a = 0.01 }
    rtt_s = 1.0
    route = ["l1"]
    forward_delays_s = [0.02]    # optional

    [simulation]
    step_s = 0.05
    horizon_s = 40.0
    perturbation = 0.001

    [analysis]
    n_freq = 10000
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .network import Link, Regime, Source, Topology, default_forward_delays, validate_topology
from .protocols import PolicyError, make_variant


class ConfigError(ValueError):
    pass


_TOP = {"links", "sources", "simulation", "analysis", "tandem_delay_s"}
_LINK = {"id", "capacity_pkts_per_s", "buffer_pkts", "regime", "burst_M"}
_SOURCE = {"id", "variant", "params", "rtt_s", "route", "forward_delays_s"}
_SIMULATION = {"step_s", "horizon_s", "perturbation", "seed"}
_ANALYSIS = {"omega_lo", "omega_hi", "n_freq", "tolerance"}


@dataclass
class ConfigDocument:
    topology: Topology
    simulation: dict[str, Any] = field(default_factory=dict)
    analysis: dict[str, Any] = field(default_factory=dict)


def _reject_unknown(where: str, table: dict, allowed: set[str]) -> None:
    extra = set(table) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")


def _require(where, table, key):
    if key not in table:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return table[key]


def parse_config(text: str) -> ConfigDocument:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    _reject_unknown("config", raw, _TOP)
    links = []
    for i, tab in enumerate(raw.get("links", [])):
        where = f"links[{i}]"
        _reject_unknown(where, tab, _LINK)
        try:
            regime = Regime(tab.get("regime", "small_smooth"))
        except ValueError:
            raise ConfigError(f"{where}: unknown regime {tab.get('regime')!r}")
        if regime is Regime.SMALL_BURSTY and "burst_M" not in tab:
            raise ConfigError(f"{where}: small_bursty regime needs burst_M")
        links.append(Link(str(_require(where, tab, "id")), float(_require(where, tab, "capacity_pkts_per_s")),
                          float(_require(where, tab, "buffer_pkts")), regime, float(tab.get("burst_M", 1.0))))
    sources = []
    for i, tab in enumerate(raw.get("sources", [])):
        where = f"sources[{i}]"
        _reject_unknown(where, tab, _SOURCE)
        try:
            policy = make_variant(_require(where, tab, "variant"), tab.get("params", {}))
        except PolicyError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        rtt = float(_require(where, tab, "rtt_s"))
        route = tuple(str(r) for r in _require(where, tab, "route"))
        fwd = tab.get("forward_delays_s")
        fwd = tuple(float(t) for t in fwd) if fwd is not None else default_forward_delays(rtt, len(route))
        sources.append(Source(str(_require(where, tab, "id")), policy, rtt, route, fwd))
    if not links or not sources:
        raise ConfigError("config needs at least one [[links]] and one [[sources]] entry")
    sim = dict(raw.get("simulation", {}))
    _reject_unknown("[simulation]", sim, _SIMULATION)
    ana = dict(raw.get("analysis", {}))
    _reject_unknown("[analysis]", ana, _ANALYSIS)
    topo = Topology(tuple(sources), tuple(links), float(raw.get("tandem_delay_s", 0.0)))
    problems = validate_topology(topo)
    if problems:
        raise ConfigError("invalid topology: " + "; ".join(problems))
    return ConfigDocument(topo, sim, ana)


def load_config(path) -> ConfigDocument:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(doc: ConfigDocument | Topology) -> str:
    if isinstance(doc, Topology):
        doc = ConfigDocument(doc)
    topo = doc.topology
    out: dict[str, Any] = {}
    if topo.tandem_delay:
        out["tandem_delay_s"] = topo.tandem_delay
    links = []
    for l in topo.links:
        tab = {"id": l.id, "capacity_pkts_per_s": l.capacity, "buffer_pkts": l.buffer,
               "regime": l.regime.value}
        if l.regime is Regime.SMALL_BURSTY or l.burst != 1.0:
            tab["burst_M"] = l.burst
        links.append(tab)
    out["links"] = links
    out["sources"] = [
        {"id": s.id, "variant": s.policy.kind.value, "params": dict(s.policy.params), "rtt_s": s.rtt,
         "route": list(s.route), "forward_delays_s": list(s.forward_delays)}
        for s in topo.sources
    ]
    if doc.simulation:
        out["simulation"] = dict(doc.simulation)
    if doc.analysis:
        out["analysis"] = dict(doc.analysis)
    return tomli_w.dumps(out)
