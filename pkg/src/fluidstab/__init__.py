"""Local stability of TCP fluid models on drop-tail networks."""

from .equilibrium import EquilibriumPoint, solve_equilibrium
from .linear import FrequencyGrid, Verdict, linearize, nyquist_scan, sufficient_condition, unit_loop
from .network import Link, Regime, Source, Topology, reduce_tandem
from .protocols import Kind, WindowPolicy, make_variant
from .scenarios import analyze, builtin_scenario, cross_validate, sweep
from .simulate import SimulationConfig, classify_trajectory, default_config, simulate

__all__ = [
    "EquilibriumPoint", "FrequencyGrid", "Kind", "Link", "Regime", "SimulationConfig", "Source", "Topology",
    "Verdict", "WindowPolicy", "analyze", "builtin_scenario", "classify_trajectory", "cross_validate",
    "default_config", "linearize", "make_variant", "nyquist_scan", "reduce_tandem", "simulate",
    "solve_equilibrium", "sufficient_condition", "sweep", "unit_loop",
]
