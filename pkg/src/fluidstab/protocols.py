"""Window-adjustment policies for the generalized TCP fluid model.

Every supported variant is a member of the power-law family

    i(w) = alpha * w**(-m)      (increase per ACK)
    d(w) = beta  * w**n         (decrease per loss)

Reno is (alpha=1, m=1, n=1), Compound is (alpha, m=1-k, n=1), Scalable is
(alpha=a, m=0, n=1). Keeping one representation lets the simulator and the
equilibrium solver vectorize over heterogeneous sources.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

W_MIN = 1e-6


class PolicyError(ValueError):
    pass


class Kind(str, enum.Enum):
    RENO = "reno"
    COMPOUND = "compound"
    SCALABLE = "scalable"
    POWERLAW = "powerlaw"


DEFAULTS: dict[Kind, dict[str, float]] = {
    Kind.RENO: {"beta": 0.5},
    Kind.COMPOUND: {"alpha": 0.125, "k": 0.75, "beta": 0.5},
    Kind.SCALABLE: {"a": 0.01, "beta": 0.125},
    Kind.POWERLAW: {},
}

_REQUIRED: dict[Kind, tuple[str, ...]] = {
    Kind.RENO: ("beta",),
    Kind.COMPOUND: ("alpha", "k", "beta"),
    Kind.SCALABLE: ("a", "beta"),
    Kind.POWERLAW: ("alpha", "m", "beta", "n"),
}


@dataclass(frozen=True)
class WindowPolicy:
    """A TCP variant: its kind plus the parameter record for that kind.

    Constructing this directly skips validation, which is occasionally useful
    for building deliberately pathological policies; use `make_variant` for
    anything user-facing.
    """

    kind: Kind
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "params", dict(self.params))

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items()))))

    @property
    def exponents(self) -> tuple[float, float, float, float]:
        """(alpha, m, beta, n) of the equivalent power-law policy."""
        p = self.params
        if self.kind is Kind.RENO:
            return 1.0, 1.0, p["beta"], 1.0
        if self.kind is Kind.COMPOUND:
            return p["alpha"], 1.0 - p["k"], p["beta"], 1.0
        if self.kind is Kind.SCALABLE:
            return p["a"], 0.0, p["beta"], 1.0
        return p["alpha"], p["m"], p["beta"], p["n"]

    def window_for_loss(self, q):
        """Equilibrium window solving i(w) / (i(w) + d(w)) = q.

        Uses d/i = (beta/alpha) w**(m+n), so the root is closed form whenever
        m + n > 0 (true for every validated policy).
        """
        alpha, m, beta, n = self.exponents
        if m + n <= 0:
            raise PolicyError("i/(i+d) is not decreasing in w; no unique equilibrium window")
        q = np.asarray(q, dtype=float)
        return (alpha * (1.0 - q) / (beta * q)) ** (1.0 / (m + n))


def make_variant(kind: Kind | str, params: Mapping[str, float] | None = None) -> WindowPolicy:
    """Build a validated policy, filling in the variant's default parameters."""
    try:
        kind = kind if isinstance(kind, Kind) else Kind(str(kind).lower())
    except ValueError:
        raise PolicyError(f"unknown variant {kind!r}; expected one of {[k.value for k in Kind]}")
    merged = dict(DEFAULTS[kind])
    merged.update(params or {})
    unknown = set(merged) - set(_REQUIRED[kind])
    if unknown:
        raise PolicyError(f"unknown parameters for {kind.value}: {sorted(unknown)}")
    missing = [name for name in _REQUIRED[kind] if name not in merged]
    if missing:
        raise PolicyError(f"missing parameters for {kind.value}: {missing}")
    for name, value in merged.items():
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            raise PolicyError(f"{kind.value} parameter {name} must be positive, got {value!r}")
    if kind is Kind.COMPOUND and merged["k"] >= 1:
        raise PolicyError("compound requires k < 1, otherwise the increment is not non-increasing")
    return WindowPolicy(kind, {k: float(v) for k, v in merged.items()})


def _check_positive(name, value):
    if np.any(np.asarray(value) <= 0):
        raise PolicyError(f"{name} must be positive")


def eval_increment(policy: WindowPolicy, w):
    _check_positive("window", w)
    alpha, m, _, _ = policy.exponents
    return alpha * np.asarray(w, dtype=float) ** (-m)


def eval_decrement(policy: WindowPolicy, w):
    _check_positive("window", w)
    _, _, beta, n = policy.exponents
    return beta * np.asarray(w, dtype=float) ** n


def eval_rate_derivatives(policy: WindowPolicy, x, T):
    """Derivatives (i', d') with respect to the rate x, at window w = x*T."""
    _check_positive("rate", x)
    _check_positive("rtt", T)
    alpha, m, beta, n = policy.exponents
    x = np.asarray(x, dtype=float)
    T = np.asarray(T, dtype=float)
    di = -m * alpha * T ** (-m) * x ** (-m - 1.0)
    dd = n * beta * T**n * x ** (n - 1.0)
    return di, dd


def stack_exponents(policies) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-source (alpha, m, beta, n) arrays for vectorized evaluation."""
    arr = np.array([p.exponents for p in policies], dtype=float).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
