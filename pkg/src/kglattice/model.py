"""Quasi-periodic potentials, Diophantine frequencies, lattice configuration.

Torus points live in [0, 1)^d and are reduced mod 1 on every evaluation so
that long orbits theta0 + n*omega do not drift.  Potentials are finite
Fourier series V(theta) = 1 + P(theta) with the real cosine convention
p_{-k} = p_k (real coefficients).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

GOLDEN_MEAN = (math.sqrt(5.0) - 1.0) / 2.0


def _as_tuple(x) -> tuple:
    if np.isscalar(x):
        return (float(x),)
    return tuple(float(v) for v in x)


def _as_key(k, d: int) -> tuple:
    """Normalize a Fourier mode index to an integer tuple of length d."""
    if np.isscalar(k):
        key = (int(k),)
    else:
        key = tuple(int(v) for v in k)
    if len(key) != d:
        raise ValueError(f"mode index {key} has length {len(key)}, expected {d}")
    return key


@dataclass(frozen=True)
class FrequencyVector:
    """Frequency vector on the d-torus with Diophantine parameters (gamma, tau)."""

    omega: tuple
    gamma: float = 0.25
    tau: float = 1.2

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(w) % 1.0 for w in _as_tuple(self.omega)))
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.tau <= self.d - 1:
            raise ValueError(f"tau must exceed d-1 = {self.d - 1}")

    @property
    def d(self) -> int:
        return len(self.omega)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)


def golden_frequency(gamma: float = 0.25, tau: float = 1.2) -> FrequencyVector:
    """The golden-mean frequency, the default 1-d badly-approximable choice."""
    return FrequencyVector((GOLDEN_MEAN,), gamma=gamma, tau=tau)


@dataclass(frozen=True)
class QuasiPeriodicPotential:
    """Finite Fourier series P on the d-torus with analyticity radius r.

    coeffs maps integer mode vectors k to real coefficients p_k; the series
    is forced real by requiring p_{-k} = p_k.  Missing -k entries are filled
    in on construction.
    """

    coeffs: dict = field(default_factory=dict)
    radius_r: float = 0.05
    d: int = 1

    def __post_init__(self):
        if self.radius_r <= 0:
            raise ValueError("radius_r must be positive")
        normalized: dict = {}
        for k, p in self.coeffs.items():
            key = _as_key(k, self.d)
            p = float(p)
            neg = tuple(-c for c in key)
            for existing, want in ((key, p), (neg, p)):
                if existing in normalized and abs(normalized[existing] - want) > 1e-15 * (1 + abs(want)):
                    raise ValueError(f"coefficients at {existing} violate p_-k = p_k")
            normalized[key] = p
            normalized[neg] = p
        object.__setattr__(self, "coeffs", normalized)

    def is_zero(self) -> bool:
        return all(p == 0.0 for p in self.coeffs.values())

    def mode_table(self):
        """Distinct cosine modes as (k array, coefficient array, is_zero_mode array).

        Each nonzero pair {k, -k} is listed once; evaluation uses
        p_0 + sum 2 p_k cos(2 pi <k, theta>).
        """
        ks, ps, zero = [], [], []
        seen = set()
        for k, p in sorted(self.coeffs.items()):
            if k in seen:
                continue
            neg = tuple(-c for c in k)
            seen.add(k)
            seen.add(neg)
            ks.append(k)
            ps.append(p)
            zero.append(all(c == 0 for c in k))
        if not ks:
            return np.zeros((0, self.d), dtype=int), np.zeros(0), np.zeros(0, dtype=bool)
        return np.asarray(ks, dtype=int), np.asarray(ps), np.asarray(zero, dtype=bool)


def zero_potential(d: int = 1, radius_r: float = 0.05) -> QuasiPeriodicPotential:
    return QuasiPeriodicPotential({}, radius_r=radius_r, d=d)


def cosine_potential(eps0: float, radius_r: float = 0.05, d: int = 1) -> QuasiPeriodicPotential:
    """Single cosine mode along the first torus coordinate with strip norm eps0.

    The +-e1 coefficient is chosen so that strip_norm(P) == eps0 exactly.
    """
    if eps0 == 0.0:
        return zero_potential(d=d, radius_r=radius_r)
    k = (1,) + (0,) * (d - 1)
    amp = 0.5 * eps0 * math.exp(-2.0 * math.pi * radius_r)
    return QuasiPeriodicPotential({k: amp}, radius_r=radius_r, d=d)


def eval_potential(P: QuasiPeriodicPotential, theta) -> float:
    """V(theta) = 1 + P(theta) at one torus point, guaranteed real."""
    th = np.asarray(theta, dtype=float).reshape(-1)
    if th.shape[0] != P.d:
        raise ValueError(f"theta has dimension {th.shape[0]}, potential expects {P.d}")
    value = 1.0 + eval_series(P, th.reshape(1, -1))
    return float(value[0])


def eval_series(P: QuasiPeriodicPotential, theta: np.ndarray) -> np.ndarray:
    """P(theta) for an (..., d) array of torus points, reduced mod 1."""
    th = np.mod(np.asarray(theta, dtype=float), 1.0)
    if th.ndim == 1 and P.d == 1:
        th = th[:, None]
    ks, ps, zero = P.mode_table()
    out = np.zeros(th.shape[:-1])
    for k, p, z in zip(ks, ps, zero):
        if z:
            out = out + p
        else:
            out = out + 2.0 * p * np.cos(2.0 * math.pi * (th @ k))
    return out


def sample_orbit(P: QuasiPeriodicPotential, theta0, omega: FrequencyVector, offsets) -> np.ndarray:
    """P(theta0 + n*omega) for an array of integer offsets n."""
    t0 = np.asarray(_as_tuple(theta0))
    n = np.asarray(offsets, dtype=float).reshape(-1, 1)
    thetas = np.mod(t0[None, :] + n * omega.as_array()[None, :], 1.0)
    return eval_series(P, thetas)


def strip_norm(P: QuasiPeriodicPotential) -> float:
    """Upper bound sum_k |p_k| e^{2 pi |k|_1 r} for the sup of P on the strip |Im theta| <= r.

    Exact for a single symmetric cosine mode, conservative otherwise.
    """
    r = P.radius_r
    total = 0.0
    for k, p in P.coeffs.items():
        total += abs(p) * math.exp(2.0 * math.pi * sum(abs(c) for c in k) * r)
    return total


@dataclass(frozen=True)
class LatticeConfig:
    """Finite lattice window: sites offset .. offset+n_sites-1, Dirichlet walls."""

    n_sites: int
    theta0: tuple = (0.0,)
    offset: int | None = None
    boundary: str = "dirichlet"

    def __post_init__(self):
        object.__setattr__(self, "theta0", _as_tuple(self.theta0))
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.boundary != "dirichlet":
            raise ValueError("only Dirichlet truncation is supported")
        if self.offset is None:
            object.__setattr__(self, "offset", -(self.n_sites // 2))

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.n_sites)

    @property
    def d(self) -> int:
        return len(self.theta0)


@dataclass(frozen=True)
class DiophantineReport:
    passed: bool
    worst_n: tuple
    worst_margin: float
    worst_distance: float
    k_max: int


def _int_vectors(d: int, k_max: int):
    """All nonzero n in Z^d with |n|_inf <= k_max (one per {n, -n} pair for d=1)."""
    if d == 1:
        for n in range(1, k_max + 1):
            yield (n,)
        return
    for n in itertools.product(range(-k_max, k_max + 1), repeat=d):
        if any(c != 0 for c in n):
            yield n


def check_diophantine(omega: FrequencyVector, k_max: int) -> DiophantineReport:
    """Scan 0 < |n|_inf <= k_max for violations of ||<n,omega>|| >= gamma/|n|_inf^tau.

    The distance ||.|| is to the nearest integer; for rational omega the scan
    reports the exact-zero hit.  Margins are distance - threshold; the report
    carries the minimizing n.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    w = omega.as_array()
    if omega.d == 1:
        n = np.arange(1, k_max + 1)
        x = n * w[0]
        dist = np.abs(x - np.round(x))
        thr = omega.gamma / n.astype(float) ** omega.tau
        margin = dist - thr
        i = int(np.argmin(margin))
        return DiophantineReport(
            passed=bool(np.all(margin >= 0)),
            worst_n=(int(n[i]),),
            worst_margin=float(margin[i]),
            worst_distance=float(dist[i]),
            k_max=k_max,
        )
    worst = None
    for n in _int_vectors(omega.d, k_max):
        x = float(np.dot(n, w))
        dist = abs(x - round(x))
        norm = max(abs(c) for c in n)
        margin = dist - omega.gamma / norm**omega.tau
        if worst is None or margin < worst[0]:
            worst = (margin, n, dist)
    margin, n, dist = worst
    return DiophantineReport(
        passed=margin >= 0,
        worst_n=n,
        worst_margin=float(margin),
        worst_distance=float(dist),
        k_max=k_max,
    )
