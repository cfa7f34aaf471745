"""Klein-Gordon flow on the lattice window.

The linear flow u'' = -(H+3)u is solved exactly through the spectral
decomposition of H: one eigendecomposition is amortized across every time
sample, Duhamel iteration and split step, so each sample costs two dense
transforms.  The nonlinear flow uses Strang splitting with the exact linear
half-step, and the Duhamel map is iterated to its fixed point in the
time-weighted sup metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate

from kglattice.model import (
    FrequencyVector,
    LatticeConfig,
    QuasiPeriodicPotential,
    sample_orbit,
)
from kglattice.operator import EigenDecomposition


def bracket(t):
    """Japanese bracket <t> = sqrt(1 + t^2)."""
    t = np.asarray(t, dtype=float)
    out = np.sqrt(1.0 + t * t)
    return float(out) if out.ndim == 0 else out


@dataclass
class RealState:
    u: np.ndarray
    v: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have matching shapes")


@dataclass
class ComplexState:
    q: np.ndarray
    time: float = 0.0


@dataclass(frozen=True)
class EnergyReport:
    linear_energy: float
    nonlinear_term: float
    total: float


@dataclass
class DecayProfile:
    """Norms per sample time.  pair_l2 is the conserved l2 norm of (u, w)."""

    times: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    l1: np.ndarray
    pair_l2: np.ndarray | None = None


def _frequencies(D: EigenDecomposition) -> np.ndarray:
    shifted = D.eigenvalues + 3.0
    if np.any(shifted <= 0):
        raise ValueError(
            "H + 3 has a nonpositive eigenvalue; the potential is too large (eps0 >= 1)"
        )
    return np.sqrt(shifted)


def linear_propagate(D: EigenDecomposition, s0: RealState, t: float) -> RealState:
    """Exact flow: u(t) = cos(tW)u0 + W^-1 sin(tW)v0, W = (H+3)^{1/2}."""
    w = _frequencies(D)
    if t == 0.0:
        return RealState(u=s0.u.copy(), v=s0.v.copy(), time=s0.time)
    Q = D.eigenvectors
    cu = Q.T @ s0.u
    cv = Q.T @ s0.v
    c, s = np.cos(w * t), np.sin(w * t)
    u = Q @ (c * cu + (s / w) * cv)
    v = Q @ (-(w * s) * cu + c * cv)
    return RealState(u=u, v=v, time=s0.time + t)


def propagate_times(D: EigenDecomposition, s0: RealState, times) -> list[RealState]:
    """Batch of exact linear states; one pair of GEMMs for all samples."""
    w = _frequencies(D)
    Q = D.eigenvectors
    cu = Q.T @ s0.u
    cv = Q.T @ s0.v
    times = np.asarray(times, dtype=float)
    phase = np.outer(times, w)
    c, s = np.cos(phase), np.sin(phase)
    U = (c * cu[None, :] + (s / w[None, :]) * cv[None, :]) @ Q.T
    V = (-(s * w[None, :]) * cu[None, :] + c * cv[None, :]) @ Q.T
    return [RealState(u=U[i], v=V[i], time=s0.time + t) for i, t in enumerate(times)]


def to_complex(s: RealState, D: EigenDecomposition) -> ComplexState:
    """q = (u - i w)/sqrt(2) with the auxiliary variable w = (H+3)^{-1/2} v."""
    w = _frequencies(D)
    Q = D.eigenvectors
    aux = Q @ ((Q.T @ s.v) / w)
    return ComplexState(q=(s.u - 1j * aux) / math.sqrt(2.0), time=s.time)


def from_complex(c: ComplexState, D: EigenDecomposition) -> RealState:
    w = _frequencies(D)
    Q = D.eigenvectors
    u = math.sqrt(2.0) * np.real(c.q)
    aux = -math.sqrt(2.0) * np.imag(c.q)
    v = Q @ ((Q.T @ aux) * w)
    return RealState(u=u, v=v, time=c.time)


def complex_propagate(D: EigenDecomposition, c0: ComplexState, t: float) -> ComplexState:
    """q(t) = e^{i t (H+3)^{1/2}} q(0), the complexified route."""
    w = _frequencies(D)
    Q = D.eigenvectors
    coeff = Q.T @ c0.q
    return ComplexState(q=Q @ (np.exp(1j * w * t) * coeff), time=c0.time + t)


def transform_matrix() -> tuple[np.ndarray, np.ndarray]:
    """The 2x2 change of variables (q, conj q) = M (u, w) and its inverse."""
    M = np.array([[1.0, -1.0j], [1.0, 1.0j]]) / math.sqrt(2.0)
    Minv = (-1.0j / math.sqrt(2.0)) * np.array([[1.0j, 1.0j], [-1.0, 1.0]])
    return M, Minv


def energy(
    s: RealState,
    P: QuasiPeriodicPotential,
    omega: FrequencyVector,
    config: LatticeConfig,
    lam: float = 0.0,
    kappa: int = 1,
) -> EnergyReport:
    """0.5 sum {v^2 + (u_{n+1}-u_n)^2 + V u^2} - lam/(2k+2) sum u^{2k+2}.

    Bond sums use Dirichlet walls (u vanishes just outside the window).
    """
    V = 1.0 + sample_orbit(P, config.theta0, omega, config.sites)
    padded = np.concatenate(([0.0], s.u, [0.0]))
    bonds = np.diff(padded)
    linear = 0.5 * (np.sum(s.v**2) + np.sum(bonds**2) + np.sum(V * s.u**2))
    nonlinear = -lam / (2.0 * kappa + 2.0) * np.sum(s.u ** (2 * kappa + 2))
    return EnergyReport(
        linear_energy=float(linear),
        nonlinear_term=float(nonlinear),
        total=float(linear + nonlinear),
    )


@dataclass
class Trajectory:
    states: list[RealState]
    aborted: bool = False
    abort_time: float | None = None

    def __iter__(self):
        return iter(self.states)

    def __len__(self):
        return len(self.states)


def nonlinear_evolve(
    D: EigenDecomposition,
    P: QuasiPeriodicPotential,
    s0: RealState,
    lam: float,
    kappa: int,
    t_max: float,
    dt: float,
    sample_times=None,
) -> Trajectory:
    """Strang splitting: exact linear half-steps around the kick v += dt lam u^{2k+1}.

    Aborts (without raising) when the state leaves float range, reporting the
    last valid sampled state; the focusing equation with large data does this.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if kappa < 1 or int(kappa) != kappa:
        raise ValueError("kappa must be a positive integer")
    from kglattice.model import strip_norm

    if strip_norm(P) >= 1.0:
        raise ValueError("strip norm >= 1 loses positivity of V")

    w = _frequencies(D)
    Q = D.eigenvectors
    n_steps = max(1, int(round(t_max / dt)))
    dt = t_max / n_steps
    if sample_times is None:
        n_samples = min(n_steps, 200)
        stride = max(1, n_steps // n_samples)
        sample_steps = sorted(set(range(0, n_steps + 1, stride)) | {n_steps})
    else:
        sample_steps = sorted({int(round(t / dt)) for t in np.asarray(sample_times, dtype=float)})
        sample_steps = [min(max(k, 0), n_steps) for k in sample_steps]

    ch, sh = np.cos(w * dt / 2.0), np.sin(w * dt / 2.0)
    cf, sf = np.cos(w * dt), np.sin(w * dt)
    power = 2 * kappa + 1

    cu = Q.T @ s0.u
    cv = Q.T @ s0.v
    states: list[RealState] = []
    aborted = False
    abort_time = None

    def record(step, cu, cv):
        states.append(
            RealState(u=Q @ cu, v=Q @ cv, time=s0.time + step * dt)
        )

    def half(cu, cv):
        return ch * cu + (sh / w) * cv, -(w * sh) * cu + ch * cv

    def full(cu, cv):
        return cf * cu + (sf / w) * cv, -(w * sf) * cu + cf * cv

    if 0 in sample_steps:
        record(0, cu, cv)
    cu, cv = half(cu, cv)
    for step in range(1, n_steps + 1):
        if lam != 0.0:
            u_real = Q @ cu
            with np.errstate(over="ignore", invalid="ignore"):
                kick = dt * lam * u_real**power
            if not np.all(np.isfinite(kick)):
                aborted = True
                abort_time = s0.time + (step - 0.5) * dt
                break
            cv = cv + Q.T @ kick
        if step in sample_steps or step == n_steps:
            bu, bv = half(cu, cv)
            if not np.all(np.isfinite(bu)) or not np.all(np.isfinite(bv)):
                aborted = True
                abort_time = s0.time + step * dt
                break
            if step in sample_steps:
                record(step, bu, bv)
            if step == n_steps:
                break
        cu, cv = full(cu, cv)
    return Trajectory(states=states, aborted=aborted, abort_time=abort_time)


def decay_profile(trajectory) -> DecayProfile:
    """Per-sample norms of u; pair_l2 tracks the conserved (u, w) energy norm."""
    states = list(trajectory)
    if not states:
        raise ValueError("trajectory is empty")
    times = np.array([s.time for s in states])
    if np.any(np.diff(times) <= 0) and len(times) > 1:
        raise ValueError("sample times must be strictly increasing")
    linf = np.array([np.max(np.abs(s.u)) for s in states])
    l2 = np.array([np.linalg.norm(s.u) for s in states])
    l1 = np.array([np.sum(np.abs(s.u)) for s in states])
    return DecayProfile(times=times, linf=linf, l2=l2, l1=l1)


def pair_l2_profile(D: EigenDecomposition, trajectory) -> np.ndarray:
    """l2 norm of the (u, w) pair per sample; constant along the linear flow."""
    out = []
    for s in trajectory:
        q = to_complex(s, D).q
        out.append(math.sqrt(2.0) * np.linalg.norm(q))
    return np.asarray(out)


# -- Duhamel fixed point ----------------------------------------------------


@dataclass
class DuhamelResult:
    times: np.ndarray
    u: np.ndarray  # (n_times, n_sites) displacement trajectory
    distances: list[float] = field(default_factory=list)
    contraction_factors: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    smallness_ok: bool = True


def weighted_sup_distance(times, ua, ub, zeta: float) -> float:
    """sup_t <t>^zeta max_n |ua - ub|, the decay-weighted trajectory metric."""
    weights = bracket(np.asarray(times)) ** zeta
    return float(np.max(weights * np.max(np.abs(ua - ub), axis=1)))


def duhamel_fixed_point(
    D: EigenDecomposition,
    psi: np.ndarray,
    phi: np.ndarray,
    lam: float,
    kappa: int,
    zeta: float,
    t_grid,
    tol: float = 1e-15,
    max_iter: int = 25,
    delta_star: float | None = None,
) -> DuhamelResult:
    """Iterate the integral form of the flow to its fixed point.

    u <- linear part + lam * int_0^t W^{-1} sin((t-s)W) u(s)^{2k+1} ds with
    W = (H+3)^{1/2}; the time integral is composite trapezoid on t_grid, and
    per-iteration distances are measured in the <t>^zeta weighted sup norm.
    Requires kappa > 5 and (kappa-2)^{-1} < zeta < 1/3; data above delta_star
    only triggers a warning flag since experiments may probe failure.
    """
    if kappa <= 5:
        raise ValueError("kappa must exceed 5")
    if not (1.0 / (kappa - 2.0) < zeta < 1.0 / 3.0):
        raise ValueError("zeta must lie in ((kappa-2)^{-1}, 1/3)")
    times = np.asarray(t_grid, dtype=float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("t_grid must start at 0 and increase")

    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    smallness_ok = True
    if delta_star is not None:
        if np.sum(np.abs(psi)) > delta_star or np.sum(np.abs(phi)) > delta_star:
            smallness_ok = False

    w = _frequencies(D)
    Q = D.eigenvectors
    phase = np.outer(times, w)
    cos_tw, sin_tw = np.cos(phase), np.sin(phase)
    cpsi, cphi = Q.T @ psi, Q.T @ phi
    linear = (cos_tw * cpsi[None, :] + (sin_tw / w[None, :]) * cphi[None, :]) @ Q.T

    power = 2 * kappa + 1

    def apply_map(u):
        if lam == 0.0:
            return linear
        G = (u**power) @ Q  # (T, N) modal force samples
        Cint = scipy.integrate.cumulative_trapezoid(cos_tw * G, times, axis=0, initial=0.0)
        Sint = scipy.integrate.cumulative_trapezoid(sin_tw * G, times, axis=0, initial=0.0)
        integral = (sin_tw * Cint - cos_tw * Sint) / w[None, :]
        return linear + lam * (integral @ Q.T)

    scale = max(np.max(np.abs(linear)), 1e-300)
    noise_floor = 64.0 * np.finfo(float).eps * scale
    u = linear.copy()
    distances: list[float] = []
    factors: list[float] = []
    converged = lam == 0.0
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        nxt = apply_map(u)
        d = weighted_sup_distance(times, nxt, u, zeta)
        if distances and distances[-1] > noise_floor:
            factors.append(d / distances[-1])
        distances.append(d)
        u = nxt
        if d <= tol:
            converged = True
            break
    return DuhamelResult(
        times=times,
        u=u,
        distances=distances,
        contraction_factors=factors,
        converged=converged,
        iterations=iterations,
        smallness_ok=smallness_ok,
    )


def dispersive_constant(
    D: EigenDecomposition, psi: np.ndarray, phi: np.ndarray, t_grid, zeta: float
) -> float:
    """Measured K with |u(t)|_inf <= K <t>^{-zeta} (|psi|_1 + |phi|_1) on the grid."""
    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    denom = np.sum(np.abs(psi)) + np.sum(np.abs(phi))
    if denom == 0:
        raise ValueError("data must be nonzero")
    states = propagate_times(D, RealState(u=psi, v=phi), t_grid)
    sup = np.array([np.max(np.abs(s.u)) for s in states])
    weights = bracket(np.asarray(t_grid)) ** zeta
    return float(np.max(weights * sup) / denom)


def convolution_constant(
    zeta: float, nu: float, t_max: float = 1.0e4, n_probe: int = 60
) -> float:
    """C1 with int_0^inf <t-s>^{-zeta} <s>^{-nu} ds <= C1 <t>^{-zeta}.

    Computed by numerical maximization of the weighted convolution over a
    log-spaced t grid; requires nu > 1 for convergence.
    """
    if nu <= 1:
        raise ValueError("nu must exceed 1")

    def weighted(t: float) -> float:
        def integrand(s):
            return bracket(t - s) ** (-zeta) * bracket(s) ** (-nu)

        s_max = max(4.0 * t, 100.0)
        val, _ = scipy.integrate.quad(
            integrand, 0.0, s_max, points=[t] if 0 < t < s_max else None, limit=400
        )
        # tail: for s >= s_max >= 2t, <t-s> >= <s/2>
        tail = (2.0**zeta) * s_max ** (1.0 - zeta - nu) / (zeta + nu - 1.0)
        return (val + tail) * bracket(t) ** zeta

    probes = np.concatenate(([0.0], np.logspace(-2, math.log10(t_max), n_probe)))
    return float(max(weighted(t) for t in probes))


def smallness_threshold(K: float, C1: float, kappa: int) -> float:
    """Data budget 0.5 (6 C1 (4K)^{2k-1})^{-1/(2k)} for the contraction."""
    return 0.5 * (6.0 * C1 * (4.0 * K) ** (2 * kappa - 1)) ** (-1.0 / (2 * kappa))
