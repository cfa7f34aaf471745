"""Oscillatory integrals over the spectrum and decay-exponent fits.

The basic object is I_M(t) = int h e^{i t sqrt(E+3)} cos(M rho) rho' dE.
Substituting rho as the integration variable (the rotation number is
monotone on each spectral piece) removes the band-edge spikes of rho' and
makes the local oscillation rate explicit: t * d sqrt(E+3)/d rho +- M.
Panels are then sized to hold a fixed number of oscillation periods and the
error is estimated by halving.

The stationary-phase structure is controlled by the second and third
derivatives of sqrt(E+3) with respect to rho: in the free case they are
closed forms in xi0 = arccos(-E/2), with |d2| >= 1/200 on the outer cosine
range [-1, 1/3] u [3/5, 1] and |d3| >= 1/200 on the middle range, which
feeds the Van der Corput bounds with k = 2, 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.interpolate

from kglattice.evolve import DecayProfile, bracket
from kglattice.spectral import SpectralGrid

REGIME_OUTER = "outer"
REGIME_MIDDLE = "middle"
DERIVATIVE_FLOOR = 1.0 / 200.0
D2_ROOT_COS = (3.0 - math.sqrt(5.0)) / 2.0  # zero of 1 - 3c + c^2 in (0, 1)


@dataclass(frozen=True)
class PhaseDerivatives:
    d1: float
    d2: float
    d3: float
    regime: str


def classify_regime(xi0: float) -> str:
    """outer iff cos(xi0) in [-1, 1/3] u [3/5, 1] (closed endpoints)."""
    c = math.cos(xi0)
    return REGIME_OUTER if c <= 1.0 / 3.0 or c >= 3.0 / 5.0 else REGIME_MIDDLE


def phase_derivatives_free(xi0: float) -> PhaseDerivatives:
    """d^s sqrt(E+3)/d rho^s at the unperturbed dispersion E = -2 cos(rho).

    With g(r) = sqrt(3 - 2 cos r):
        g'   = sin r / g
        g''  = -(1 - 3c + c^2) / g^3
        g''' = -sin r (6 - 3c + c^2) / g^5,  c = cos r.
    """
    s, c = math.sin(xi0), math.cos(xi0)
    if s == 0.0:
        raise ValueError("xi0 must lie strictly inside (0, pi)")
    g = math.sqrt(3.0 - 2.0 * c)
    d1 = s / g
    d2 = -(1.0 - 3.0 * c + c * c) / g**3
    d3 = -s * (6.0 - 3.0 * c + c * c) / g**5
    return PhaseDerivatives(d1=d1, d2=d2, d3=d3, regime=classify_regime(xi0))


def vdc_bound(k: int, c: float, lam: float, h_endpoint: float, h_variation: float) -> float:
    """(2^{k-1} 5 - 2) |c lam|^{-1/k} (|h(b)| + int |h'|) for |phase^{(k)}| >= c."""
    if c <= 0:
        raise ValueError("c must be positive")
    if lam == 0:
        raise ValueError("lambda must be nonzero")
    const = 2 ** (k - 1) * 5 - 2
    return const * abs(c * lam) ** (-1.0 / k) * (h_endpoint + h_variation)


def vdc_constant(k: int) -> int:
    return 2 ** (k - 1) * 5 - 2


def bound_small_m(t: float, envelope: float = 1.0) -> float:
    """Stationary-phase envelope 7624 <t>^{-1/3} (times a log-factor placeholder)."""
    return 7624.0 * bracket(t) ** (-1.0 / 3.0) * envelope


def bound_large_m(M: float, t: float, span: float = 4.0, log_factor: float = 1.0) -> float:
    """Integration-by-parts bound 32 {log_factor + span <t>} / (15 |M|)."""
    if M == 0:
        raise ValueError("M must be nonzero for the large-M bound")
    return 32.0 * (log_factor + span * bracket(t)) / (15.0 * abs(M))


def large_m_cutoff(t: float) -> float:
    """|M| >= (32/5) <t>^{4/3} marks the regime where the large-M bound wins."""
    return 32.0 / 5.0 * bracket(t) ** (4.0 / 3.0)


def j_star(t: float, eps0: float, sigma: float = 1.0 / 200.0) -> tuple[float, float]:
    """Schedule depth where eps_J^{3 sigma/4} <= <t>^{-1/3}, and its lnln cap.

    Returns (formula value, 201 ln ln(2 + <t>)); meaningful only for eps0 in
    (0, 1).
    """
    cap = 201.0 * math.log(math.log(2.0 + bracket(t)))
    if not (0.0 < eps0 < 1.0):
        return (0.0, cap)
    arg = 4.0 * math.log(bracket(t)) / (9.0 * sigma * abs(math.log(eps0)))
    if arg <= 1.0:
        return (0.0, cap)
    return (math.floor(math.log(arg) / math.log(1.0 + sigma)) + 1.0, cap)


@dataclass
class OscIntegralResult:
    value: complex
    t: float
    M: float
    bound_paper: float
    quadrature_error_estimate: float
    n_nodes: int
    low_confidence: bool = False


def _rho_segments(grid: SpectralGrid):
    """Monotone (rho, E) data per included run of quadrature nodes."""
    if grid.free:
        return [(0.0, math.pi, None)]
    segs = []
    inc = grid.included
    i = 0
    E, rho = grid.energies, grid.rho
    while i < len(E):
        if not inc[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(E) and inc[j + 1]:
            j += 1
        if j > i + 3:
            r = rho[i : j + 1]
            e = E[i : j + 1]
            keep = np.concatenate(([True], np.diff(r) > 1e-12))
            if keep.sum() > 3:
                interp = scipy.interpolate.PchipInterpolator(r[keep], e[keep])
                segs.append((float(r[keep][0]), float(r[keep][-1]), interp))
        i = j + 1
    return segs


def _free_energy_of_rho(rho: np.ndarray) -> np.ndarray:
    return -2.0 * np.cos(rho)


def oscillatory_integral(
    h,
    M: float,
    t: float,
    grid: SpectralGrid,
    gl_order: int = 24,
    periods_per_panel: float = 3.0,
    rel_target: float = 1e-6,
    max_nodes: int = 40_000_000,
) -> OscIntegralResult:
    """int h e^{i t sqrt(E+3)} cos(M rho) rho' dE by rho-substitution.

    h is a callable of E (or None for h == 1).  Panel counts are chosen so
    each panel holds at most periods_per_panel periods of the fastest local
    phase (>= 8 nodes per period at the default order); the error estimate
    comes from doubling the panel count.
    """
    x_ref, w_ref = np.polynomial.legendre.leggauss(gl_order)

    def evaluate(refine: int) -> tuple[complex, int]:
        total = 0.0 + 0.0j
        n_used = 0
        for r_lo, r_hi, interp in _rho_segments(grid):
            length = r_hi - r_lo
            if length <= 0:
                continue
            # fastest phase: t max|d sqrt(E+3)/d rho| + |M|; the free-case
            # slope bound max|g'| <= 1 also covers the perturbed dispersion
            speed = abs(t) * 1.0 + abs(M)
            n_panels = max(4, int(math.ceil(speed * length / (2.0 * math.pi) / periods_per_panel)))
            n_panels *= refine
            if n_panels * gl_order > max_nodes:
                raise MemoryError("node budget exceeded")
            edges = np.linspace(r_lo, r_hi, n_panels + 1)
            mids = 0.5 * (edges[:-1] + edges[1:])
            halves = 0.5 * np.diff(edges)
            rho_nodes = (mids[:, None] + halves[:, None] * x_ref[None, :]).ravel()
            w = (halves[:, None] * w_ref[None, :]).ravel()
            E = _free_energy_of_rho(rho_nodes) if interp is None else interp(rho_nodes)
            phase = np.exp(1j * t * np.sqrt(E + 3.0)) * np.cos(M * rho_nodes)
            hv = 1.0 if h is None else np.asarray(h(E))
            total += np.sum(w * hv * phase)
            n_used += len(rho_nodes)
        return total, n_used

    coarse, _ = evaluate(1)
    fine, n_nodes = evaluate(2)
    err = abs(fine - coarse)
    low = err > rel_target * max(abs(fine), 1e-12) + 1e-10
    if low:
        finer, n_nodes = evaluate(4)
        err = abs(finer - fine)
        fine = finer
        low = err > rel_target * max(abs(fine), 1e-12) + 1e-10
    return OscIntegralResult(
        value=complex(fine),
        t=t,
        M=M,
        bound_paper=bound_small_m(t),
        quadrature_error_estimate=float(err),
        n_nodes=n_nodes,
        low_confidence=bool(low),
    )


@dataclass
class SweepRow:
    t: float
    M: float
    re: float
    im: float
    absval: float
    bound: float
    ratio: float
    regime: str


@dataclass
class SweepResult:
    rows: list
    max_scaled: float  # max over M of |I_M| <t>^{1/3}
    fitted_constant: float
    j_star_rows: list


def dispersive_bound_sweep(
    t_list, M_list, h, grid: SpectralGrid, eps0: float = 0.0, sigma: float = 1.0 / 200.0
) -> SweepResult:
    """Evaluate I_M over the (t, M) grid against the two regime bounds."""
    rows = []
    max_scaled = 0.0
    for t in t_list:
        for M in M_list:
            res = oscillatory_integral(h, M, t, grid)
            cutoff = large_m_cutoff(t)
            if M != 0 and abs(M) >= cutoff:
                bound = bound_large_m(M, t)
                regime = "large-M"
            else:
                bound = bound_small_m(t)
                regime = "small-M"
            a = abs(res.value)
            rows.append(
                SweepRow(
                    t=t,
                    M=M,
                    re=res.value.real,
                    im=res.value.imag,
                    absval=a,
                    bound=bound,
                    ratio=a / bound if bound > 0 else math.inf,
                    regime=regime,
                )
            )
            max_scaled = max(max_scaled, a * bracket(t) ** (1.0 / 3.0))
    fitted = max_scaled
    j_rows = [(t, *j_star(t, eps0, sigma)) for t in t_list]
    return SweepResult(rows=rows, max_scaled=max_scaled, fitted_constant=fitted, j_star_rows=j_rows)


# -- decay fits ------------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    exponent: float
    intercept: float
    fit_window: tuple
    rms_residual: float
    n_samples: int


def fit_decay_exponent(profile: DecayProfile, window: tuple) -> DecayFit:
    """Least-squares slope of log |u|_inf against log <t> inside the window."""
    t_lo, t_hi = window
    mask = (profile.times >= t_lo) & (profile.times <= t_hi) & (profile.linf > 0)
    if int(mask.sum()) < 10:
        raise ValueError("need at least 10 samples in the fit window")
    x = np.log(bracket(profile.times[mask]))
    y = np.log(profile.linf[mask])
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return DecayFit(
        exponent=float(coef[0]),
        intercept=float(coef[1]),
        fit_window=(float(t_lo), float(t_hi)),
        rms_residual=float(np.sqrt(np.mean(resid**2))),
        n_samples=int(mask.sum()),
    )
