"""Generalized eigenfunctions and the spectral transform.

For each energy on a quadrature grid, the reducing conjugation Z of the
cocycle yields a Bloch wave psi_n = e^{i n xi} f_n(theta) solving the
three-term recurrence; the real pair K_n = Im(psi_n conj(psi_0)),
J_n = Re(psi_n conj(psi_0)) spans the solution space away from resonances.
The transform S q = (sum q_n K_n, sum q_n J_n) is近 unitary with the diagonal
measure rho'(E) dE / pi: `plancherel_defect` and `inverse_check` measure how
close.

Resonant strata are damped by sin^5(xi) and nodes with |sin xi| below a
floor are excised from quadrature (their rho-measure is logged):
ill-conditioned waves near gap cores never enter the integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.interpolate

from kglattice import kam
from kglattice.model import FrequencyVector, QuasiPeriodicPotential, strip_norm
from kglattice.kam import KamSchedule, ReducibilityReport, fold_angle

SIN_FLOOR = 1e-3


def excision_threshold(eps_j: float, floor: float = SIN_FLOOR) -> float:
    """min(1.5 eps^{1/20}, floor): the eps^{1/20} form is vacuous at desk scale."""
    return min(1.5 * eps_j ** (1.0 / 20.0), floor)


def _gauss_panels(
    breaks: np.ndarray, order: int, jacobi_left: bool = False, jacobi_right: bool = False
):
    """Composite Gauss-Legendre nodes/weights over consecutive panels.

    With jacobi_left/right the first/last panel uses Gauss-Jacobi nodes whose
    effective weights absorb an inverse-square-root factor at the outer panel
    end, the band-edge behavior of rho'.
    """
    import scipy.special

    x, w = np.polynomial.legendre.leggauss(order)
    xj, wj = scipy.special.roots_jacobi(order, 0.0, -0.5)  # weight (1+x)^{-1/2}
    panels = [(a, b) for a, b in zip(breaks[:-1], breaks[1:]) if b - a > 0]
    nodes, weights = [], []
    for i, (a, b) in enumerate(panels):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        if jacobi_left and i == 0:
            E = mid + half * xj
            weights.append(wj * math.sqrt(half) * np.sqrt(E - a))
            nodes.append(E)
        elif jacobi_right and i == len(panels) - 1:
            E = mid - half * xj  # mirror: weight singular at b
            weights.append(wj * math.sqrt(half) * np.sqrt(b - E))
            nodes.append(E)
        else:
            nodes.append(mid + half * x)
            weights.append(half * w)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    order_idx = np.argsort(nodes, kind="stable")
    return nodes[order_idx], weights[order_idx]


def _edge_graded_breaks(
    a: float,
    b: float,
    interior: int,
    levels: int,
    edge_frac: float = 0.125,
    grade_left: bool = True,
    grade_right: bool = True,
):
    """Panel breakpoints on [a, b], geometrically refined into flagged ends."""
    width = (b - a) * edge_frac
    left = [a + width * 2.0**-k for k in range(levels, 0, -1)] if grade_left else []
    right = [b - width * 2.0**-k for k in range(1, levels + 1)] if grade_right else []
    lo = a + width if grade_left else a
    hi = b - width if grade_right else b
    mid = np.linspace(lo, hi, interior + 1)
    return np.unique(np.concatenate(([a], left, mid, right, [b])))


@dataclass
class SpectralGrid:
    """Quadrature nodes with rotation-number data and per-node stratum labels."""

    energies: np.ndarray
    weights: np.ndarray
    rho: np.ndarray
    drho: np.ndarray
    xi: np.ndarray
    stratum: np.ndarray
    included: np.ndarray  # quadrature mask after excision
    free: bool
    reports: list | None = None
    excised_measure: float = 0.0
    domain: tuple = (-2.0, 2.0)
    breaks: np.ndarray | None = None
    _rho_interp: object = field(default=None, repr=False)

    def rho_fn(self, E):
        E = np.asarray(E, dtype=float)
        if self.free:
            return np.arccos(np.clip(-E / 2.0, -1.0, 1.0))
        return self._rho_interp(np.clip(E, self.domain[0], self.domain[1]))

    def drho_fn(self, E):
        E = np.asarray(E, dtype=float)
        if self.free:
            inside = np.abs(E) < 2.0
            out = np.zeros_like(E)
            out[inside] = 1.0 / np.sqrt(4.0 - E[inside] ** 2)
            return out
        return self._rho_interp.derivative()(np.clip(E, self.domain[0], self.domain[1]))

    def excised_spans(self) -> list:
        """Merged E-intervals whose nodes were removed from quadrature."""
        spans = []
        bad = ~self.included
        i = 0
        E = self.energies
        while i < len(E):
            if bad[i]:
                j = i
                while j + 1 < len(E) and bad[j + 1]:
                    j += 1
                spans.append((float(E[i]), float(E[j])))
                i = j + 1
            else:
                i += 1
        return spans


def build_free_grid(
    interior_panels: int = 120, edge_levels: int = 16, gl_order: int = 12
) -> SpectralGrid:
    """Exact grid for the unperturbed band [-2, 2]: rho = arccos(-E/2).

    The outermost panels use Jacobi weights matched to the inverse-sqrt
    spike of rho' at the band edges.
    """
    breaks = _edge_graded_breaks(-2.0, 2.0, interior_panels, edge_levels)
    E, w = _gauss_panels(breaks, gl_order, jacobi_left=True, jacobi_right=True)
    rho = np.arccos(np.clip(-E / 2.0, -1.0, 1.0))
    drho = 1.0 / np.sqrt(4.0 - E**2)
    return SpectralGrid(
        energies=E,
        weights=w,
        rho=rho,
        drho=drho,
        xi=rho.copy(),
        stratum=np.zeros(len(E), dtype=int),
        included=np.ones(len(E), dtype=bool),
        free=True,
        domain=(-2.0, 2.0),
    )


def _signature(report: ReducibilityReport) -> tuple:
    return (report.stratum, report.elliptic, report.history_signature())


def build_grid(
    P: QuasiPeriodicPotential,
    omega: FrequencyVector,
    schedule: KamSchedule,
    n_scout: int = 97,
    interior_panels: int = 24,
    edge_levels: int = 10,
    gl_order: int = 8,
    bisect_iters: int = 16,
    residual_gate: float = 1e-6,
    threshold_cap: float | None = None,
    drho_mode: str = "fd",
) -> SpectralGrid:
    """Quadrature grid for a perturbed band via per-node reductions.

    A scout pass locates stratum boundaries (changes of resonance history),
    which are refined by bisection; Gauss-Legendre panels are then laid
    between boundaries with geometric refinement into the band edges, where
    rho' spikes.  rho'(E) comes from the derivative of the monotone
    interpolant of the sampled rho (drho_mode="fd" switches to per-node
    central differences, three reductions per node).
    """
    if P.is_zero():
        return build_free_grid()
    eps0 = strip_norm(P)
    lo, hi = -2.0 - 2.0 * eps0, 2.0 + 2.0 * eps0
    cache: dict = {}

    def reduced(E: float) -> ReducibilityReport:
        key = round(float(E), 14)
        if key not in cache:
            cache[key] = kam.reduce(E, P, omega, schedule, threshold_cap=threshold_cap)
        return cache[key]

    # seed the scout near every predicted resonance: the stratum around the
    # half-harmonic <k>_w is narrower than the uniform scout spacing
    seeds = [np.linspace(lo, hi, n_scout)]
    thr0 = kam.resonance_threshold(schedule.eps[0], schedule.sigma, threshold_cap)
    for k in range(1, schedule.n_eff[0] + 1):
        angle = fold_angle(kam.half_harmonic((k,) + (0,) * (omega.d - 1), omega))
        if angle < 1e-3 or angle > math.pi - 1e-3:
            continue
        center = -2.0 * math.cos(angle)
        width = 2.0 * thr0 * k ** (-omega.tau) * 2.0 * math.sin(angle)
        offs = np.array([-4.0, -2.0, -1.0, -0.45, 0.0, 0.45, 1.0, 2.0, 4.0])
        seeds.append(np.clip(center + offs * max(width, 4.0 * eps0), lo, hi))
    scouts = np.unique(np.concatenate(seeds))
    sigs = [_signature(reduced(E)) for E in scouts]
    boundaries = []
    for a, b, sa, sb in zip(scouts[:-1], scouts[1:], sigs[:-1], sigs[1:]):
        if sa == sb:
            continue
        x, y, sy = a, b, sb
        for _ in range(bisect_iters):
            m = 0.5 * (x + y)
            if _signature(reduced(m)) == sa:
                x = m
            else:
                y, sy = m, _signature(reduced(m))
        boundaries.append(0.5 * (x + y))

    # Panels per region.  rho' has inverse-sqrt spikes only at spectral
    # edges, i.e. where ellipticity flips: grade geometrically into those
    # ends.  Non-elliptic regions (gap interiors, beyond the band) carry no
    # rotation-number mass and get a single coarse panel.
    cuts = np.concatenate(([lo], np.asarray(boundaries, dtype=float), [hi]))
    regions = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        regions.append((a, b, reduced(0.5 * (a + b)).elliptic))
    all_breaks = []
    sharp_cuts = []  # ellipticity flips: spectral edges with sqrt spikes
    for i, (a, b, elliptic) in enumerate(regions):
        length = b - a
        grade_l = i == 0 or not regions[i - 1][2]
        grade_r = i == len(regions) - 1 or not regions[i + 1][2]
        if elliptic and grade_l:
            sharp_cuts.append(a)
        if elliptic and grade_r:
            sharp_cuts.append(b)
        if not elliptic or length < 2e-3:
            all_breaks.append(np.array([a, b]))
            continue
        n_int = max(2, int(math.ceil(interior_panels * length / (hi - lo))))
        frac = min(0.2, 0.05 / length) if length > 0.05 else 0.2
        all_breaks.append(
            _edge_graded_breaks(
                a, b, n_int, edge_levels, edge_frac=frac,
                grade_left=grade_l, grade_right=grade_r,
            )
        )
    breaks = np.unique(np.concatenate(all_breaks))
    E, w = _gauss_panels(breaks, gl_order)

    reports = [reduced(x) for x in E]
    rho = np.array([r.rho for r in reports])
    xi = np.array([r.xi for r in reports])
    stratum = np.array([r.stratum for r in reports], dtype=int)

    interp = scipy.interpolate.PchipInterpolator(E, rho, extrapolate=True)
    drho = interp.derivative()(E)
    if drho_mode == "fd" and sharp_cuts:
        # central differences where rho' varies fastest (near spectral
        # edges); the step never crosses a region boundary, where the
        # resonance history changes.  The interpolant serves elsewhere.
        sharp = np.asarray(sharp_cuts)
        dist_to_sharp = np.min(np.abs(E[:, None] - sharp[None, :]), axis=1)
        dist_to_cut = np.min(np.abs(E[:, None] - cuts[None, :]), axis=1)
        need = dist_to_sharp < 0.06
        h = np.minimum(1e-5, 0.3 * dist_to_cut)
        for i in np.where(need)[0]:
            hh = h[i]
            drho[i] = (reduced(E[i] + hh).rho - reduced(E[i] - hh).rho) / (2.0 * hh)
    drho = np.maximum(drho, 0.0)

    eps_J = schedule.eps[min(len(schedule.eps) - 1, schedule.j_max)]
    thr = excision_threshold(eps_J)
    included = np.ones(len(E), dtype=bool)
    for i, r in enumerate(reports):
        if not r.elliptic or not r.converged or r.residual > residual_gate:
            included[i] = False
        elif abs(math.sin(fold_angle(r.xi))) < thr:
            included[i] = False
    excised = float(np.sum(w[~included] * drho[~included]))

    return SpectralGrid(
        breaks=breaks,
        energies=E,
        weights=w,
        rho=rho,
        drho=drho,
        xi=xi,
        stratum=stratum,
        included=included,
        free=False,
        reports=reports,
        excised_measure=excised,
        domain=(lo, hi),
        _rho_interp=interp,
    )


# -- Bloch waves ---------------------------------------------------------------


@dataclass
class BlochWave:
    E: float
    rho: float
    xi: float
    stratum: int
    sites: np.ndarray
    f: np.ndarray  # complex profile, f0 rotated real-positive
    psi: np.ndarray  # e^{i n rho-equivalent} profile (the actual solution)
    recurrence_defect: float
    damped: bool


def bloch_wave(
    reduction: ReducibilityReport,
    P: QuasiPeriodicPotential,
    theta0,
    sites,
    residual_gate: float = 1e-6,
    damp: bool = True,
) -> BlochWave:
    """Assemble psi_n from the reducing conjugation evaluated along the orbit.

    With Z(.+w)^{-1}(A0+F0)Z = B (+ residual), the column of Z applied to the
    eigenvector of B for e^{i xi} gives x_n = e^{i(n-1)xi} (Z11 v1 + Z12 v2)
    at theta + (n-1) w.  The residual perturbation bounds the recurrence
    defect, which is recomputed and stored.
    """
    if reduction.residual > residual_gate:
        raise ValueError(
            f"reduction residual {reduction.residual:.3e} exceeds the gate {residual_gate:.1e}"
        )
    state = reduction.state
    B = state.A
    xi = reduction.xi
    lam = np.exp(1j * xi)
    # eigenvector of B for e^{i xi}, scaled so the free case gives |f_0| = 1
    # (B12 ~ -1 near the unperturbed constant part, so no degeneracy)
    v = np.array([B[0, 1], lam - B[0, 0]]) * np.exp(-1j * xi)

    sites = np.asarray(sites, dtype=int)
    omega = state.omega
    t0 = np.asarray(theta0, dtype=float).reshape(-1)
    thetas = np.mod(t0[None, :] + (sites - 1)[:, None].astype(float) * omega.as_array()[None, :], state.Z.denom)
    Zv = state.Z.values(thetas)
    profile = Zv[:, 0, 0] * v[0] + Zv[:, 0, 1] * v[1]
    psi = np.exp(1j * xi * (sites - 1)) * profile

    damped = False
    if damp and reduction.stratum > 0:
        psi = psi * math.sin(fold_angle(xi)) ** 5
        damped = True

    # recurrence defect at interior sites, relative to the wave size
    from kglattice.model import sample_orbit

    pvals = sample_orbit(P, theta0, omega, sites)
    res = np.abs(
        -(psi[2:] + psi[:-2]) + (pvals[1:-1] - reduction.E) * psi[1:-1]
    )
    scale = max(float(np.max(np.abs(psi))), 1e-300)
    defect = float(np.max(res)) / scale if len(res) else 0.0

    i0 = int(np.where(sites == 0)[0][0]) if 0 in sites else 0
    rho_eff = reduction.rho
    f = psi * np.exp(-1j * rho_eff * sites)
    phase = f[i0]
    if abs(phase) > 0:
        f = f * (np.conj(phase) / abs(phase))
        psi_norm = psi * (np.conj(phase) / abs(phase))
    else:
        psi_norm = psi
    return BlochWave(
        E=reduction.E,
        rho=rho_eff,
        xi=xi,
        stratum=reduction.stratum,
        sites=sites,
        f=f,
        psi=psi_norm,
        recurrence_defect=defect,
        damped=damped,
    )


def eigenfunctions_KJ(wave: BlochWave) -> tuple[np.ndarray, np.ndarray]:
    """K_n = Im(psi_n conj(psi_0)), J_n = Re(psi_n conj(psi_0))."""
    i0 = int(np.where(wave.sites == 0)[0][0])
    c = wave.psi * np.conj(wave.psi[i0])
    return np.imag(c), np.real(c)


def beta_coefficients(wave: BlochWave) -> np.ndarray:
    """(n_sites, 3) table of beta_{n, n+off} for off in (-1, 0, +1).

    Resolves psi_n conj(psi_0) = sum_off beta e^{i (n+off) rho} with real
    coefficients by putting the even part at off=0 and splitting the odd part
    across off=+-1 (the symmetric choice; exact delta in the free case).
    """
    i0 = int(np.where(wave.sites == 0)[0][0])
    c = wave.psi * np.conj(wave.psi[i0]) * np.exp(-1j * wave.rho * wave.sites)
    a, b = np.real(c), np.imag(c)
    s = math.sin(wave.rho)
    if abs(s) < 1e-12:
        side = np.full_like(b, np.nan)
    else:
        side = b / (2.0 * s)
    return np.stack([-side, a, side], axis=1)


@dataclass
class KJTable:
    sites: np.ndarray
    K: np.ndarray  # (n_nodes, n_sites)
    J: np.ndarray
    beta: np.ndarray | None = None  # (n_nodes, n_sites, 3)
    recurrence_defects: np.ndarray | None = None


def kj_tables(
    grid: SpectralGrid,
    P: QuasiPeriodicPotential,
    theta0,
    sites,
    residual_gate: float = 1e-6,
    with_beta: bool = False,
) -> KJTable:
    """Per-node K/J rows over the site window (exact sin/cos when free)."""
    sites = np.asarray(sites, dtype=int)
    if grid.free:
        phases = np.outer(grid.rho, sites)
        return KJTable(sites=sites, K=np.sin(phases), J=np.cos(phases))
    n_nodes = len(grid.energies)
    K = np.zeros((n_nodes, len(sites)))
    J = np.zeros((n_nodes, len(sites)))
    beta = np.zeros((n_nodes, len(sites), 3)) if with_beta else None
    defects = np.zeros(n_nodes)
    for i, rep in enumerate(grid.reports):
        if not grid.included[i]:
            continue
        wave = bloch_wave(rep, P, theta0, sites, residual_gate=residual_gate)
        K[i], J[i] = eigenfunctions_KJ(wave)
        defects[i] = wave.recurrence_defect
        if with_beta:
            beta[i] = beta_coefficients(wave)
    return KJTable(sites=sites, K=K, J=J, beta=beta, recurrence_defects=defects)


# -- the transform -------------------------------------------------------------


def forward_transform(q: np.ndarray, grid: SpectralGrid, kj: KJTable):
    """g1(E) = sum_n q_n K_n(E), g2(E) = sum_n q_n J_n(E) per node."""
    q = np.asarray(q, dtype=float)
    return kj.K @ q, kj.J @ q


def transform_norm_sq(q: np.ndarray, grid: SpectralGrid, kj: KJTable) -> float:
    """(1/pi) int (g1^2 + g2^2) rho' dE by the grid quadrature."""
    g1, g2 = forward_transform(q, grid, kj)
    mask = grid.included
    return float(
        np.sum((grid.weights * grid.drho)[mask] * (g1[mask] ** 2 + g2[mask] ** 2)) / math.pi
    )


def plancherel_defect(q: np.ndarray, grid: SpectralGrid, kj: KJTable) -> float:
    """| ||S q||^2 / ||q||^2 - 1 |."""
    q = np.asarray(q, dtype=float)
    qq = float(np.dot(q, q))
    if qq == 0:
        raise ValueError("q must be nonzero")
    return abs(transform_norm_sq(q, grid, kj) / qq - 1.0)


def inverse_check(
    q: np.ndarray, grid: SpectralGrid, kj: KJTable, edge_exclude: int = 2
) -> float:
    """max_n |(1/pi) int (g1 K_n + g2 J_n) rho' dE - q_n|.

    Sites within edge_exclude of the window ends are left out of the max
    (the window is a hard truncation of the site axis).
    """
    q = np.asarray(q, dtype=float)
    g1, g2 = forward_transform(q, grid, kj)
    mask = grid.included
    wgt = (grid.weights * grid.drho)[mask]
    recon = (wgt[:, None] * (g1[mask, None] * kj.K[mask] + g2[mask, None] * kj.J[mask])).sum(
        axis=0
    ) / math.pi
    err = np.abs(recon - q)
    if edge_exclude > 0:
        err = err[edge_exclude:-edge_exclude]
    return float(np.max(err))
