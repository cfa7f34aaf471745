"""Quantitative reducibility of the transfer cocycle.

The cocycle (omega, A e^{f(theta)}) is driven toward a constant by repeating
two moves:

* a non-resonant step solves the linearized conjugacy equation for Y with
  Fourier support |k| <= N_eff, dividing mode by mode in the complex
  eigenbasis of A by the small divisors (e^{2 pi i <k,w>} - 1) and
  (e^{2 pi i <k,w>} - e^{+-2 i xi}), then conjugates by e^Y and absorbs the
  zero mode into the new constant part;
* when the eigenvalue angle xi is too close to a half-harmonic
  <k>_w = pi <k, omega> (mod pi), a rotation built from the eigenbasis and
  the half-angle phase diag(e^{i pi <k,theta>}, e^{-i pi <k,theta>}) shifts
  xi by exactly -<k>_w first.  The accumulated conjugation then lives on the
  doubled torus (half-integer modes), while the perturbation itself stays on
  the integer lattice.

Signed-angle bookkeeping: the matrix only exposes |xi| mod pi through its
trace, so the state carries a continuous signed branch of the angle; the sum
xi + (accumulated half-harmonic shifts) then tracks the rotation number.

At desk scale the threshold eps^sigma of the resonance test is ~1 (sigma is
tiny), which would mark every energy resonant for several k at once; the
test therefore caps the threshold at max(10 eps_j, 1e-7).  The cap keeps the
at-most-one-resonance property and reduces to the eps^sigma form when eps is
genuinely small.  Similarly the truncation N_j is floored at N_min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from kglattice.model import FrequencyVector, QuasiPeriodicPotential, strip_norm

DIVISOR_FLOOR = 1e-14
_DET_TOL = 1e-8


class KamError(RuntimeError):
    """Numerical inconsistency in the reducibility scheme (fatal)."""


class ResonanceAmbiguityError(KamError):
    """Two resonant mode classes at once: omega too far from Diophantine
    for the chosen (eps, sigma, N)."""


def fold_angle(x: float) -> float:
    """Representative of the eigenvalue angle in [0, pi]: arccos(cos x)."""
    return float(np.arccos(np.clip(np.cos(x), -1.0, 1.0)))


def half_harmonic(k, omega: FrequencyVector) -> float:
    """Angle pi <k, omega> of the half-harmonic labeled by the integer vector k."""
    return math.pi * float(np.dot(np.asarray(k, dtype=float), omega.as_array()))


def dist_mod_pi(x: float) -> float:
    """Distance of an angle to the nearest multiple of pi."""
    r = abs(x) % math.pi
    return min(r, math.pi - r)


# -- torus-valued matrix maps -------------------------------------------------


def _grid_size(kmax: int, d: int) -> int:
    size = 32 if d > 1 else 64
    need = 4 * max(kmax, 1) + 8
    while size < need:
        size *= 2
    return min(size, 16384)


@dataclass
class TorusMatrixMap:
    """Matrix-valued Fourier series on the (possibly doubled) torus.

    Key k (integer tuple) carries the frequency k/denom; real-valuedness is
    the Hermitian symmetry coeff(-k) = conj(coeff(k)).
    """

    d: int
    denom: int = 1
    coeffs: dict = field(default_factory=dict)

    @staticmethod
    def zero(d: int, denom: int = 1) -> "TorusMatrixMap":
        return TorusMatrixMap(d=d, denom=denom, coeffs={})

    @staticmethod
    def constant(M: np.ndarray, d: int, denom: int = 1) -> "TorusMatrixMap":
        key = (0,) * d
        return TorusMatrixMap(d=d, denom=denom, coeffs={key: np.array(M, dtype=complex)})

    def copy(self) -> "TorusMatrixMap":
        return TorusMatrixMap(
            d=self.d, denom=self.denom, coeffs={k: c.copy() for k, c in self.coeffs.items()}
        )

    def max_mode(self) -> int:
        if not self.coeffs:
            return 0
        return max(max(abs(c) for c in k) for k in self.coeffs)

    def norm(self) -> float:
        """Sum over modes of the spectral norm of the coefficient matrix."""
        if not self.coeffs:
            return 0.0
        stack = np.stack(list(self.coeffs.values()))
        return float(np.sum(np.linalg.norm(stack, ord=2, axis=(1, 2))))

    def shifted(self, omega: FrequencyVector) -> "TorusMatrixMap":
        """The map theta -> f(theta + omega)."""
        w = omega.as_array()
        out = {}
        for k, c in self.coeffs.items():
            phase = np.exp(2j * math.pi * np.dot(k, w) / self.denom)
            out[k] = c * phase
        return TorusMatrixMap(d=self.d, denom=self.denom, coeffs=out)

    def basis_conjugated(self, L: np.ndarray, R: np.ndarray) -> "TorusMatrixMap":
        """Mode-wise L @ c_k @ R."""
        out = {k: L @ c @ R for k, c in self.coeffs.items()}
        return TorusMatrixMap(d=self.d, denom=self.denom, coeffs=out)

    def mode_shifted_entry(self, entry: tuple, shift: tuple) -> "TorusMatrixMap":
        """Shift the modes of one matrix entry by an integer key offset."""
        out: dict = {}
        i, j = entry
        for k, c in self.coeffs.items():
            rest = c.copy()
            moved = rest[i, j]
            rest[i, j] = 0.0
            if np.any(rest != 0):
                acc = out.setdefault(k, np.zeros((2, 2), dtype=complex))
                acc += rest
            if moved != 0:
                kk = tuple(a + b for a, b in zip(k, shift))
                acc = out.setdefault(kk, np.zeros((2, 2), dtype=complex))
                acc[i, j] += moved
        return TorusMatrixMap(d=self.d, denom=self.denom, coeffs=out)

    def symmetrized(self) -> tuple["TorusMatrixMap", float]:
        """Enforce coeff(-k) = conj(coeff(k)); returns the defect removed."""
        out: dict = {}
        defect = 0.0
        seen = set()
        for k in self.coeffs:
            if k in seen:
                continue
            neg = tuple(-c for c in k)
            seen.add(k)
            seen.add(neg)
            a = self.coeffs.get(k, np.zeros((2, 2), dtype=complex))
            b = self.coeffs.get(neg, np.zeros((2, 2), dtype=complex))
            avg = 0.5 * (a + np.conj(b))
            defect = max(defect, float(np.max(np.abs(a - np.conj(b)))) * 0.5)
            out[k] = avg
            out[neg] = np.conj(avg)
        return TorusMatrixMap(d=self.d, denom=self.denom, coeffs=out), defect

    def truncated(self, drop_tol: float) -> "TorusMatrixMap":
        out = {k: c for k, c in self.coeffs.items() if np.max(np.abs(c)) > drop_tol}
        return TorusMatrixMap(d=self.d, denom=self.denom, coeffs=out)

    def with_denom(self, denom: int) -> "TorusMatrixMap":
        """Re-key onto a finer frequency lattice (denom must be a multiple)."""
        if denom == self.denom:
            return self.copy()
        if denom % self.denom != 0:
            raise ValueError("target denom must be a multiple")
        fac = denom // self.denom
        out = {tuple(fac * c for c in k): v.copy() for k, v in self.coeffs.items()}
        return TorusMatrixMap(d=self.d, denom=denom, coeffs=out)

    def values(self, thetas: np.ndarray) -> np.ndarray:
        """Evaluate at an (n, d) array of torus points; returns (n, 2, 2) complex."""
        th = np.asarray(thetas, dtype=float)
        if th.ndim == 1:
            th = th[:, None] if self.d == 1 else th[None, :]
        n = th.shape[0]
        if not self.coeffs:
            return np.zeros((n, 2, 2), dtype=complex)
        keys = np.array(list(self.coeffs.keys()), dtype=float)
        mats = np.stack(list(self.coeffs.values()))
        phases = np.exp(2j * math.pi * (th @ keys.T) / self.denom)
        return np.einsum("nm,mij->nij", phases, mats)

    def value(self, theta) -> np.ndarray:
        th = np.atleast_1d(np.asarray(theta, dtype=float)).reshape(1, -1)
        return self.values(th)[0]

    def grid_values(self, L: int) -> np.ndarray:
        """Samples on the FFT grid theta_m = denom * m / L, shape (L,)*d + (2,2)."""
        shape = (L,) * self.d
        arr = np.zeros(shape + (2, 2), dtype=complex)
        for k, c in self.coeffs.items():
            idx = tuple(int(a) % L for a in k)
            arr[idx] += c
        axes = tuple(range(self.d))
        return np.fft.ifftn(arr, axes=axes) * (L**self.d)

    @staticmethod
    def from_grid(samples: np.ndarray, denom: int, drop_tol: float = 0.0) -> "TorusMatrixMap":
        d = samples.ndim - 2
        L = samples.shape[0]
        axes = tuple(range(d))
        spec = np.fft.fftn(samples, axes=axes) / (L**d)
        freqs = (np.fft.fftfreq(L) * L).astype(int)
        mags = np.max(np.abs(spec), axis=(-2, -1))
        coeffs: dict = {}
        for idx in np.argwhere(mags > drop_tol):
            key = tuple(int(freqs[i]) for i in idx)
            coeffs[key] = np.array(spec[tuple(idx)], dtype=complex)
        return TorusMatrixMap(d=d, denom=denom, coeffs=coeffs)


def grid_thetas(d: int, denom: int, L: int) -> np.ndarray:
    """The FFT sample points matching grid_values, flattened to (L^d, d)."""
    axes = [denom * np.arange(L) / L for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


# -- 2x2 matrix exponentials / logarithms (batched) ---------------------------


def expm2(X: np.ndarray) -> np.ndarray:
    """exp of (..., 2, 2) complex matrices via the Cayley-Hamilton closed form."""
    X = np.asarray(X, dtype=complex)
    half_tr = 0.5 * (X[..., 0, 0] + X[..., 1, 1])
    X0 = X.copy()
    X0[..., 0, 0] -= half_tr
    X0[..., 1, 1] -= half_tr
    mu2 = -(X0[..., 0, 0] * X0[..., 1, 1] - X0[..., 0, 1] * X0[..., 1, 0])
    mu = np.sqrt(mu2.astype(complex))
    small = np.abs(mu) < 1e-8
    cosh = np.cosh(mu)
    sinhc = np.where(small, 1.0 + mu2 / 6.0, np.sinh(np.where(small, 1.0, mu)) / np.where(small, 1.0, mu))
    eye = np.zeros_like(X)
    eye[..., 0, 0] = 1.0
    eye[..., 1, 1] = 1.0
    out = cosh[..., None, None] * eye + sinhc[..., None, None] * X0
    return np.exp(half_tr)[..., None, None] * out


def logm2_sl2(G: np.ndarray) -> np.ndarray:
    """Principal log of (..., 2, 2) near-identity matrices with det ~ 1."""
    G = np.asarray(G, dtype=complex)
    a = 0.5 * (G[..., 0, 0] + G[..., 1, 1])
    B = G.copy()
    B[..., 0, 0] -= a
    B[..., 1, 1] -= a
    s = np.lib.scimath.arccos(np.where(np.abs(a) <= 1.0, a, a.astype(complex)))
    small = np.abs(s) < 1e-8
    sin_s = np.sin(np.where(small, 1.0, s))
    factor = np.where(small, 1.0 + s * s / 6.0, s / sin_s)
    return factor[..., None, None] * B


def _inv2(M: np.ndarray) -> np.ndarray:
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 1, 1] = M[..., 0, 0]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    return out / det[..., None, None]


# -- schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class KamSchedule:
    """eps_{j+1} = eps_j^{1+sigma}; N_j = 4^{j+1} sigma |ln eps_j|, floored at N_min."""

    sigma: float
    eps: tuple
    n_raw: tuple
    n_eff: tuple
    n_min: int
    j_max: int


def make_schedule(
    eps0: float, sigma: float = 1.0 / 200.0, j_max: int = 8, n_min: int = 20
) -> KamSchedule:
    if not (0.0 < eps0 < 1.0):
        raise ValueError("eps0 must lie in (0, 1)")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    eps = [eps0]
    for _ in range(j_max):
        eps.append(eps[-1] ** (1.0 + sigma))
    n_raw = [4.0 ** (j + 1) * sigma * abs(math.log(e)) for j, e in enumerate(eps)]
    n_eff = [max(int(math.ceil(n)), n_min) for n in n_raw]
    if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
        raise ValueError("eps sequence failed to decrease")
    return KamSchedule(
        sigma=sigma,
        eps=tuple(eps),
        n_raw=tuple(n_raw),
        n_eff=tuple(n_eff),
        n_min=n_min,
        j_max=j_max,
    )


# -- eigenvalue angles and resonances ------------------------------------------


@dataclass(frozen=True)
class EigenAngle:
    xi: float
    elliptic: bool


def eigen_angle(A: np.ndarray, det_tol: float = _DET_TOL) -> EigenAngle:
    """Angle xi with eigenvalues e^{+-i xi} (elliptic) or the 0/pi marker."""
    A = np.asarray(A)
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    if abs(det - 1.0) > det_tol:
        raise ValueError(f"matrix is not unimodular: det = {det}")
    half_tr = 0.5 * float(np.real(A[0, 0] + A[1, 1]))
    if abs(half_tr) <= 1.0:
        return EigenAngle(xi=float(np.arccos(half_tr)), elliptic=True)
    return EigenAngle(xi=0.0 if half_tr > 0 else math.pi, elliptic=False)


@dataclass(frozen=True)
class ResonanceCheck:
    resonant: bool
    k: tuple | None
    distance: float
    threshold: float


def _mode_vectors(d: int, n_max: int):
    """Nonzero integer vectors with |k|_inf <= n_max, one per +-k class."""
    if d == 1:
        for n in range(1, n_max + 1):
            yield (n,)
        return
    import itertools

    for k in itertools.product(range(-n_max, n_max + 1), repeat=d):
        if any(c != 0 for c in k):
            if k > tuple(-c for c in k):
                continue
            yield k


def resonance_threshold(eps_j: float, sigma: float, cap: float | None = None) -> float:
    """min(eps^sigma, cap); the cap is the desk-scale guard (see module docstring).

    cap ~ 3 eps keeps the homological solution small near stratum edges
    (|Y| <= |f-mode| / (2 sin 3eps) ~ 1/12) while excising as little
    rotation-number measure as possible.
    """
    if cap is None:
        cap = max(3.0 * eps_j, 1e-7)
    return min(eps_j**sigma, cap)


def check_resonance(
    xi: float,
    omega: FrequencyVector,
    eps_j: float,
    sigma: float,
    tau: float,
    n_eff: int,
    threshold_cap: float | None = None,
) -> ResonanceCheck:
    """Scan 0 < |k| <= n_eff for |xi - <k>_w| < thr |k|^{-tau} (mod pi).

    Returns the violating k (sign chosen so the rotation by -<k>_w cancels
    xi); ties break on smaller |k| then lexicographic order.  Two violating
    +-classes signal that omega is insufficiently Diophantine for the chosen
    (eps, sigma, N) and raise KamError.
    """
    base = resonance_threshold(eps_j, sigma, threshold_cap)
    best = None  # (|k|, k, distance, threshold)
    violations = []
    for k in _mode_vectors(omega.d, n_eff):
        size = max(abs(c) for c in k)
        thr = base * size ** (-tau)
        angle = half_harmonic(k, omega)
        d_plus = dist_mod_pi(xi - angle)
        d_minus = dist_mod_pi(xi + angle)
        if d_plus <= d_minus:
            dist, signed = d_plus, k
        else:
            dist, signed = d_minus, tuple(-c for c in k)
        if dist < thr:
            violations.append(k)
            cand = (size, signed, dist, thr)
            if best is None or (cand[0], cand[1]) < (best[0], best[1]):
                best = cand
    if len(violations) >= 2:
        raise ResonanceAmbiguityError(
            f"multiple resonant modes {violations} at xi={xi:.6g}; "
            "omega insufficiently Diophantine for the chosen eps, sigma, N"
        )
    if best is None:
        return ResonanceCheck(resonant=False, k=None, distance=math.inf, threshold=base)
    return ResonanceCheck(resonant=True, k=best[1], distance=best[2], threshold=best[3])


# -- state and steps -----------------------------------------------------------


@dataclass
class KamState:
    A: np.ndarray
    f: TorusMatrixMap
    xi: float  # signed continuous branch; fold_angle(xi) == eigen_angle(A).xi
    history: list
    rho_shift: float
    j: int
    schedule: KamSchedule
    residual_norm: float
    Z: TorusMatrixMap
    omega: FrequencyVector
    elliptic: bool = True
    sym_defect: float = 0.0
    min_divisor: float = math.inf

    def rho(self) -> float:
        """Rotation-number approximant xi_J + sum of applied half-harmonics."""
        return self.xi + self.rho_shift


def initial_state(
    E: float,
    P: QuasiPeriodicPotential,
    omega: FrequencyVector,
    schedule: KamSchedule,
) -> KamState:
    """Cocycle A e^{f} equal to the transfer matrix: f = [[0,0],[-P,0]] (nilpotent)."""
    A0 = np.array([[-E, -1.0], [1.0, 0.0]])
    coeffs = {}
    for k, p in P.coeffs.items():
        if p != 0.0:
            coeffs[k] = np.array([[0.0, 0.0], [-p, 0.0]], dtype=complex)
    f0 = TorusMatrixMap(d=P.d, denom=1, coeffs=coeffs)
    ang = eigen_angle(A0)
    Z0 = TorusMatrixMap.constant(np.eye(2), d=P.d, denom=1)
    return KamState(
        A=A0,
        f=f0,
        xi=ang.xi,
        history=[],
        rho_shift=0.0,
        j=0,
        schedule=schedule,
        residual_norm=f0.norm(),
        Z=Z0,
        omega=omega,
        elliptic=ang.elliptic,
    )


def _eigenbasis(A: np.ndarray):
    """Columns C = [v, v'] with A = C diag(lam1, lam2) C^{-1}.

    Elliptic: lam1 = e^{i xi}, v' = conj(v); hyperbolic: real eigenpairs.
    """
    A = np.asarray(A, dtype=float)
    tr = A[0, 0] + A[1, 1]
    disc = tr * tr / 4.0 - 1.0
    if disc < 0:
        lam1 = tr / 2.0 + 1j * math.sqrt(-disc)
        lam2 = np.conj(lam1)
    else:
        root = math.sqrt(disc)
        lam1 = tr / 2.0 + root
        lam2 = tr / 2.0 - root
    if abs(lam1 - lam2) < 1e-13:
        raise KamError("eigenbasis degenerate (parabolic constant part)")

    def eigvec(lam):
        r1 = np.array([A[0, 1], lam - A[0, 0]], dtype=complex)
        r2 = np.array([lam - A[1, 1], A[1, 0]], dtype=complex)
        v = r1 if np.linalg.norm(r1) >= np.linalg.norm(r2) else r2
        return v / np.linalg.norm(v)

    v1 = eigvec(lam1)
    v2 = np.conj(v1) if disc < 0 else eigvec(lam2)
    C = np.stack([v1, v2], axis=1)
    detC = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
    if abs(detC) < 1e-10:
        raise KamError("eigenbasis degenerate (near-parabolic constant part)")
    return C, _inv2(C), (lam1, lam2)


def _resign(xi_folded: float, elliptic: bool, previous: float) -> float:
    """Signed-branch candidate (+-xi + 2 pi m) closest to the previous value."""
    best = None
    for base in (xi_folded, -xi_folded):
        m = round((previous - base) / (2.0 * math.pi))
        for mm in (m - 1, m, m + 1):
            cand = base + 2.0 * math.pi * mm
            if best is None or abs(cand - previous) < abs(best - previous):
                best = cand
    return best


def _realify(M: np.ndarray, where: str, tol: float = 1e-7) -> np.ndarray:
    imag = float(np.max(np.abs(np.imag(M))))
    if imag > tol * max(1.0, float(np.max(np.abs(M)))):
        raise KamError(f"{where}: imaginary residue {imag:.3e} exceeds tolerance")
    return np.real(M)


def resonant_rotation(state: KamState, k0) -> KamState:
    """Conjugate by the half-harmonic rotation; the angle shifts by exactly -<k0>_w.

    The rotation is H = C Q C^{-1} with Q = diag(e^{i pi <k0,th>}, e^{-...})
    in the eigenbasis whose first column carries the signed branch of xi.
    The perturbation transforms entrywise with integer mode shifts -+k0 on
    the off-diagonal (so it stays on its lattice), while the accumulated
    conjugation picks up half-integer modes and moves to the doubled torus.
    """
    k0 = tuple(int(c) for c in k0)
    if all(c == 0 for c in k0):
        raise ValueError("resonant mode k0 must be nonzero")
    if not state.elliptic:
        raise KamError("resonant rotation requires an elliptic constant part")
    C, Cinv, (lam1, lam2) = _eigenbasis(state.A)
    if math.sin(state.xi) < 0:
        # signed branch sits on the conjugate eigenvalue: swap the columns
        C = C[:, ::-1]
        Cinv = _inv2(C)
        lam1, lam2 = lam2, lam1
    delta = half_harmonic(k0, state.omega)

    new_A = C @ np.diag([lam1 * np.exp(-1j * delta), lam2 * np.exp(1j * delta)]) @ Cinv
    new_A = _realify(new_A, "resonant rotation constant part")

    g = state.f.basis_conjugated(Cinv, C)
    key_shift = tuple(c * state.f.denom for c in k0)
    g = g.mode_shifted_entry((0, 1), tuple(-c for c in key_shift))
    g = g.mode_shifted_entry((1, 0), key_shift)
    new_f = g.basis_conjugated(C, Cinv)
    new_f, sym_defect = new_f.symmetrized()

    # H has half-integer modes +-k0/2: doubled-torus bookkeeping for Z
    P_plus = np.outer(C[:, 0], Cinv[0, :])
    P_minus = np.outer(C[:, 1], Cinv[1, :])
    d = state.f.d
    H = TorusMatrixMap(d=d, denom=2, coeffs={})
    for key, mat in ((k0, P_plus), (tuple(-c for c in k0), P_minus)):
        acc = H.coeffs.setdefault(key, np.zeros((2, 2), dtype=complex))
        acc += mat
    new_Z = _compose_maps(state.Z, H, state.omega)

    return replace(
        state,
        A=new_A,
        f=new_f,
        xi=state.xi - delta,
        rho_shift=state.rho_shift + delta,
        Z=new_Z,
        sym_defect=max(state.sym_defect, sym_defect),
    )


def _compose_maps(Z: TorusMatrixMap, W: TorusMatrixMap, omega: FrequencyVector) -> TorusMatrixMap:
    """Pointwise product Z(theta) W(theta) via a common FFT grid."""
    denom = max(Z.denom, W.denom)
    Za = Z.with_denom(denom)
    Wa = W.with_denom(denom)
    kmax = max(Za.max_mode(), Wa.max_mode())
    L = _grid_size(kmax + 2, Z.d)
    prod = Za.grid_values(L) @ Wa.grid_values(L)
    out = TorusMatrixMap.from_grid(prod, denom=denom, drop_tol=1e-16)
    out, _ = out.symmetrized()
    return out


def kam_step(state: KamState) -> KamState:
    """One non-resonant step: solve for Y below the truncation, conjugate by e^Y.

    The new constant part absorbs the zero mode of log(A^{-1} G); the new
    perturbation (tail modes plus the quadratic remainder) is read back off
    the conjugated cocycle exactly, so the conjugacy identity holds to
    representation accuracy by construction.
    """
    sched = state.schedule
    if state.j >= sched.j_max:
        raise ValueError("schedule exhausted")
    n_eff = sched.n_eff[state.j]
    C, Cinv, (lam1, lam2) = _eigenbasis(state.A)
    ratio12 = lam2 / lam1  # e^{-2 i xi} when elliptic
    ratio21 = lam1 / lam2
    w = state.omega.as_array()
    denom = state.f.denom

    g = state.f.basis_conjugated(Cinv, C)
    y_coeffs: dict = {}
    min_div = math.inf
    for k, c in g.coeffs.items():
        if all(v == 0 for v in k):
            continue
        if max(abs(v) for v in k) > n_eff * denom:
            continue
        phase = np.exp(2j * math.pi * np.dot(k, w) / denom)
        divisors = np.array(
            [
                [phase - 1.0, phase * ratio12 - 1.0],
                [phase * ratio21 - 1.0, phase - 1.0],
            ],
            dtype=complex,
        )
        mags = np.abs(divisors)
        active = np.abs(c) > 1e-300
        if np.any(active):
            rel = float(np.min(mags[active]))
            min_div = min(min_div, rel)
            if rel < DIVISOR_FLOOR:
                raise KamError(
                    f"small divisor {rel:.3e} at mode {k} despite non-resonant verdict"
                )
        y_coeffs[k] = c / divisors
    Y_d = TorusMatrixMap(d=state.f.d, denom=denom, coeffs=y_coeffs)
    Y = Y_d.basis_conjugated(C, Cinv)
    Y, sym_defect = Y.symmetrized()

    kmax = max(state.f.max_mode(), Y.max_mode())
    L = _grid_size(kmax + 2, state.f.d)
    Yg = Y.grid_values(L)
    Ysg = Y.shifted(state.omega).grid_values(L)
    fg = state.f.grid_values(L)
    A = state.A.astype(complex)
    G = expm2(-Ysg) @ (A @ expm2(fg)) @ expm2(Yg)

    mean_log = logm2_sl2(_inv2(A) @ G)
    axes = tuple(range(state.f.d))
    zero_mode = np.mean(mean_log, axis=axes)
    new_A = _realify(A @ expm2(zero_mode), "constant part update")
    det = new_A[0, 0] * new_A[1, 1] - new_A[0, 1] * new_A[1, 0]
    new_A /= math.sqrt(abs(det))

    f_samples = logm2_sl2(_inv2(new_A.astype(complex)) @ G)
    new_f = TorusMatrixMap.from_grid(f_samples, denom=denom, drop_tol=1e-17)
    new_f, sym2 = new_f.symmetrized()
    new_f = new_f.truncated(1e-17)

    residual = new_f.norm()
    if not (np.all(np.isfinite(new_A)) and math.isfinite(residual)):
        raise KamError("step produced non-finite data (divisor floor reached)")
    ang = eigen_angle(new_A)
    new_xi = _resign(ang.xi, ang.elliptic, state.xi)
    new_Z = _compose_exp(state.Z, Y, state.omega)

    return replace(
        state,
        A=new_A,
        f=new_f,
        xi=new_xi,
        j=state.j + 1,
        residual_norm=residual,
        Z=new_Z,
        elliptic=ang.elliptic,
        sym_defect=max(state.sym_defect, sym_defect, sym2),
        min_divisor=min(state.min_divisor, min_div),
    )


def _compose_exp(Z: TorusMatrixMap, Y: TorusMatrixMap, omega: FrequencyVector) -> TorusMatrixMap:
    """Z(theta) e^{Y(theta)} on a common grid."""
    denom = max(Z.denom, Y.denom)
    Za = Z.with_denom(denom)
    Ya = Y.with_denom(denom)
    kmax = max(Za.max_mode(), Ya.max_mode())
    L = _grid_size(kmax + 2, Z.d)
    prod = Za.grid_values(L) @ expm2(Ya.grid_values(L))
    out = TorusMatrixMap.from_grid(prod, denom=denom, drop_tol=1e-16)
    out, _ = out.symmetrized()
    return out


def transfer_map_value(E: float, P: QuasiPeriodicPotential, thetas: np.ndarray) -> np.ndarray:
    """A0 + F0 at torus points: [[P-E, -1], [1, 0]] batched."""
    from kglattice.model import eval_series

    th = np.asarray(thetas, dtype=float)
    if th.ndim == 1:
        th = th[:, None]
    p = eval_series(P, th)
    out = np.zeros(th.shape[:1] + (2, 2), dtype=complex)
    out[:, 0, 0] = p - E
    out[:, 0, 1] = -1.0
    out[:, 1, 0] = 1.0
    return out


def conjugacy_defect(
    E: float,
    P: QuasiPeriodicPotential,
    state: KamState,
    n_samples: int = 256,
) -> float:
    """max over theta samples of |Z(th+w)^{-1}(A0+F0(th))Z(th) - A_J e^{f_J(th)}|."""
    d = state.f.d
    offs = 0.2137 / n_samples
    axis = state.Z.denom * (np.arange(n_samples) / n_samples) + offs
    if d == 1:
        thetas = axis[:, None]
    else:
        thetas = np.tile(axis[:, None], (1, d))
    Zv = state.Z.values(thetas)
    Zs = state.Z.shifted(state.omega).values(thetas)
    cocycle = transfer_map_value(E, P, thetas)
    lhs = _inv2(Zs) @ cocycle @ Zv
    rhs = state.A.astype(complex)[None, :, :] @ expm2(state.f.values(thetas))
    return float(np.max(np.abs(lhs - rhs)))


# -- the full reduction -------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    j: int
    xi: float
    k: tuple | None
    residual: float
    defect: float | None


@dataclass
class ReducibilityReport:
    E: float
    steps: list[StepRecord]
    rho: float
    stratum: int
    xi: float
    elliptic: bool
    residual: float
    converged: bool
    state: KamState

    def history_signature(self) -> tuple:
        return tuple(self.state.history)


def reduce(
    E: float,
    P: QuasiPeriodicPotential,
    omega: FrequencyVector,
    schedule: KamSchedule,
    defect_samples: int = 0,
    threshold_cap: float | None = None,
) -> ReducibilityReport:
    """Run the iteration, branching on the resonance test at every step.

    The stratum index is the last step (1-based) at which a resonance was
    removed, 0 if none occurred: the per-energy realization of the
    resonance-history classification.  A step that fails to contract the
    residual terminates the run with a partial report.
    """
    if strip_norm(P) >= 1.0:
        raise ValueError("strip norm of the potential must be < 1")
    state = initial_state(E, P, omega, schedule)
    records: list[StepRecord] = []
    stratum = 0
    converged = True
    zero_k = (0,) * P.d
    for j in range(schedule.j_max):
        k_j = zero_k
        if state.elliptic and state.f.coeffs:
            chk = check_resonance(
                state.xi,
                omega,
                schedule.eps[j],
                schedule.sigma,
                omega.tau,
                schedule.n_eff[j],
                threshold_cap=threshold_cap,
            )
            if chk.resonant:
                state = resonant_rotation(state, chk.k)
                k_j = chk.k
                stratum = j + 1
        prev = state.residual_norm
        try:
            state = kam_step(state)
        except KamError:
            # parabolic constant part (spectral edge pinning) or a divisor
            # inconsistency: stop with a partial report
            converged = False
            break
        state.history.append(k_j)
        defect = None
        if defect_samples:
            defect = conjugacy_defect(E, P, state, n_samples=defect_samples)
        records.append(
            StepRecord(j=j, xi=state.xi, k=k_j, residual=state.residual_norm, defect=defect)
        )
        if not math.isfinite(state.residual_norm) or (
            state.residual_norm > prev * 1.2 + 1e-16 and state.residual_norm > 1e-14
        ):
            converged = False
            break
        if state.residual_norm == 0.0:
            break
    return ReducibilityReport(
        E=E,
        steps=records,
        rho=state.rho(),
        stratum=stratum,
        xi=state.xi,
        elliptic=state.elliptic,
        residual=state.residual_norm,
        converged=converged,
        state=state,
    )


# -- derivatives of the rotation-number approximant ---------------------------


class StratumBoundaryError(ValueError):
    """The energy grid crosses a resonance-history boundary; split it first."""


@dataclass
class RhoDerivativeTable:
    energies: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    free_d1: np.ndarray
    free_d2: np.ndarray
    free_d3: np.ndarray


def free_rho_derivatives(E) -> tuple:
    """Closed forms for the unperturbed rotation number at xi0 = arccos(-E/2)."""
    E = np.asarray(E, dtype=float)
    xi = np.arccos(np.clip(-E / 2.0, -1.0, 1.0))
    s, c = np.sin(xi), np.cos(xi)
    d1 = 1.0 / (2.0 * s)
    d2 = -c / (4.0 * s**3)
    d3 = (1.0 + 2.0 * c**2) / (8.0 * s**5)
    return d1, d2, d3


def rho_derivatives(energies, reports) -> RhoDerivativeTable:
    """Central differences (with one Richardson refinement) of rho over the grid.

    Requires a uniform grid lying inside a single stratum: a change in the
    resonance history across the grid raises StratumBoundaryError.
    """
    E = np.asarray(energies, dtype=float)
    if len(E) < 9:
        raise ValueError("need at least 9 grid points")
    h = E[1] - E[0]
    if not np.allclose(np.diff(E), h, rtol=0, atol=1e-12 * abs(h)):
        raise ValueError("grid must be uniform")
    signatures = {r.history_signature() for r in reports}
    if len(signatures) > 1:
        raise StratumBoundaryError(f"grid spans {len(signatures)} strata; split required")
    rho = np.array([r.rho for r in reports])

    def central(arr, order, step):
        if order == 1:
            return (arr[2 * step :] - arr[: -2 * step]) / (2 * step * h)
        if order == 2:
            return (arr[2 * step :] - 2 * arr[step:-step] + arr[: -2 * step]) / (step * h) ** 2
        num = (
            arr[4 * step :]
            - 2 * arr[3 * step : -step]
            + 2 * arr[step : -3 * step]
            - arr[: -4 * step]
        )
        return num / (2 * (step * h) ** 3)

    # stencil half-widths: order 1,2 use +-step, order 3 uses +-2 step
    margin = 4
    idx = np.arange(margin, len(E) - margin)
    d = {}
    for order in (1, 2, 3):
        f1 = central(rho, order, 1)
        f2 = central(rho, order, 2)
        off1 = 1 if order < 3 else 2
        off2 = 2 if order < 3 else 4
        a = f1[idx - off1]
        b = f2[idx - off2]
        d[order] = a + (a - b) / 3.0  # Richardson for O(h^2) stencils
    fd1, fd2, fd3 = free_rho_derivatives(E[idx])
    return RhoDerivativeTable(
        energies=E[idx],
        d1=d[1],
        d2=d[2],
        d3=d[3],
        free_d1=fd1,
        free_d2=fd2,
        free_d3=fd3,
    )
