"""Finite Dirichlet sections of the quasi-periodic Jacobi operator.

The operator acts as (H x)_n = -(x_{n+1} + x_{n-1}) + P(theta0 + n omega) x_n
on the window of sites in a LatticeConfig, with Dirichlet walls.  A single
eigendecomposition powers all functional calculus f(H); the propagators in
`evolve` reuse it across every time sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from kglattice.model import (
    FrequencyVector,
    LatticeConfig,
    QuasiPeriodicPotential,
    sample_orbit,
    strip_norm,
)


@dataclass(frozen=True)
class FiniteSection:
    """Symmetric tridiagonal truncation: given diagonal, constant -1 off-diagonal."""

    diagonal: np.ndarray
    config: LatticeConfig

    @property
    def n_sites(self) -> int:
        return len(self.diagonal)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Direct tridiagonal multiply H x (independent of the eigensolver path)."""
        x = np.asarray(x, dtype=float)
        out = self.diagonal * x
        out[:-1] -= x[1:]
        out[1:] -= x[:-1]
        return out

    def dense(self) -> np.ndarray:
        H = np.diag(self.diagonal)
        off = -np.ones(self.n_sites - 1)
        H += np.diag(off, 1) + np.diag(off, -1)
        return H


@dataclass(frozen=True)
class EigenDecomposition:
    """Ascending eigenvalues and orthonormal eigenvectors (columns of Q)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n_sites(self) -> int:
        return len(self.eigenvalues)


def build_finite_section(
    P: QuasiPeriodicPotential, omega: FrequencyVector, config: LatticeConfig
) -> FiniteSection:
    """Diagonal P(theta0 + n omega) over the window; off-diagonals are -1."""
    diag = sample_orbit(P, config.theta0, omega, config.sites)
    eps0 = strip_norm(P)
    if np.any(np.abs(diag) > eps0 + 1e-12):
        raise AssertionError("potential samples exceed the strip-norm budget")
    return FiniteSection(diagonal=diag, config=config)


def eigendecompose(H: FiniteSection) -> EigenDecomposition:
    """Full spectrum of the tridiagonal section with a deterministic sign gauge."""
    n = H.n_sites
    if n == 1:
        return EigenDecomposition(
            eigenvalues=np.array([H.diagonal[0]]), eigenvectors=np.array([[1.0]])
        )
    off = -np.ones(n - 1)
    vals, vecs = scipy.linalg.eigh_tridiagonal(H.diagonal, off)
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    # first entry of magnitude > tol positive, so repeated runs are bit-identical
    for j in range(n):
        col = vecs[:, j]
        lead = col[np.argmax(np.abs(col) > 1e-12)]
        if lead < 0:
            vecs[:, j] = -col
    return EigenDecomposition(eigenvalues=vals, eigenvectors=vecs)


def apply_function(f, D: EigenDecomposition, v: np.ndarray) -> np.ndarray:
    """Q f(Lambda) Q^T v.  Raises if f is non-finite on some eigenvalue."""
    fvals = np.asarray(f(D.eigenvalues), dtype=float)
    if not np.all(np.isfinite(fvals)):
        bad = D.eigenvalues[~np.isfinite(fvals)]
        raise ValueError(f"function not finite on eigenvalues {bad[:3]}...")
    Q = D.eigenvectors
    return Q @ (fvals * (Q.T @ np.asarray(v, dtype=float)))
