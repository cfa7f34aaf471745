"""Quasi-periodic Klein-Gordon lattices at desk scale.

Modules cover the pieces of the machinery: potentials and frequencies
(`model`), finite Jacobi sections and functional calculus (`operator`),
exact linear / split-step nonlinear propagation and the Duhamel map
(`evolve`), transfer-matrix cocycles (`cocycle`), quantitative reducibility
(`kam`), the generalized-eigenfunction transform (`spectral`), oscillatory
integrals and decay fits (`dispersion`), and the experiment runner (`cli`).
"""

__version__ = "0.1.0"
