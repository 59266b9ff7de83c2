"""Hamiltonian matrix at the equilibrium and the stabilizing Riccati solution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .problem import Linearization

HYPERBOLIC_TOL = 1e-8
COND_LIMIT = 1e12


class NotHyperbolic(ArithmeticError):
    pass


class NotComplementary(ArithmeticError):
    pass


@dataclass(frozen=True)
class HamiltonianMatrix:
    Ham: np.ndarray

    @property
    def n(self) -> int:
        return self.Ham.shape[0] // 2


@dataclass(frozen=True)
class C2Result:
    hyperbolic: bool
    complementary: bool
    stable_basis: np.ndarray
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    B: np.ndarray
    spectral_abscissa: float
    beta: float
    Gamma: float
    ham_eigenvalues: np.ndarray


def hamiltonian_matrix(lin: Linearization) -> HamiltonianMatrix:
    A, Q, R0 = lin.A, lin.Q_eff, lin.R0
    return HamiltonianMatrix(np.block([[A, -R0], [-Q, -A.T]]))


def check_c2(ham: HamiltonianMatrix, strict: bool = True) -> C2Result:
    """Hyperbolicity and complementarity of the stable invariant subspace.

    The stable basis comes from a real Schur form ordered with the open left
    half plane first. With ``strict`` a failed condition raises.
    """
    n = ham.n
    T, Z, sdim = la.schur(ham.Ham, output="real", sort="lhp")
    eig = la.eigvals(ham.Ham)
    hyperbolic = bool(np.all(np.abs(eig.real) >= HYPERBOLIC_TOL)) and sdim == n
    if not hyperbolic:
        if strict:
            raise NotHyperbolic(f"Hamiltonian matrix has eigenvalues near the imaginary axis: {eig}")
        return C2Result(False, False, Z[:, :n], eig)
    basis = Z[:, :n]
    X = basis[:n]
    complementary = bool(np.linalg.cond(X) <= COND_LIMIT)
    if not complementary and strict:
        raise NotComplementary("stable subspace is not a graph over the state coordinates")
    return C2Result(hyperbolic, complementary, basis, eig)


def is_hurwitz(Bm) -> tuple[bool, float]:
    abscissa = float(np.max(np.linalg.eigvals(np.atleast_2d(Bm)).real))
    return abscissa < 0, abscissa


def solve_riccati(lin: Linearization) -> RiccatiSolution:
    """Stabilizing solution of ``PA + A^T P - P R0 P + Q = 0`` by the stable-subspace method."""
    c2 = check_c2(hamiltonian_matrix(lin))
    n = lin.A.shape[0]
    X, Y = c2.stable_basis[:n], c2.stable_basis[n:]
    P = np.linalg.solve(X.T, Y.T).T
    P = 0.5 * (P + P.T)
    B = lin.A - lin.R0 @ P
    _, abscissa = is_hurwitz(B)
    gamma = float(np.max(np.abs(np.linalg.eigvals(B).real)))
    return RiccatiSolution(
        P=P,
        B=B,
        spectral_abscissa=abscissa,
        beta=-abscissa,
        Gamma=gamma,
        ham_eigenvalues=c2.eigenvalues,
    )


def riccati_residual(lin: Linearization, P) -> float:
    return float(np.linalg.norm(P @ lin.A + lin.A.T @ P - P @ lin.R0 @ P + lin.Q_eff))
