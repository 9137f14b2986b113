"""Second-moment (Lyapunov) analysis on the n^2-dimensional lift.

For the closed loop dx = (A+BF)x dt + sum_i (C_i+D_iF)x dw_i the matrix
X(t) = E[x(t) x(t)^T] satisfies the linear ODE

    dX/dt = L X := (A+BF) X + X (A+BF)^T + sum_i (C_i+D_iF) X (C_i+D_iF)^T.

We represent L as an n^2 x n^2 matrix acting on column-stacked
vectorizations (numpy order='F'); this convention is fixed so the lift
matrix is reproducible bit-for-bit across implementations.  The spectral
abscissa of L certifies mean-square exponential stability, and the
adjoint flow started from the identity yields the tight growth constant

    c0(tau) = sup { E|x(tau; 0, x0)|^2 : E|x0|^2 = 1 } = lambda_max(S(tau)),
    dS/dt = A^T S + S A + sum_i C_i^T S C_i,  S(0) = I.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import InvalidConfig, NumericalFailure
from .systems import StochasticSystem


def vec(X: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(X).reshape(-1, order="F")


def unvec(v: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(v).reshape((n, n), order="F")


@dataclass(frozen=True)
class MomentGenerator:
    """Lift matrix L (n^2 x n^2) of the closed-loop second-moment flow."""

    L: np.ndarray
    F: np.ndarray
    n: int


@dataclass(frozen=True)
class GrowthConstant:
    """Tight bound c0 with E|x(tau;0,x0)|^2 <= c0 E|x0|^2 for the open loop."""

    tau: float
    c0: float


def build_generator(sys: StochasticSystem, F=None) -> MomentGenerator:
    """Lift matrix of X -> A_cl X + X A_cl^T + sum_i C_cl,i X C_cl,i^T."""
    n = sys.n
    if F is None:
        F = np.zeros((sys.m, n))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape != (sys.m, n):
        raise InvalidConfig(f"gain shape {F.shape} != ({sys.m}, {n})")
    Acl = sys.A + sys.B @ F
    I = np.eye(n)
    L = np.kron(I, Acl) + np.kron(Acl, I)
    for Ci, Di in zip(sys.C, sys.D):
        Ccl = Ci + Di @ F
        L += np.kron(Ccl, Ccl)
    return MomentGenerator(L=L, F=F, n=n)


def spectral_abscissa(gen: MomentGenerator) -> float:
    """Largest real part over the spectrum of the lift matrix."""
    try:
        eigs = np.linalg.eigvals(gen.L)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigen decomposition failed: {exc}") from exc
    return float(np.max(eigs.real))


def propagate_second_moment(gen: MomentGenerator, X0, t: float) -> np.ndarray:
    """X(t) = exp(t L) X0 on the vectorized lift, symmetrized on return.

    trace(X(t)) equals E|x(t)|^2 when X0 = x0 x0^T.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape != (gen.n, gen.n):
        raise InvalidConfig(f"X0 shape {X0.shape} != ({gen.n}, {gen.n})")
    Xt = unvec(expm(t * gen.L) @ vec(X0), gen.n)
    return 0.5 * (Xt + Xt.T)


def adjoint_state(sys: StochasticSystem, tau: float) -> np.ndarray:
    """S(tau) of the adjoint flow dS/dt = A^T S + S A + sum C_i^T S C_i, S(0)=I.

    trace(S(tau) X0) = trace(X(tau)) for every initial second moment X0, so
    S(tau) converts terminal energy questions into a single matrix.
    """
    L_open = build_generator(sys, F=None).L
    S = unvec(expm(tau * L_open.T) @ vec(np.eye(sys.n)), sys.n)
    return 0.5 * (S + S.T)


def growth_constant_c0(sys: StochasticSystem, tau: float) -> GrowthConstant:
    """Tight constant c0(tau) = lambda_max(S(tau)); equals the supremum of
    trace(X(tau)) over unit-trace PSD initial moments."""
    if not tau > 0:
        raise InvalidConfig(f"tau must be positive, got {tau}")
    S = adjoint_state(sys, tau)
    c0 = float(np.linalg.eigvalsh(S)[-1])
    return GrowthConstant(tau=tau, c0=c0)
