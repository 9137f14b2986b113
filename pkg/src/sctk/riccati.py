"""Infinite-horizon stochastic algebraic Riccati equation.

The stationary equation solved here is

    P A + A^T P + sum_i C_i^T P C_i + I
      - (P B + sum_i C_i^T P D_i) (I + sum_i D_i^T P D_i)^{-1}
        (B^T P + sum_i D_i^T P C_i) = 0,

whose unique positive-definite solution gives the optimal value
x0^T P x0 of the unit-weight quadratic cost and the stabilizing feedback

    F = -(I + sum_i D_i^T P D_i)^{-1} (B^T P + sum_i D_i^T P C_i).

Solved by Newton-Kleinman iteration: given a mean-square-stabilizing gain
F_k, the generalized Lyapunov equation

    (A+BF_k)^T P + P (A+BF_k) + sum_i (C_i+D_iF_k)^T P (C_i+D_iF_k)
      + I + F_k^T F_k = 0

is one linear solve on the n^2 lift, and F_{k+1} is the gain of its
solution.  Non-existence of a stabilizing gain is a semantic verdict
(``NotSolvable``), not an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import solve_continuous_are

from .errors import InvalidConfig, NumericalFailure
from .moments import build_generator, spectral_abscissa, unvec, vec
from .systems import StochasticSystem, hautus_stabilizability


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    F: np.ndarray
    residual: float
    iterations: int


@dataclass(frozen=True)
class NotSolvable:
    """Verdict that no mean-square stabilizing solution exists."""

    reason: str
    diagnostics: dict = field(default_factory=dict)


def sare_residual(sys: StochasticSystem, P, convention: str = "standard") -> np.ndarray:
    """Residual matrix of the algebraic Riccati operator at P.

    convention="standard" is the equation documented above (minus sign on
    the quadratic term, +I constant).  convention="printed" evaluates the
    variant without the constant term and with a plus sign on the
    quadratic term; it is exposed for side-by-side comparison only.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    lin = P @ sys.A + sys.A.T @ P
    for Ci in sys.C:
        lin += Ci.T @ P @ Ci
    G = np.eye(sys.m)
    for Di in sys.D:
        G += Di.T @ P @ Di
    S = P @ sys.B
    for Ci, Di in zip(sys.C, sys.D):
        S += Ci.T @ P @ Di
    quad = S @ np.linalg.solve(G, S.T)
    if convention == "standard":
        return lin + np.eye(sys.n) - quad
    if convention == "printed":
        return lin + quad
    raise InvalidConfig(f"unknown convention {convention!r}")


def feedback_gain(P, sys: StochasticSystem) -> np.ndarray:
    """F = -(I + sum D_i^T P D_i)^{-1} (B^T P + sum D_i^T P C_i)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    G = np.eye(sys.m)
    for Di in sys.D:
        G += Di.T @ P @ Di
    R = sys.B.T @ P
    for Ci, Di in zip(sys.C, sys.D):
        R += Di.T @ P @ Ci
    return -np.linalg.solve(G, R)


def lq_value(P, x0) -> float:
    """Optimal quadratic cost <P x0, x0> from a deterministic initial state."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return float(x0 @ P @ x0)


def closed_loop_abscissa(sys: StochasticSystem, F) -> float:
    return spectral_abscissa(build_generator(sys, F))


def find_stabilizing_gain(
    sys: StochasticSystem, seed: int = 0, restarts: int = 50, margin: float = 1e-9
):
    """Search for a gain with negative lift abscissa.

    Candidates are tried in a deterministic order: the zero gain, the
    deterministic LQR gain (noise ignored), then seeded random restarts
    refined by derivative-free local search on the abscissa.  Returns
    (F, abscissa) for the first success, or None.
    """
    n, m = sys.n, sys.m

    def alpha(Fflat):
        return closed_loop_abscissa(sys, Fflat.reshape(m, n))

    candidates = [np.zeros(m * n)]
    try:
        Pdet = solve_continuous_are(sys.A, sys.B, np.eye(n), np.eye(m))
        candidates.append((-sys.B.T @ Pdet).ravel())
    except Exception:
        pass

    rng = np.random.default_rng(seed)
    for F0 in candidates:
        a = alpha(F0)
        if a < -margin:
            return F0.reshape(m, n), a

    best = None
    for k in range(restarts):
        scale = 10.0 ** rng.uniform(-1, 1)
        F0 = scale * rng.standard_normal(m * n)
        res = optimize.minimize(
            alpha, F0, method="Nelder-Mead",
            options={"maxiter": 200 * m * n, "xatol": 1e-8, "fatol": 1e-10},
        )
        if best is None or res.fun < best[1]:
            best = (res.x, res.fun)
        if res.fun < -margin:
            return res.x.reshape(m, n), float(res.fun)
        # also polish the LQR candidate once with local search
        if k == 0 and len(candidates) > 1:
            res = optimize.minimize(
                alpha, candidates[-1], method="Nelder-Mead",
                options={"maxiter": 200 * m * n, "xatol": 1e-8, "fatol": 1e-10},
            )
            if res.fun < -margin:
                return res.x.reshape(m, n), float(res.fun)
            if res.fun < best[1]:
                best = (res.x, res.fun)
    return None


def _lyapunov_solve(sys: StochasticSystem, F) -> np.ndarray:
    """Solve (A+BF)^T P + P(A+BF) + sum (C+DF)^T P (C+DF) = -(I + F^T F)."""
    n = sys.n
    Acl = sys.A + sys.B @ F
    I = np.eye(n)
    M = np.kron(I, Acl.T) + np.kron(Acl.T, I)
    for Ci, Di in zip(sys.C, sys.D):
        Ccl = Ci + Di @ F
        M += np.kron(Ccl.T, Ccl.T)
    rhs = -vec(I + F.T @ F)
    try:
        P = unvec(np.linalg.solve(M, rhs), n)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"lifted Lyapunov solve is singular: {exc}") from exc
    return 0.5 * (P + P.T)


def solve_sare(
    sys: StochasticSystem,
    tol: float = 1e-12,
    max_iter: int = 100,
    seed: int = 0,
    restarts: int = 50,
):
    """Newton-Kleinman solve; returns RiccatiSolution or NotSolvable.

    A NotSolvable verdict is issued only after the stabilizing-gain search
    fails and is cross-checked: against the Hautus test when the system
    has no noise, and against a small observability probe otherwise.
    """
    found = find_stabilizing_gain(sys, seed=seed, restarts=restarts)
    if found is None:
        diag = {}
        if sys.is_deterministic:
            if hautus_stabilizability(sys.A, sys.B):
                raise NumericalFailure(
                    "gain search failed although the Hautus test passes"
                )
            diag["hautus"] = False
        else:
            diag["observability_probe"] = _observability_probe(sys)
            if diag["observability_probe"]:
                found = find_stabilizing_gain(
                    sys, seed=seed + 1, restarts=4 * restarts
                )
        if found is None:
            return NotSolvable(
                reason="no mean-square stabilizing gain found", diagnostics=diag
            )

    F, _ = found
    P = None
    residual = np.inf
    for it in range(1, max_iter + 1):
        P = _lyapunov_solve(sys, F)
        F = feedback_gain(P, sys)
        residual = float(np.linalg.norm(sare_residual(sys, P)))
        if residual < tol:
            break
    if not residual < 100 * tol:
        raise NumericalFailure(
            f"Newton iteration stalled at residual {residual:.3e}"
        )
    eigs = np.linalg.eigvalsh(P)
    alpha = closed_loop_abscissa(sys, F)
    if eigs[0] <= 0 or alpha >= 0:
        return NotSolvable(
            reason="iteration converged outside the positive-definite "
            "stabilizing class",
            diagnostics={"min_eig": float(eigs[0]), "abscissa": alpha},
        )
    return RiccatiSolution(P=P, F=F, residual=residual, iterations=it)


def _observability_probe(sys: StochasticSystem) -> bool:
    """Cheap dual-observability probe used to corroborate NotSolvable."""
    from .observability import assemble_forms, optimal_constant
    from .systems import HorizonConfig
    from .trees import TreeDriver, build_tree

    for T in (0.5, 1.0, 2.0):
        tree = build_tree(TreeDriver.bernoulli(), HorizonConfig(T=T, K=4), sys.d)
        forms = assemble_forms(tree, sys)
        if optimal_constant(forms, 0.9).observable:
            return True
    return False
