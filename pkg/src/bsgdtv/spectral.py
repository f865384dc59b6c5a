"""Step-size admissibility analysis for the stale-gradient block iteration.

Writing the two-step recursion x^{k+1} = x^k + 2 mu A^T (y - A x^{k-1}) as a
first-order system in (x^k, x^{k+1}) gives the companion matrix

    M = [[ 0,          I ],
         [ -2 mu A^T A, I ]]

whose eigenvalues come in pairs v = (1 +/- sqrt(1 - 8 mu u)) / 2, one pair per
eigenvalue u of A^T A.  The iteration contracts exactly when every |v| < 1,
which happens iff mu < 1 / (2 u_max); at mu = 1 / (2 u_max) the pair for
u_max sits on the unit circle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .blockops import BlockOperator


class PowerIterationResult(NamedTuple):
    value: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class StepBound:
    """Largest eigenvalue of A^T A and the open step-size supremum 1/(2 u_max)."""

    u_max: float
    mu_sup: float

    def admits(self, mu: float) -> bool:
        """True when the recursion converges for this step (strict upper bound)."""
        return 0.0 < mu < self.mu_sup


def largest_eigenvalue(op: BlockOperator, tol: float = 1e-10, max_iters: int = 5000,
                       seed: int = 0) -> PowerIterationResult:
    """Power iteration for the largest eigenvalue of A^T A.

    Starts from a fixed seeded random vector so repeated calls agree bitwise.
    The Rayleigh estimate approaches u_max from below; if successive
    estimates fail to settle within ``tol`` (relative) the value so far is
    returned with ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rows, cols = op.shape
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(cols)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for k in range(1, max_iters + 1):
        av = op.matvec(v)
        new_estimate = float(av @ av)  # Rayleigh quotient v^T A^T A v for unit v
        atav = op.rmatvec(av)
        norm = np.linalg.norm(atav)
        if norm == 0.0:
            # v fell exactly in the nullspace; restart from fresh randomness
            v = rng.standard_normal(cols)
            v /= np.linalg.norm(v)
            continue
        v = atav / norm
        if k > 1 and abs(new_estimate - estimate) <= tol * max(new_estimate, 1e-300):
            return PowerIterationResult(new_estimate, True, k)
        estimate = new_estimate
    return PowerIterationResult(estimate, False, max_iters)


def step_bound(u_max: float) -> StepBound:
    """Admissible step interval (0, 1/(2 u_max)) packaged with u_max."""
    if not u_max > 0:
        raise ValueError("u_max must be positive")
    return StepBound(u_max=float(u_max), mu_sup=1.0 / (2.0 * float(u_max)))


def iteration_eigenvalues(u: float, mu: float) -> tuple[complex, complex]:
    """Companion-matrix eigenvalue pair (1 +/- sqrt(1 - 8 mu u)) / 2 for one u.

    The discriminant goes negative for 8 mu u > 1, in which case the pair is
    complex conjugate with |v|^2 = 2 mu u.
    """
    disc = 1.0 - 8.0 * mu * u
    root = np.sqrt(complex(disc, 0.0))
    v1 = (1.0 + root) / 2.0
    v2 = (1.0 - root) / 2.0
    return complex(v1), complex(v2)


def iteration_matrix(op: BlockOperator, mu: float, max_cols: int = 512) -> np.ndarray:
    """Explicit dense 2c x 2c companion matrix [[0, I], [-2 mu A^T A, I]]."""
    rows, cols = op.shape
    if cols > max_cols:
        raise ValueError(f"dense companion matrix limited to {max_cols} columns, got {cols}")
    dense = op.to_dense()
    gram = dense.T @ dense
    eye = np.eye(cols)
    top = np.hstack([np.zeros((cols, cols)), eye])
    bottom = np.hstack([-2.0 * mu * gram, eye])
    return np.vstack([top, bottom])


def iteration_matrix_spectral_radius(op: BlockOperator, mu: float, max_cols: int = 512) -> float:
    """Spectral radius of the explicit companion matrix (dense eigensolve)."""
    eigs = np.linalg.eigvals(iteration_matrix(op, mu, max_cols=max_cols))
    return float(np.max(np.abs(eigs)))


def predicted_spectral_radius(u_values: np.ndarray, mu: float) -> float:
    """max |v| over closed-form pairs for a set of A^T A eigenvalues."""
    radius = 0.0
    for u in np.asarray(u_values, dtype=np.float64):
        v1, v2 = iteration_eigenvalues(float(u), mu)
        radius = max(radius, abs(v1), abs(v2))
    return radius
