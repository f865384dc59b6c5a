"""Reconstruction quality metrics shared by the solvers and the experiment CLI."""

from __future__ import annotations

import numpy as np

from .blockops import BlockOperator
from .tv import PixelLayout, tv_value


def relative_error(x: np.ndarray, x_true: np.ndarray) -> float:
    """||x - x_true||_2 / ||x_true||_2; raises for an all-zero reference."""
    x = np.asarray(x, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x.shape != x_true.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_true.shape}")
    denom = np.linalg.norm(x_true)
    if denom == 0.0:
        raise ValueError("reference vector is zero; relative error undefined")
    return float(np.linalg.norm(x - x_true) / denom)


def objective_value(x: np.ndarray, op: BlockOperator, y: np.ndarray, lam: float,
                    layout: PixelLayout | None = None, charge: bool = True) -> float:
    """||y - A x||^2 + 2*lam*TV(image of x); the forward product charges one matvec unit.

    ``layout`` maps the solution vector onto image pixels and is required
    whenever lam > 0.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    residual = np.asarray(y, dtype=np.float64) - op.matvec(x, charge=charge)
    value = float(residual @ residual)
    if lam > 0:
        if layout is None:
            raise ValueError("layout required to evaluate the TV term")
        value += 2.0 * lam * tv_value(layout.to_image(x))
    return value
