"""Isotropic total variation: value, discrete gradient pair, and prox.

The seminorm on an S x T image is

    TV(x) = sum_{s,t} sqrt((x[s,t] - x[s-1,t])^2 + (x[s,t] - x[s,t-1])^2)

with each difference taken as 0 on the first row / first column.  The prox
solves

    min_t  ||t - x||^2 + 2 w TV(t)

through its dual: with D the stacked difference operator and P the per-pixel
unit-disc product, the dual is min_{p in P} ||x + w div(p)||^2 and a projected
gradient step with step 1/(8w) is convergent because ||D||^2 <= 8.  An
accelerated (momentum) scheme is used, with a restart whenever a tentative
step would raise the dual objective, so the accepted dual values never
increase.  The primal output is recovered as x + w div(p).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ImageGrid:
    """An S x T grayscale image stored as a flat row-major float vector."""

    height: int
    width: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be positive")
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.height * self.width:
            raise ValueError(
                f"data has {self.data.size} values, expected {self.height * self.width}"
            )

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "ImageGrid":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2:
            raise ValueError("expected a 2-D array")
        return cls(mat.shape[0], mat.shape[1], mat.ravel().copy())

    def as_matrix(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width)

    def copy(self) -> "ImageGrid":
        return ImageGrid(self.height, self.width, self.data.copy())


@dataclass(frozen=True)
class PixelLayout:
    """Mapping between a solver vector and row-major image pixels.

    ``perm[k]`` is the row-major pixel index stored at vector position k, so
    contiguous vector ranges can correspond to spatial tiles while the image
    modules keep their plain row-major convention.
    """

    height: int
    width: int
    perm: np.ndarray

    def __post_init__(self) -> None:
        perm = np.asarray(self.perm, dtype=np.intp)
        n = self.height * self.width
        if perm.shape != (n,) or np.any(np.sort(perm) != np.arange(n)):
            raise ValueError("perm must be a permutation of all pixel indices")
        object.__setattr__(self, "perm", perm)

    @classmethod
    def row_major(cls, height: int, width: int) -> "PixelLayout":
        return cls(height, width, np.arange(height * width, dtype=np.intp))

    @property
    def size(self) -> int:
        return self.height * self.width

    def to_image(self, x: np.ndarray) -> ImageGrid:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {x.shape}")
        flat = np.empty(self.size, dtype=np.float64)
        flat[self.perm] = x
        return ImageGrid(self.height, self.width, flat)

    def to_vector(self, img: ImageGrid) -> np.ndarray:
        if (img.height, img.width) != (self.height, self.width):
            raise ValueError("image shape does not match layout")
        return img.data[self.perm].copy()


@dataclass(frozen=True)
class ProxSettings:
    """Inner-solve controls for :func:`tv_prox`."""

    max_inner_iters: int = 100
    tol: float = 1e-5

    def __post_init__(self) -> None:
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def _forward_diff(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # vertical d[s,t] = u[s,t]-u[s-1,t] (0 on row 0), horizontal likewise on col 0
    dv = np.zeros_like(u)
    dh = np.zeros_like(u)
    dv[1:, :] = u[1:, :] - u[:-1, :]
    dh[:, 1:] = u[:, 1:] - u[:, :-1]
    return dv, dh


def _divergence(pv: np.ndarray, ph: np.ndarray) -> np.ndarray:
    # exact negative adjoint of _forward_diff; entries on row 0 of pv and
    # column 0 of ph never enter any inner product and are ignored
    out = np.zeros_like(pv)
    out[:-1, :] += pv[1:, :]
    out[1:, :] -= pv[1:, :]
    out[:, :-1] += ph[:, 1:]
    out[:, 1:] -= ph[:, 1:]
    return out


def discrete_gradient(img: ImageGrid) -> tuple[np.ndarray, np.ndarray]:
    """Vertical and horizontal backward differences, zero on the first row/column."""
    return _forward_diff(img.as_matrix())


def discrete_divergence(pv: np.ndarray, ph: np.ndarray) -> ImageGrid:
    """Negative adjoint of :func:`discrete_gradient` (so <grad u, p> = -<u, div p>)."""
    pv = np.asarray(pv, dtype=np.float64)
    ph = np.asarray(ph, dtype=np.float64)
    if pv.shape != ph.shape or pv.ndim != 2:
        raise ValueError("difference fields must be two equal-shape 2-D arrays")
    return ImageGrid.from_matrix(_divergence(pv, ph))


def tv_value(img: ImageGrid) -> float:
    """Isotropic total variation of an image."""
    dv, dh = _forward_diff(img.as_matrix())
    return float(np.sum(np.sqrt(dv * dv + dh * dh)))


@dataclass
class ProxInfo:
    """Diagnostics from one :func:`tv_prox` call."""

    iterations: int = 0
    converged: bool = False
    restarts: int = 0
    fell_back: bool = False
    dual_objectives: list = field(default_factory=list)


def _prox_objective(t: np.ndarray, x: np.ndarray, weight: float) -> float:
    diff = t - x
    dv, dh = _forward_diff(t)
    return float(np.sum(diff * diff) + 2.0 * weight * np.sum(np.sqrt(dv * dv + dh * dh)))


def tv_prox(img: ImageGrid, weight: float, settings: ProxSettings | None = None,
            return_info: bool = False):
    """Solve min_t ||t - img||^2 + 2*weight*TV(t).

    ``weight`` is the composite step-times-regularization product (mu*lambda
    in the solver loop).  weight = 0 returns the input unchanged; negative
    weight raises ``ValueError``.  The result never has a worse objective
    than the input itself, and identical inputs give identical outputs.

    With ``return_info=True`` the return value is ``(image, ProxInfo)``;
    ``ProxInfo.dual_objectives`` lists the accepted dual values, which are
    nonincreasing thanks to the restart rule.
    """
    if weight < 0:
        raise ValueError("prox weight must be nonnegative")
    if settings is None:
        settings = ProxSettings()
    info = ProxInfo()
    if weight == 0.0:
        out = img.copy()
        info.converged = True
        return (out, info) if return_info else out

    b = img.as_matrix().copy()
    w = float(weight)
    step = 1.0 / (8.0 * w)
    pv = np.zeros_like(b)
    ph = np.zeros_like(b)
    qv = pv.copy()
    qh = ph.copy()
    t_mom = 1.0
    phi_prev = float(np.sum(b * b))
    info.dual_objectives.append(phi_prev)

    for k in range(settings.max_inner_iters):
        u = b + w * _divergence(qv, qh)
        gv, gh = _forward_diff(u)
        cv = qv + step * gv
        ch = qh + step * gh
        mag = np.sqrt(cv * cv + ch * ch)
        np.maximum(mag, 1.0, out=mag)
        cv /= mag
        ch /= mag
        resid = b + w * _divergence(cv, ch)
        phi = float(np.sum(resid * resid))
        if phi > phi_prev:
            # a momentum step went uphill: redo as a plain projected-gradient
            # step from the last accepted point, which cannot increase phi
            info.restarts += 1
            t_mom = 1.0
            u = b + w * _divergence(pv, ph)
            gv, gh = _forward_diff(u)
            cv = pv + step * gv
            ch = ph + step * gh
            mag = np.sqrt(cv * cv + ch * ch)
            np.maximum(mag, 1.0, out=mag)
            cv /= mag
            ch /= mag
            resid = b + w * _divergence(cv, ch)
            phi = float(np.sum(resid * resid))

        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        beta = (t_mom - 1.0) / t_next
        dv_step = cv - pv
        dh_step = ch - ph
        qv = cv + beta * dv_step
        qh = ch + beta * dh_step
        change = math.sqrt(float(np.sum(dv_step * dv_step) + np.sum(dh_step * dh_step)))
        scale = math.sqrt(float(np.sum(cv * cv) + np.sum(ch * ch)))
        pv, ph = cv, ch
        phi_prev = min(phi, phi_prev)
        t_mom = t_next
        info.dual_objectives.append(phi_prev)
        info.iterations = k + 1
        if change <= settings.tol * max(scale, 1e-30):
            info.converged = True
            break

    out = b + w * _divergence(pv, ph)
    if _prox_objective(out, b, w) > _prox_objective(b, b, w):
        out = b.copy()
        info.fell_back = True
    result = ImageGrid(img.height, img.width, out.ravel())
    return (result, info) if return_info else result


# --- image exchange ---------------------------------------------------------


def save_image(path, img: ImageGrid) -> None:
    """Write an image as text: `height width` header then row-major values."""
    lines = [f"{img.height} {img.width}"]
    lines.extend(f"{float(v)!r}" for v in img.data)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_image(path) -> ImageGrid:
    """Read the flat text format written by :func:`save_image`."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"bad image header in {path}")
        height, width = int(header[0]), int(header[1])
        data = np.empty(height * width, dtype=np.float64)
        for k in range(height * width):
            line = fh.readline()
            if not line:
                raise ValueError(f"image file {path} truncated at value {k}")
            data[k] = float(line)
    return ImageGrid(height, width, data)


def save_pgm(path, img: ImageGrid) -> None:
    """Write an 8-bit binary PGM; values are clipped to [0, 1] then scaled to 255."""
    levels = np.clip(img.as_matrix(), 0.0, 1.0)
    pixels = np.round(levels * 255.0).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())
