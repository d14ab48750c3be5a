"""Fundamental solution of -Δ - λ² in R³ and its derivatives.

All evaluators broadcast over leading axes: ``x`` and ``y`` are ``(..., 3)``
arrays and the result has the broadcast leading shape.
"""

import logging
from dataclasses import dataclass

import numpy as np

from app.services.errors import KernelSingularityError

logger = logging.getLogger(__name__)

M_INV_4PI = 1.0 / (4.0 * np.pi)
COINCIDENCE_TOL = 1e-14


@dataclass(frozen=True)
class WaveNumber:
    """Complex wavenumber λ with Im(λ) >= 0; λ = 0 is the Laplace case.

    λ² must not be a Dirichlet/Neumann eigenvalue of -Δ; this cannot be
    checked here, the solver exposes a condition estimate instead.
    """

    value: complex = 0j

    def __post_init__(self):
        value = complex(self.value)
        if not np.isfinite(value.real) or not np.isfinite(value.imag):
            raise ValueError(f"Wavenumber must be finite, got {value}")
        if value.imag < 0:
            raise ValueError(f"Wavenumber must satisfy Im(λ) >= 0, got {value}")
        object.__setattr__(self, "value", value)

    @property
    def is_laplace(self) -> bool:
        return self.value == 0

    @classmethod
    def from_parts(cls, re: float, im: float = 0.0) -> "WaveNumber":
        return cls(complex(re, im))

    def __str__(self) -> str:
        return f"{self.value.real:g}{self.value.imag:+g}i"


def _as_wavenumber(lam) -> complex:
    if isinstance(lam, WaveNumber):
        return lam.value
    return WaveNumber(lam).value


def _difference(x, y, scale: float = 1.0):
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = np.sqrt(np.sum(d * d, axis=-1))
    if np.any(r <= COINCIDENCE_TOL * scale):
        raise KernelSingularityError(
            "Kernel evaluated at coincident points; route the pair through singular quadrature"
        )
    return d, r


def _phi_from_r(k: complex, r):
    if k == 0:
        return M_INV_4PI / r + 0j
    return np.exp(1j * k * r) * M_INV_4PI / r


def phi(lam, x, y):
    """Φ_λ(x - y) = e^{iλr} / (4π r)."""
    k = _as_wavenumber(lam)
    _, r = _difference(x, y)
    return _phi_from_r(k, r)


def grad_x_phi(lam, x, y):
    """∇_x Φ_λ(x - y) = Φ (iλ - 1/r) (x - y) / r."""
    k = _as_wavenumber(lam)
    d, r = _difference(x, y)
    factor = radial_factor(k, r, _phi_from_r(k, r))
    return factor[..., None] * d


def dphi_dny(lam, x, y, n_y):
    """∂Φ/∂n_y = ∇_y Φ(x - y) · n_y = Φ (1 - iλr) ((x - y)·n_y) / r²."""
    k = _as_wavenumber(lam)
    d, r = _difference(x, y)
    factor = radial_factor(k, r, _phi_from_r(k, r))
    return -factor * np.sum(d * n_y, axis=-1)


def dphi_dnx(lam, x, y, n_x):
    """∂Φ/∂n_x = ∇_x Φ(x - y) · n_x; equals -dphi_dny for the same direction."""
    return -dphi_dny(lam, x, y, n_x)


def hessian_x_phi(lam, x, y):
    """Hessian of Φ_λ(x - y) with respect to x, shape (..., 3, 3)."""
    k = _as_wavenumber(lam)
    d, r = _difference(x, y)
    value = _phi_from_r(k, r)
    a = 1j * k - 1.0 / r
    f1 = value * a
    f2 = value * (a * a + 1.0 / (r * r))
    rhat = d / r[..., None]
    outer = rhat[..., :, None] * rhat[..., None, :]
    eye = np.eye(3)
    return f2[..., None, None] * outer + (f1 / r)[..., None, None] * (eye - outer)


def grad_x_dphi_dny(lam, x, y, n_y):
    """∇_x of the double-layer kernel: -H_x Φ · n_y."""
    hess = hessian_x_phi(lam, x, y)
    return -np.einsum("...ij,...j->...i", hess, np.broadcast_to(n_y, hess.shape[:-1]))


def phi_unchecked(k: complex, r):
    """Φ from precomputed distances; callers guarantee r > 0."""
    return _phi_from_r(k, r)


def radial_factor(k: complex, r, value):
    """g(r) with ∇_x Φ(x - y) = g (x - y); ``value`` is Φ at the same distances."""
    return value * (1j * k - 1.0 / r) / r
