"""Material parameters, mixture laws and the truncated double-well potential."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class ParameterError(ValueError):
    pass


def _pair(value) -> tuple[float, float]:
    """Accept a single value (applied to both phases/regions) or a pair."""
    if np.ndim(value) == 0:
        return float(value), float(value)
    a, b = value
    return float(a), float(b)


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the two-phase, two-layer model.

    ``nu`` and ``M`` accept either one value or a pair; pairs are
    ``(nu1, nu2)`` per phase and ``(M_c, M_m)`` per region.  ``alpha_bjs`` is
    the combined slip coefficient alpha*sqrt(d)/sqrt(trace(Pi)).  Gravity
    enters as the body force ``(rho - rho_ref) g``; ``rho_ref = 0`` is the
    plain ``rho g`` forcing, ``rho_ref = rho2`` removes the hydrostatic
    pressure of the ambient phase from both pressures.
    """

    rho1: float = 1.0
    rho2: float = 1.0
    nu: float | tuple[float, float] = 1.0
    M: float | tuple[float, float] = 1.0
    gamma: float = 1.0
    epsilon: float = 1.0
    K: np.ndarray = field(default_factory=lambda: np.eye(2))
    alpha_bjs: float = 1.0
    gravity: tuple[float, float] = (0.0, 0.0)
    rho_ref: float = 0.0

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim == 0:
            K = float(K) * np.eye(2)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "nu", _pair(self.nu))
        object.__setattr__(self, "M", _pair(self.M))
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        for name in ("rho1", "rho2", "gamma", "epsilon"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.nu) <= 0:
            raise ParameterError(f"viscosities must be positive, got {self.nu}")
        if min(self.M) <= 0:
            raise ParameterError(f"mobilities must be positive, got {self.M}")
        if K.shape != (2, 2) or not np.allclose(K, K.T):
            raise ParameterError("K must be a symmetric 2x2 tensor")
        if np.linalg.eigvalsh(K).min() <= 0:
            raise ParameterError("K must be positive definite")
        if self.alpha_bjs < 0:
            raise ParameterError("alpha_bjs must be nonnegative")
        if len(self.gravity) != 2:
            raise ParameterError("gravity must be a 2-vector")

    @property
    def nu1(self) -> float:
        return self.nu[0]

    @property
    def nu2(self) -> float:
        return self.nu[1]

    @property
    def M_c(self) -> float:
        return self.M[0]

    @property
    def M_m(self) -> float:
        return self.M[1]

    @property
    def rho_min(self) -> float:
        return min(self.rho1, self.rho2)

    @property
    def has_gravity(self) -> bool:
        return any(g != 0.0 for g in self.gravity)


@dataclass(frozen=True)
class SchemeParams:
    dt: float
    T: float
    beta: float = 5.0
    xi: float = 5.0
    zeta: float | None = None
    scheme: str = "decoupled"
    rel_tol: float = 1e-10
    solver: str = "direct"
    picard_tol: float = 1e-12
    picard_maxiter: int = 50

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise ParameterError("dt and T must be positive")
        if self.scheme not in ("coupled", "decoupled"):
            raise ParameterError(f"scheme must be 'coupled' or 'decoupled', got {self.scheme!r}")
        if not self.beta > 0:
            raise ParameterError("beta must be positive")
        if self.zeta is not None and not self.zeta > 0:
            raise ParameterError("zeta must be positive")

    def resolved(self, model: ModelParams) -> "SchemeParams":
        """Fill the default zeta = min(rho)/4 and check xi >= zeta + min(rho)/2."""
        zeta = 0.25 * model.rho_min if self.zeta is None else self.zeta
        if self.xi < zeta + 0.5 * model.rho_min:
            raise ParameterError(
                f"xi < zeta + min(rho)/2: xi={self.xi}, zeta={zeta}, min(rho)={model.rho_min}"
            )
        return replace(self, zeta=zeta)

    @property
    def n_steps(self) -> int:
        return int(np.floor(self.T / self.dt + 1e-9))


def mixture(phi, a1: float, a2: float):
    """Affine mixture law, with phi clamped to [-1, 1]."""
    p = np.clip(phi, -1.0, 1.0)
    # convex weights: exact at the pure phases and positive for any contrast
    return a1 * (0.5 + 0.5 * p) + a2 * (0.5 - 0.5 * p)


def mixture_slope(phi, a1: float, a2: float):
    """d mixture / d phi; zero where the clamp is active."""
    phi = np.asarray(phi, dtype=float)
    return np.where(np.abs(phi) < 1.0, 0.5 * (a1 - a2), 0.0)


def density(phi, params: ModelParams):
    return mixture(phi, params.rho1, params.rho2)


def viscosity(phi, params: ModelParams):
    return mixture(phi, params.nu1, params.nu2)


def sigma(phi, params: ModelParams):
    return np.sqrt(density(phi, params))


def double_well_F(phi, epsilon: float):
    """(phi^2 - 1)^2 / (4 eps) inside [-1, 1], quadratic continuation outside.

    The continuation keeps F in C^1 with |F''| <= 2/eps everywhere.
    """
    phi = np.asarray(phi, dtype=float)
    inner = (phi**2 - 1.0) ** 2 / (4.0 * epsilon)
    upper = (phi - 1.0) ** 2 / epsilon
    lower = (phi + 1.0) ** 2 / epsilon
    return np.where(phi > 1.0, upper, np.where(phi < -1.0, lower, inner))


def double_well_f(phi, epsilon: float):
    """Derivative of ``double_well_F``."""
    phi = np.asarray(phi, dtype=float)
    inner = (phi**3 - phi) / epsilon
    upper = 2.0 * (phi - 1.0) / epsilon
    lower = 2.0 * (phi + 1.0) / epsilon
    return np.where(phi > 1.0, upper, np.where(phi < -1.0, lower, inner))
