"""Dumbbell physics: spring laws, Maxwellian, Kramers stress and scalings.

Configuration-space integrals are M-weighted and evaluated with a tensor
product rule on the admissible ball: a radial Gauss-Jacobi rule for FENE
springs (the boundary degeneracy of the Maxwellian is a Jacobi weight), a
truncated radial Gauss-Legendre rule for Hookean springs, and trapezoid /
Gauss-Legendre angular rules.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .fractional_kernels import FractionalOrder

__all__ = [
    "SpringModel",
    "PhysicalParams",
    "ModelParams",
    "ConfigQuadrature",
    "potential",
    "potential_derivative",
    "spring_force",
    "maxwellian",
    "unnormalized_maxwellian",
    "build_quadrature",
    "kramers_stress",
    "stress_bound_constant",
    "vorticity_split",
    "nondimensionalize",
    "length_scale",
    "HOOKEAN_RADIUS",
]

# Hookean configuration space is truncated at this many standard deviations.
HOOKEAN_RADIUS = 6.0

SPRING_KINDS = ("hookean", "fene", "free")


@dataclass(frozen=True)
class SpringModel:
    kind: str = "fene"
    b: float = 10.0

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in SPRING_KINDS:
            raise ValueError(f"unknown spring kind {self.kind!r}; expected one of {SPRING_KINDS}")
        object.__setattr__(self, "kind", kind)
        if kind == "fene":
            if not (self.b > 2.0 and np.isfinite(self.b)):
                raise ValueError(
                    f"FENE requires b > 2 so that M|F q^T|^2 is integrable "
                    f"(finite stress-bound constant), got b={self.b}"
                )
            object.__setattr__(self, "b", float(self.b))

    @property
    def is_fene(self) -> bool:
        return self.kind == "fene"

    @property
    def radius(self) -> float:
        """Radius of the admissible (or truncated) configuration ball."""
        return math.sqrt(self.b) if self.is_fene else HOOKEAN_RADIUS

    def admissible(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if not self.is_fene:
            return np.ones(q.shape[:-1], dtype=bool)
        return np.einsum("...i,...i->...", q, q) < self.b


@dataclass(frozen=True)
class PhysicalParams:
    zeta: float
    H: float
    kBT: float
    rho: float
    eta: float
    N: int
    L0: float
    U0: float

    def __post_init__(self):
        for name in ("zeta", "H", "kBT", "rho", "eta", "L0", "U0"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise ValueError(f"physical parameter {name} must be positive, got {v}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"polymer count N must be a positive integer, got {self.N}")


@dataclass(frozen=True)
class ModelParams:
    alpha: FractionalOrder
    Re: float = 1.0
    lambda_deb: float = 1.0
    eps: float = 0.5
    gamma_c: float = 0.1
    spring: SpringModel = field(default_factory=SpringModel)
    dim: int = 2

    def __post_init__(self):
        a = self.alpha if isinstance(self.alpha, FractionalOrder) else FractionalOrder(self.alpha)
        object.__setattr__(self, "alpha", a.require_solver_range())
        for name in ("Re", "lambda_deb", "eps"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        # zero coupling is allowed so that decoupled reference runs can be made
        if not (self.gamma_c >= 0 and np.isfinite(self.gamma_c)):
            raise ValueError(f"gamma_c must be nonnegative, got {self.gamma_c}")
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.spring.kind == "free":
            raise ValueError("the free (zero) spring is only available to the Monte-Carlo module")

    @property
    def nu(self) -> float:
        return 1.0 / self.Re


def _check_s(spring: SpringModel, s):
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("potential argument s = |q|^2/2 must be nonnegative")
    if spring.is_fene and np.any(s >= spring.b / 2):
        raise ValueError(f"FENE potential requires s < b/2 = {spring.b / 2}")
    return s


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def potential(spring: SpringModel, s):
    s = _check_s(spring, s)
    if spring.kind == "free":
        return _scalar(np.zeros_like(s))
    if spring.kind == "hookean":
        return _scalar(s * 1.0)
    return _scalar(-0.5 * spring.b * np.log1p(-2.0 * s / spring.b))


def potential_derivative(spring: SpringModel, s):
    s = _check_s(spring, s)
    if spring.kind == "free":
        return _scalar(np.zeros_like(s))
    if spring.kind == "hookean":
        return _scalar(np.ones_like(s))
    return _scalar(1.0 / (1.0 - 2.0 * s / spring.b))


def spring_force(spring: SpringModel, q) -> np.ndarray:
    """F(q) = U'(|q|^2/2) q; works on a single point or a stack of points."""
    q = np.asarray(q, dtype=float)
    s = 0.5 * np.einsum("...i,...i->...", q, q)
    if spring.is_fene and np.any(2 * s >= spring.b):
        raise ValueError(f"FENE force requires |q|^2 < b = {spring.b}")
    return np.asarray(potential_derivative(spring, s))[..., None] * q


def unnormalized_maxwellian(spring: SpringModel, q):
    q = np.asarray(q, dtype=float)
    s = 0.5 * np.einsum("...i,...i->...", q, q)
    if spring.is_fene and np.any(2 * s >= spring.b):
        raise ValueError(f"Maxwellian requires |q|^2 < b = {spring.b}")
    return _scalar(np.exp(-np.asarray(potential(spring, s))))


def maxwellian(spring: SpringModel, q, quad: "ConfigQuadrature | None" = None):
    """Normalized equilibrium density e^{-U}/Z with Z from the quadrature rule."""
    q = np.asarray(q, dtype=float)
    if quad is None:
        quad = build_quadrature(spring, q.shape[-1])
    return unnormalized_maxwellian(spring, q) / quad.Z


@dataclass(frozen=True)
class ConfigQuadrature:
    """Tensor-product rule on the configuration ball.

    ``w_m`` integrates against M (sums to 1), ``w_s`` against M*U'(|q|^2/2),
    so that the Kramers stress is ``sum(w_s * psi * q q^T)``.
    """

    spring: SpringModel
    dim: int
    nodes: np.ndarray
    w_m: np.ndarray
    w_s: np.ndarray
    Z: float
    cb: float
    n_radial: int
    n_angular: int

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def radius(self) -> np.ndarray:
        return np.linalg.norm(self.nodes, axis=1)

    def integrate(self, values) -> np.ndarray:
        """M-weighted integral over the last axis."""
        return np.asarray(values) @ self.w_m

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"q{i + 1}" for i in range(self.dim)] + ["weight_m", "weight_s"])
            for node, wm, ws in zip(self.nodes, self.w_m, self.w_s):
                w.writerow([f"{v:.17g}" for v in node] + [f"{wm:.17g}", f"{ws:.17g}"])


def _angular_rule(dim: int, n_angular: int):
    """Unit directions and weights summing to the sphere's surface area."""
    if dim == 2:
        theta = 2 * np.pi * np.arange(n_angular) / n_angular
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return dirs, np.full(n_angular, 2 * np.pi / n_angular)
    n_pol = max(2, n_angular // 2)
    x, wx = roots_legendre(n_pol)
    phi = 2 * np.pi * np.arange(n_angular) / n_angular
    st = np.sqrt(1 - x**2)
    dirs = np.stack(
        [
            np.outer(st, np.cos(phi)).ravel(),
            np.outer(st, np.sin(phi)).ravel(),
            np.repeat(x, n_angular),
        ],
        axis=1,
    )
    return dirs, np.outer(wx, np.full(n_angular, 2 * np.pi / n_angular)).ravel()


def _fene_radial(n: int, b: float, dim: int, shift: int):
    """Rule for int_0^1 h(rho) (1-rho^2)^(b/2-shift) rho^(dim-1) d rho.

    Substituting s = 2 rho^2 - 1 gives the Jacobi weight
    (1-s)^(b/2-shift) (1+s)^((dim-2)/2).
    """
    a = b / 2 - shift
    beta = (dim - 2) / 2
    s, w = roots_jacobi(n, a, beta)
    rho = np.sqrt((1 + s) / 2)
    scale = 2.0 ** (-a) * 2.0 ** (-beta) / 4.0
    return rho, w * scale


def _radial_rule(spring: SpringModel, dim: int, n_radial: int):
    """Radial nodes r and weights for int e^{-U} (.) r^(dim-1) dr, plus U' at nodes."""
    if spring.is_fene:
        b = spring.b
        rho, v = _fene_radial(n_radial, b, dim, shift=1)
        r = math.sqrt(b) * rho
        # one factor (1 - rho^2) was left outside the Jacobi weight
        e = v * (1 - rho**2) * b ** (dim / 2)
        return r, e, 1.0 / (1 - rho**2)
    x, wx = roots_legendre(n_radial)
    R = HOOKEAN_RADIUS
    r = 0.5 * R * (x + 1)
    e = 0.5 * R * wx * r ** (dim - 1) * np.exp(-0.5 * r**2)
    return r, e, np.ones_like(r)


@lru_cache(maxsize=32)
def build_quadrature(spring: SpringModel, dim: int = 2, n_radial: int = 24, n_angular: int | None = None) -> ConfigQuadrature:
    if spring.kind == "free":
        raise ValueError("no equilibrium density exists for the free spring")
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if n_angular is None:
        n_angular = 2 * n_radial
    r, e, du = _radial_rule(spring, dim, n_radial)
    dirs, wa = _angular_rule(dim, n_angular)
    nodes = (r[:, None, None] * dirs[None, :, :]).reshape(-1, dim)
    ew = (e[:, None] * wa[None, :]).ravel()
    Z = float(ew.sum())
    w_m = ew / Z
    w_s = w_m * np.repeat(du, len(wa))
    for arr in (nodes, w_m, w_s):
        arr.setflags(write=False)
    cb = stress_bound_constant(spring, dim, Z=Z, n_radial=n_radial)
    return ConfigQuadrature(spring, dim, nodes, w_m, w_s, Z, cb, n_radial, n_angular)


def _sphere_area(dim: int) -> float:
    return 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)


def stress_bound_constant(spring: SpringModel, dim: int, Z: float | None = None, n_radial: int = 24) -> float:
    """C_b = (int_D M |F q^T|^2 dq)^(1/2), where |F q^T|_F^2 = U'^2 |q|^4."""
    if Z is None:
        Z = build_quadrature(spring, dim, n_radial).Z
    area = _sphere_area(dim)
    if spring.is_fene:
        b = spring.b
        # M U'^2 carries (1 - rho^2)^(b/2 - 2): a dedicated Jacobi rule keeps this exact
        rho, v = _fene_radial(n_radial + 2, b, dim, shift=2)
        integral = area * b ** (dim / 2) * np.sum(v * (b * rho**2) ** 2)
    else:
        r, e, _ = _radial_rule(spring, dim, n_radial)
        integral = area * np.sum(e * r**4)
    return float(math.sqrt(integral / Z))


def kramers_stress(psi_hat, quad: ConfigQuadrature) -> np.ndarray:
    """C(M psi_hat) = int_D F(q) q^T M psi_hat dq.

    ``psi_hat`` is either a callable of the node array or node values with
    shape (..., n_nodes); the result has shape (..., dim, dim).
    """
    vals = psi_hat(quad.nodes) if callable(psi_hat) else np.asarray(psi_hat, dtype=float)
    if vals.shape[-1] != quad.n_nodes:
        raise ValueError(f"expected {quad.n_nodes} node values, got {vals.shape[-1]}")
    out = np.einsum("...n,n,ni,nj->...ij", vals, quad.w_s, quad.nodes, quad.nodes)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("Kramers stress integral diverged near the FENE boundary")
    return out


def vorticity_split(grad_u) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric and antisymmetric parts of grad_u, with grad_u[i, j] = d_j u_i."""
    g = np.asarray(grad_u, dtype=float)
    gt = np.swapaxes(g, -1, -2)
    return 0.5 * (g + gt), 0.5 * (g - gt)


def length_scale(p: PhysicalParams) -> float:
    return math.sqrt(p.kBT / p.H)


def nondimensionalize(p: PhysicalParams, alpha, spring: SpringModel | None = None, dim: int = 2) -> ModelParams:
    """Dimensionless groups; gamma_c defaults to the polymer coupling number."""
    T0 = p.L0 / p.U0
    return ModelParams(
        alpha=alpha if isinstance(alpha, FractionalOrder) else FractionalOrder(alpha),
        Re=p.rho * p.U0 * p.L0 / p.eta,
        lambda_deb=p.zeta / (4 * p.H * T0),
        eps=p.kBT / (2 * p.zeta * p.U0 * p.L0),
        gamma_c=p.kBT * p.N / (p.rho * p.U0**2 * p.L0**3),
        spring=spring if spring is not None else SpringModel(),
        dim=dim,
    )
