"""Post-processing checks on solver output.

Nothing here mutates solver state; every norm is recomputed from the
coefficient arrays with the solver's own quadrature rules.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import gamma

from .fractional_kernels import TimeGrid, SampledPath, fractional_convolve, kernel_eval
from .galerkin_solver import AssembledOperators, SpectralState

__all__ = [
    "DiagnosticRecord",
    "EnergyConstants",
    "DiagnosticError",
    "mass_check",
    "corotational_check",
    "energy_constants",
    "energy_ledger",
    "compare_mc",
    "read_histogram_csv",
    "write_histogram_csv",
    "total_variation",
    "stress_check",
    "kramers_full_norms",
    "energy_margins",
    "phi_norms",
]


class DiagnosticError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiagnosticRecord:
    t: float
    mass: float
    u_energy: float
    grad_u_dissipation: float
    phi_l2: float
    phi_grad_q: float
    phi_grad_x: float
    energy_lhs: float
    energy_rhs_bound: float
    corotational_residual: float
    stress_norm: float
    stress_bound: float
    velocity_lhs: float = 0.0
    velocity_rhs: float = 0.0
    energy_rhs_log10: float = 0.0
    kramers_plus: float = 0.0
    kramers_minus: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[float]:
        return list(asdict(self).values())


def mass_check(state_or_psi, cb=None, quadrature=None) -> float:
    """Total mass minus one.

    The constant x-mode and Y_0 = 1 make the mass the [0, 0] coefficient;
    ``cb``/``quadrature`` are accepted for call compatibility.
    """
    psi = state_or_psi.psi if isinstance(state_or_psi, SpectralState) else np.asarray(state_or_psi)
    return float(psi[0, 0] - 1.0)


def corotational_check(state_or_phi, ops: AssembledOperators, u=None, sym_weight: float = 0.0) -> float:
    """|(omega(u) q phi, grad_q phi)_M| summed over the tensor basis.

    ``sym_weight`` adds ``sym_weight * sigma(u)`` to the rotation, which
    injects the noncorotational part and should make the residual grow
    linearly.
    """
    if isinstance(state_or_phi, SpectralState):
        phi, u = state_or_phi.phi, state_or_phi.u if u is None else u
    else:
        phi = np.asarray(state_or_phi)
    if u is None:
        raise ValueError("a velocity coefficient vector is required")
    return float(abs(np.sum(phi * ops.rotation_term(np.asarray(u), phi, sym_weight))))


def _q_gradient_sq(ops: AssembledOperators, coef: np.ndarray) -> np.ndarray:
    return np.einsum("...m,mn,...n->...", coef, ops.stiffness_q, coef)


def phi_norms(ops: AssembledOperators, phi: np.ndarray) -> tuple[float, float, float]:
    """Squared L2_M norm, q-gradient and x-gradient seminorms of a tensor coefficient array."""
    l2 = float(np.sum(phi**2))
    gq = float(np.sum(_q_gradient_sq(ops, phi)))
    gx = float(np.sum(ops.stiffness_xq[:, None] * phi**2))
    return l2, gq, gx


def stress_check(ops: AssembledOperators, psi: np.ndarray) -> tuple[float, float]:
    """(|C(M psi)|_{L2_x Frobenius}, C_b * |psi|_{L2_M})."""
    return ops.stress_l2(psi), ops.cb.quad.cb * float(np.linalg.norm(psi))


def kramers_full_norms(ops: AssembledOperators, psi: np.ndarray) -> tuple[float, float]:
    """Norms of gamma_c*(C + s * int psi dq * I) for s = +1 and s = -1.

    The sign of the isotropic part is ambiguous; it does not enter the
    momentum equation, so both readings are reported.
    """
    c = np.einsum("am,mij->aij", psi, ops.stress_q)
    eye = np.eye(ops.model.dim)
    iso = psi[:, 0][:, None, None] * eye
    g = ops.model.gamma_c
    return (
        g * float(np.sqrt(np.sum((c + iso) ** 2))),
        g * float(np.sqrt(np.sum((c - iso) ** 2))),
    )


@dataclass(frozen=True)
class EnergyConstants:
    """Explicit constants of the combined a-priori energy bound.

    The bound at time t is ``base(t) * exp(rate * G(t))`` with
    ``G(t) = t^(2 alpha - 1) / ((2 alpha - 1) Gamma(alpha)^2)``.
    """

    alpha: float
    horizon: float
    u0_sq: float
    psi0_sq: float
    sup_psi0: float
    sup_grad_q_psi0: float
    sup_grad_xq_psi0: float
    grad_q_psi0_sq: float
    grad_x_psi0_sq: float
    radius: float
    kernel_floor: float
    k_u: float
    k_0: float
    k_ns: float
    weight: float
    coercivity: float

    def growth(self, t: float) -> float:
        a = self.alpha
        if t <= 0:
            return 0.0
        return t ** (2 * a - 1) / ((2 * a - 1) * gamma(a) ** 2)

    def base(self, t: float) -> float:
        g = self.growth(t)
        return (0.5 * self.u0_sq + self.weight * (self.k_0 + self.kernel_floor * self.psi0_sq / 4) * g) / self.coercivity

    def u0_contribution(self) -> float:
        return 0.5 * self.u0_sq / self.coercivity

    def log_bound(self, t: float) -> float:
        b = self.base(t)
        if b <= 0:
            return -math.inf
        return math.log(b) + self.weight * self.k_u / self.coercivity * self.growth(t)

    def bound(self, t: float) -> float:
        lb = self.log_bound(t)
        return math.exp(lb) if lb < 709 else math.inf

    def velocity_rhs(self, phi_l2_integral: float) -> float:
        return 0.5 * self.u0_sq + self.k_ns * phi_l2_integral


def energy_constants(ops: AssembledOperators, u0: np.ndarray, psi0: np.ndarray, horizon: float) -> EnergyConstants:
    m = ops.model
    a = m.alpha.alpha
    nu, lam, eps, d = m.nu, m.lambda_deb, m.eps, m.dim
    T = float(horizon)
    x = ops.xb.grid
    X = ops.xb.values(x)
    dX = ops.xb.gradients(x)
    field = X.T @ psi0  # points x q-modes
    grad_field = np.einsum("alp,am->plm", dX, psi0)
    sup0 = float(np.sqrt(np.max(np.sum(field**2, axis=1))))
    sup1 = float(np.sqrt(np.max(_q_gradient_sq(ops, field))))
    sup2 = float(np.sqrt(np.max(np.sum(_q_gradient_sq(ops, grad_field), axis=1))))
    l2, gq, gx = phi_norms(ops, psi0)
    rho = ops.cb.spring.radius
    if a < 1.0:
        kappa0 = T ** (-a) / gamma(1 - a)
        k_ns = T ** (2 - 2 * a) * m.gamma_c**2 * ops.cb.quad.cb**2 / (2 * nu * (1 - a) ** 2)
    else:
        kappa0 = 0.0
        k_ns = math.inf if m.gamma_c > 0 else 0.0
    c2 = rho * sup2 * (1 + math.sqrt(d)) / 2
    k_u = (sup0 + rho * sup1) ** 2 / eps + (4 * c2**2 / kappa0 if kappa0 > 0 else math.inf)
    k_0 = gq / (4 * lam) + eps * gx
    if k_ns == 0:
        weight = 1.0
    elif kappa0 > 0 and math.isfinite(k_ns):
        weight = 32 * k_ns / kappa0
    else:
        weight = math.inf
    coerc = min(0.5, nu / 2, weight / 4, weight * kappa0 / 32, weight / (4 * lam), weight * eps / 2)
    if kappa0 == 0:
        coerc = 0.0
    return EnergyConstants(
        alpha=a,
        horizon=T,
        u0_sq=float(np.sum(np.asarray(u0) ** 2)),
        psi0_sq=l2,
        sup_psi0=sup0,
        sup_grad_q_psi0=sup1,
        sup_grad_xq_psi0=sup2,
        grad_q_psi0_sq=gq,
        grad_x_psi0_sq=gx,
        radius=rho,
        kernel_floor=kappa0,
        k_u=k_u,
        k_0=k_0,
        k_ns=k_ns,
        weight=weight,
        coercivity=coerc,
    )


def energy_ledger(
    state: SpectralState,
    ops: AssembledOperators,
    dt: float,
    stride: int = 1,
    horizon: float | None = None,
    sym_weight: float = 0.0,
) -> list[DiagnosticRecord]:
    """Per-step diagnostic records for a trajectory with full history."""
    psi_hist = state.history.psi
    phi_hist = state.history.phi
    vel = state.velocity_history
    n = len(psi_hist) - 1
    if n != state.step or len(vel) != n + 1:
        raise DiagnosticError("trajectory is missing history levels; the ledger needs every step")
    a = ops.model.alpha.alpha
    T = horizon if horizon is not None else max(n * dt, dt)
    consts = energy_constants(ops, vel[0], psi_hist[0], T)
    psi0 = psi_hist[0]
    times = dt * np.arange(n + 1)

    l2 = np.sum(phi_hist**2, axis=(1, 2))
    gq = np.einsum("kam,mn,kan->k", phi_hist, ops.stiffness_q, phi_hist)
    gx = np.einsum("a,kam->k", ops.stiffness_xq, phi_hist**2)
    xnorm = l2 + gq + gx
    u_arr = np.asarray(vel)
    u_sq = np.sum(u_arr**2, axis=1)
    grad_u = u_arr**2 @ ops.stiffness_x
    dissipation = dt * np.concatenate([[0.0], np.cumsum(grad_u[1:])])
    # right-endpoint sums over k >= 1, matching the implicit time levels
    phi_x_int = dt * np.concatenate([[0.0], np.cumsum(xnorm[1:])])
    phi_l2_int = dt * np.concatenate([[0.0], np.cumsum(l2[1:])])

    # distance of phi from its singular initial layer psi0 * g_alpha
    dev = np.zeros(n + 1)
    if n:
        gk = kernel_eval(a, times[1:])
        dev[1:] = np.sum((phi_hist[1:] - gk[:, None, None] * psi0) ** 2, axis=(1, 2))
    if a < 1.0:
        memory = fractional_convolve(1 - a, SampledPath(TimeGrid(dt, n), dev)).values
    else:
        memory = dev

    out = []
    for k in sorted(set(range(0, n + 1, max(stride, 1))) | {n}):
        s_norm, s_bound = stress_check(ops, psi_hist[k])
        kp, km = kramers_full_norms(ops, psi_hist[k])
        lhs = memory[k] + phi_x_int[k] + u_sq[k] + dissipation[k]
        log_b = consts.log_bound(times[k])
        out.append(
            DiagnosticRecord(
                t=float(times[k]),
                mass=float(psi_hist[k][0, 0]),
                u_energy=0.5 * float(u_sq[k]),
                grad_u_dissipation=float(dissipation[k]),
                phi_l2=float(math.sqrt(l2[k])),
                phi_grad_q=float(math.sqrt(max(gq[k], 0.0))),
                phi_grad_x=float(math.sqrt(gx[k])),
                energy_lhs=float(lhs),
                energy_rhs_bound=math.exp(log_b) if log_b < 709 else math.inf,
                corotational_residual=corotational_check(phi_hist[k], ops, u_arr[k], sym_weight),
                stress_norm=s_norm,
                stress_bound=s_bound,
                velocity_lhs=0.5 * float(u_sq[k]) + 0.5 * ops.model.nu * float(dissipation[k]),
                velocity_rhs=consts.velocity_rhs(float(phi_l2_int[k])),
                energy_rhs_log10=log_b / math.log(10),
                kramers_plus=kp,
                kramers_minus=km,
            )
        )
    return out


def energy_margins(records: list[DiagnosticRecord]) -> dict:
    """Worst-case margins of the energy and velocity inequalities over t > 0.

    Positive means satisfied. At t = 0 both inequalities are equalities;
    ``initial_ok`` checks that row to rounding.
    """
    later = [r for r in records if r.t > 0] or records
    e = min(r.energy_rhs_log10 - math.log10(max(r.energy_lhs, 1e-300)) for r in later)
    v = min(r.velocity_rhs - r.velocity_lhs for r in later)
    first = records[0]
    ok = first.energy_lhs <= first.energy_rhs_bound * (1 + 1e-12) + 1e-300 and (
        first.velocity_lhs <= first.velocity_rhs * (1 + 1e-12) + 1e-300
    )
    return {"energy_log10_margin": float(e), "velocity_margin": float(v), "initial_ok": bool(ok)}


HIST_COLUMNS = ["q1_lo", "q1_hi", "q2_lo", "q2_hi", "mass"]


def write_histogram_csv(path, edges, mass) -> None:
    e1, e2 = (np.asarray(e, dtype=float) for e in edges)
    mass = np.asarray(mass, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HIST_COLUMNS)
        for i in range(len(e1) - 1):
            for j in range(len(e2) - 1):
                w.writerow([f"{v:.17g}" for v in (e1[i], e1[i + 1], e2[j], e2[j + 1], mass[i, j])])


def read_histogram_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (bin bounds array of shape (n, 4), mass array of shape (n,))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != HIST_COLUMNS:
        raise ValueError(f"{path}: expected header {HIST_COLUMNS}")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, 5)
    return data[:, :4], data[:, 4]


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise ValueError("distributions have different bin counts")
    return float(0.5 * np.abs(p - q).sum())


def compare_mc(solver_csv, mc_csv) -> float:
    """Total-variation distance between two histogram CSVs with matching bins."""
    b1, m1 = read_histogram_csv(solver_csv)
    b2, m2 = read_histogram_csv(mc_csv)
    if b1.shape != b2.shape or not np.allclose(b1, b2, rtol=0, atol=1e-12):
        raise ValueError("histogram bin layouts differ")
    return total_variation(m1, m2)
