"""Spectral Galerkin discretization of the coupled fractional NS-FP system.

Space: the periodic torus [0, 2 pi)^d with the averaged (probability) measure
in x and the Maxwellian-weighted measure in q. The pdf unknown is a matrix
``psi[a, m]`` of coefficients on scalar x-modes X_a times M-orthonormal
configuration modes Y_m; the velocity is a vector of coefficients on
divergence-free Fourier modes h_i.

Time: first-order IMEX. The pdf is advanced in psi-form,
``d psi/dt = -D phi - N(u) phi`` with ``phi = d^{1-alpha} psi`` discretized by
Grunwald-Letnikov weights, diffusion implicit (newest weight only) and
transport/rotation explicit. The velocity step is implicit in viscosity and
explicit in advection and stress.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fene_model import ConfigQuadrature, ModelParams, SpringModel, build_quadrature, vorticity_split
from .fractional_kernels import KernelWeights, gl_weights

__all__ = [
    "VelocityBasis",
    "ScalarBasis",
    "ConfigBasis",
    "AssembledOperators",
    "HistoryBuffer",
    "SpectralState",
    "StepError",
    "BasisError",
    "build_velocity_basis",
    "build_scalar_basis",
    "build_config_basis",
    "assemble",
    "initial_state",
    "step",
    "advance",
    "config_marginal_mass",
    "integer_order_step",
    "preset_initial_data",
    "project_velocity",
    "project_pdf",
    "PRESETS",
    "MASS_TOL",
]

MASS_TOL = 1e-8
PRESETS = ("equilibrium", "shear-mode", "gaussian-bump-x", "anisotropic-q")
MAX_MODES = 64


class StepError(RuntimeError):
    """Raised when a step fails; ``partial_state`` holds the last accepted state when known."""

    partial_state = None


class BasisError(ValueError):
    pass


def _half_lattice(dim: int, kmax: float) -> np.ndarray:
    """Nonzero integer vectors with |k| <= kmax, one from each +-k pair."""
    r = int(math.floor(kmax))
    out = []
    for k in itertools.product(range(-r, r + 1), repeat=dim):
        k = np.array(k)
        if not k.any() or k @ k > kmax**2 + 1e-9:
            continue
        first = k[np.nonzero(k)[0][0]]
        if first > 0:
            out.append(k)
    out.sort(key=lambda v: (int(v @ v), tuple(-v)))
    return np.array(out, dtype=int).reshape(-1, dim)


def _grid(dim: int, n: int) -> np.ndarray:
    axis = 2 * np.pi * np.arange(n) / n
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _perpendiculars(k: np.ndarray) -> list[np.ndarray]:
    kn = k / np.linalg.norm(k)
    if len(k) == 2:
        return [np.array([-kn[1], kn[0]])]
    ref = np.eye(3)[int(np.argmin(np.abs(kn)))]
    e1 = np.cross(kn, ref)
    e1 /= np.linalg.norm(e1)
    return [e1, np.cross(kn, e1)]


@dataclass(frozen=True)
class VelocityBasis:
    """Modes sqrt(2) cos(k.x) e and sqrt(2) sin(k.x) e with e orthogonal to k."""

    dim: int
    n_modes_x: int
    wavevectors: np.ndarray
    directions: np.ndarray
    parity: np.ndarray  # 0 cosine, 1 sine
    grid_size: int

    @property
    def size(self) -> int:
        return len(self.parity)

    @property
    def k2(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.wavevectors, self.wavevectors).astype(float)

    @property
    def grid(self) -> np.ndarray:
        return _grid(self.dim, self.grid_size)

    def values(self, x) -> np.ndarray:
        """Shape (n_modes, dim, n_points)."""
        x = np.atleast_2d(x)
        phase = self.wavevectors @ x.T
        s = np.sqrt(2) * np.where(self.parity[:, None] == 0, np.cos(phase), np.sin(phase))
        return s[:, None, :] * self.directions[:, :, None]

    def gradients(self, x) -> np.ndarray:
        """Shape (n_modes, dim, dim, n_points) with entry [l, i, j] = d_j h_{l,i}."""
        x = np.atleast_2d(x)
        phase = self.wavevectors @ x.T
        ds = np.sqrt(2) * np.where(self.parity[:, None] == 0, -np.sin(phase), np.cos(phase))
        return np.einsum("lp,li,lj->lijp", ds, self.directions, self.wavevectors.astype(float))


def _grid_size(n_modes_x: int) -> int:
    # trapezoid rule is exact for trigonometric degree < N; triple products reach 3K
    return 4 * n_modes_x + 4


def build_velocity_basis(dim: int, n_modes_x: int) -> VelocityBasis:
    if n_modes_x < 1:
        raise BasisError(f"n_modes_x must be >= 1, got {n_modes_x}")
    ks, dirs, par = [], [], []
    for k in _half_lattice(dim, n_modes_x):
        for e in _perpendiculars(k):
            for p in (0, 1):
                ks.append(k)
                dirs.append(e)
                par.append(p)
    if len(par) > MAX_MODES:
        raise BasisError(f"velocity basis has {len(par)} modes, above the cap of {MAX_MODES}")
    return VelocityBasis(dim, n_modes_x, np.array(ks), np.array(dirs), np.array(par), _grid_size(n_modes_x))


@dataclass(frozen=True)
class ScalarBasis:
    """Real Fourier modes 1, sqrt(2) cos(k.x), sqrt(2) sin(k.x) for the pdf's x-dependence."""

    dim: int
    n_modes_x: int
    wavevectors: np.ndarray
    parity: np.ndarray  # -1 constant, 0 cosine, 1 sine
    grid_size: int

    @property
    def size(self) -> int:
        return len(self.parity)

    @property
    def k2(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.wavevectors, self.wavevectors).astype(float)

    @property
    def grid(self) -> np.ndarray:
        return _grid(self.dim, self.grid_size)

    def values(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        phase = self.wavevectors @ x.T
        v = np.sqrt(2) * np.where(self.parity[:, None] == 1, np.sin(phase), np.cos(phase))
        v[self.parity == -1] = 1.0
        return v

    def gradients(self, x) -> np.ndarray:
        """Shape (n_modes, dim, n_points)."""
        x = np.atleast_2d(x)
        phase = self.wavevectors @ x.T
        ds = np.sqrt(2) * np.where(self.parity[:, None] == 1, np.cos(phase), -np.sin(phase))
        ds[self.parity == -1] = 0.0
        return ds[:, None, :] * self.wavevectors[:, :, None]


def build_scalar_basis(dim: int, n_modes_x: int) -> ScalarBasis:
    ks = [np.zeros(dim, dtype=int)]
    par = [-1]
    for k in _half_lattice(dim, n_modes_x):
        for p in (0, 1):
            ks.append(k)
            par.append(p)
    if len(par) > MAX_MODES:
        raise BasisError(f"scalar x-basis has {len(par)} modes, above the cap of {MAX_MODES}")
    return ScalarBasis(dim, n_modes_x, np.array(ks), np.array(par), _grid_size(n_modes_x))


def _monomial_exponents(dim: int, count: int) -> np.ndarray:
    out = []
    deg = 0
    while len(out) < count:
        level = [e for e in itertools.product(range(deg + 1), repeat=dim) if sum(e) == deg]
        level.sort(reverse=True)
        out.extend(level)
        deg += 1
    return np.array(out[:count], dtype=int)


@dataclass(frozen=True)
class ConfigBasis:
    """M-orthonormal polynomials Y_m = sum_p coef[p, m] q^exponents[p]."""

    spring: SpringModel
    dim: int
    n_modes_q: int
    exponents: np.ndarray
    coef: np.ndarray
    quad: ConfigQuadrature

    @property
    def size(self) -> int:
        return self.n_modes_q

    @property
    def max_degree(self) -> int:
        return int(self.exponents.sum(axis=1).max())

    def _monomials(self, q):
        q = np.atleast_2d(q)
        return np.prod(q[None, :, :] ** self.exponents[:, None, :], axis=2)

    def values(self, q) -> np.ndarray:
        """Shape (n_modes, n_points)."""
        return self.coef.T @ self._monomials(q)

    def gradients(self, q) -> np.ndarray:
        """Shape (n_modes, dim, n_points)."""
        q = np.atleast_2d(q)
        grads = []
        for j in range(self.dim):
            e = self.exponents.copy()
            fac = e[:, j].astype(float)
            e[:, j] = np.maximum(e[:, j] - 1, 0)
            mono = fac[:, None] * np.prod(q[None, :, :] ** e[:, None, :], axis=2)
            grads.append(self.coef.T @ mono)
        return np.stack(grads, axis=1)

    def node_values(self) -> np.ndarray:
        return self.values(self.quad.nodes)

    def node_gradients(self) -> np.ndarray:
        return self.gradients(self.quad.nodes)


def build_config_basis(spring: SpringModel, n_modes_q: int, quad: ConfigQuadrature | None = None, dim: int = 2) -> ConfigBasis:
    if quad is None:
        quad = build_quadrature(spring, dim)
    dim = quad.dim
    if not 1 <= n_modes_q <= MAX_MODES:
        raise BasisError(f"n_modes_q must lie in [1, {MAX_MODES}], got {n_modes_q}")
    ex = _monomial_exponents(dim, n_modes_q)
    deg = int(ex.sum(axis=1).max())
    if quad.n_radial < deg + 2 or quad.n_angular <= 2 * deg + 2:
        raise BasisError(f"quadrature too coarse for polynomial degree {deg}")
    V = np.prod(quad.nodes[:, None, :] ** ex[None, :, :], axis=2)
    sw = np.sqrt(quad.w_m)
    _, R = np.linalg.qr(sw[:, None] * V)
    sign = np.sign(np.diag(R))
    R = R * sign[:, None]
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > 1e12:
        raise BasisError(f"configuration Gram matrix is ill-conditioned (cond={cond:.3e})")
    coef = np.linalg.inv(R)
    coef = np.triu(coef)
    coef.setflags(write=False)
    return ConfigBasis(spring, dim, n_modes_q, ex, coef, quad)


@dataclass(frozen=True)
class AssembledOperators:
    model: ModelParams
    vb: VelocityBasis
    xb: ScalarBasis
    cb: ConfigBasis
    stiffness_x: np.ndarray  # |k|^2 of velocity modes
    stiffness_xq: np.ndarray  # |k|^2 of scalar x-modes
    stiffness_q: np.ndarray  # (grad Y_m, grad Y_n)_M
    advection: np.ndarray  # A[i, j, l] = ((h_i . grad) h_j, h_l)
    transport: np.ndarray  # T[i, a, b] = ((h_i . grad) X_a, X_b)
    rot_x: np.ndarray  # [i, a, b, j, k] = avg(X_a X_b omega(h_i)_jk)
    rot_x_sym: np.ndarray  # same with the symmetric part sigma(h_i)
    rot_q: np.ndarray  # [j, k, m, n] = (q_k Y_m, d_j Y_n)_M
    rot_q_parts: np.ndarray  # [j, k, m, n] = -(q_k d_j Y_m, Y_n)_M
    stress_q: np.ndarray  # [m, i, j] = int F_i q_j M Y_m
    stress_x: np.ndarray  # [a, l, i, j] = avg(X_a d_j h_{l,i})
    stress: np.ndarray  # [a, m, l] = gamma_c * sum_ij stress_q * stress_x
    q_eigvals: np.ndarray
    q_eigvecs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.xb.size, self.cb.size)

    def diffusion(self, phi: np.ndarray) -> np.ndarray:
        m = self.model
        return m.eps * self.stiffness_xq[:, None] * phi + (phi @ self.stiffness_q) / (2 * m.lambda_deb)

    def solve_diffusion(self, rhs: np.ndarray, c: float) -> np.ndarray:
        """Solve (I + c D) X = rhs with D the pdf diffusion operator."""
        m = self.model
        V = self.q_eigvecs
        denom = 1.0 + c * (m.eps * self.stiffness_xq[:, None] + self.q_eigvals[None, :] / (2 * m.lambda_deb))
        if not np.all(np.isfinite(denom)) or denom.min() <= 0:
            raise StepError(f"diffusion solve failed, denominator range [{denom.min()}, {denom.max()}]")
        return ((rhs @ V) / denom) @ V.T

    def transport_term(self, u: np.ndarray, phi: np.ndarray) -> np.ndarray:
        tu = np.einsum("i,iab->ab", u, self.transport)
        return tu.T @ phi

    def rotation_term(self, u: np.ndarray, phi: np.ndarray, sym_weight: float = 0.0) -> np.ndarray:
        """(omega(u) q phi, grad_q zeta)_M tested against every X_b Y_n."""
        rx = self.rot_x if sym_weight == 0.0 else self.rot_x + sym_weight * self.rot_x_sym
        w = np.einsum("i,iabjk->jkab", u, rx)
        return np.einsum("jkab,am,jkmn->bn", w, phi, self.rot_q)

    def explicit_fp(self, u: np.ndarray, phi: np.ndarray) -> np.ndarray:
        return self.transport_term(u, phi) - self.rotation_term(u, phi)

    def advection_term(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("i,j,ijl->l", u, u, self.advection)

    def stress_term(self, psi: np.ndarray) -> np.ndarray:
        return np.einsum("am,aml->l", psi, self.stress)

    def rotation_tensor(self, sym_weight: float = 0.0) -> np.ndarray:
        """Full R[i, (a,m), (b,n)] on the flattened tensor-product index."""
        rx = self.rot_x if sym_weight == 0.0 else self.rot_x + sym_weight * self.rot_x_sym
        nx, nq = self.shape
        R = np.einsum("iabjk,jkmn->iambn", rx, self.rot_q)
        return R.reshape(self.vb.size, nx * nq, nx * nq)

    def rotation_form_mismatch(self) -> float:
        """Difference between the un-integrated and integrated-by-parts rotation forms.

        Only the part seen by an antisymmetric omega matters.
        """
        a = self.rot_q - np.swapaxes(self.rot_q, 0, 1)
        b = self.rot_q_parts - np.swapaxes(self.rot_q_parts, 0, 1)
        return float(np.abs(a - b).max())

    def stress_l2(self, psi: np.ndarray) -> float:
        """L2 norm over x of the Frobenius norm of C(M psi)."""
        c = np.einsum("am,mij->aij", psi, self.stress_q)
        return float(np.sqrt(np.sum(c**2)))


def assemble(model: ModelParams, vb: VelocityBasis, cb: ConfigBasis, xb: ScalarBasis | None = None) -> AssembledOperators:
    if xb is None:
        xb = build_scalar_basis(vb.dim, vb.n_modes_x)
    if not (vb.dim == cb.dim == xb.dim == model.dim):
        raise BasisError("bases and model must share the same dimension")
    x = vb.grid
    npts = x.shape[0]
    H = vb.values(x)  # l i p
    dH = vb.gradients(x)  # l i j p
    X = xb.values(x)  # a p
    dX = xb.gradients(x)  # a j p

    adv = np.einsum("imp,jnmp,lnp->ijl", H, dH, H, optimize=True) / npts
    tr = np.einsum("imp,amp,bp->iab", H, dX, X, optimize=True) / npts
    sig, om = vorticity_split(np.moveaxis(dH, -1, 1))  # l p i j
    XX = np.einsum("ap,bp->abp", X, X)
    rot_x = np.einsum("abp,ipjk->iabjk", XX, om, optimize=True) / npts
    rot_x_sym = np.einsum("abp,ipjk->iabjk", XX, sig, optimize=True) / npts
    sx = np.einsum("ap,lijp->alij", X, dH, optimize=True) / npts

    quad = cb.quad
    Y = cb.node_values()  # m n
    dY = cb.node_gradients()  # m j n
    q = quad.nodes
    wm, ws = quad.w_m, quad.w_s
    kq = np.einsum("mjp,njp,p->mn", dY, dY, wm)
    rot_q = np.einsum("pk,mp,njp,p->jkmn", q, Y, dY, wm, optimize=True)
    rot_q_parts = -np.einsum("pk,mjp,np,p->jkmn", q, dY, Y, wm, optimize=True)
    sq = np.einsum("mp,pi,pj,p->mij", Y, q, q, ws, optimize=True)
    stress = model.gamma_c * np.einsum("mij,alij->aml", sq, sx)

    # the constant mode has zero q-gradient, so split it off before diagonalizing
    lam = np.zeros(cb.size)
    vec = np.eye(cb.size)
    if cb.size > 1:
        lam[1:], vec[1:, 1:] = np.linalg.eigh(kq[1:, 1:])

    arrays = dict(
        stiffness_x=vb.k2,
        stiffness_xq=xb.k2,
        stiffness_q=kq,
        advection=adv,
        transport=tr,
        rot_x=rot_x,
        rot_x_sym=rot_x_sym,
        rot_q=rot_q,
        rot_q_parts=rot_q_parts,
        stress_q=sq,
        stress_x=sx,
        stress=stress,
        q_eigvals=lam,
        q_eigvecs=vec,
    )
    for k, v in arrays.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"assembly of {k} produced non-finite entries")
        v.setflags(write=False)
    return AssembledOperators(model=model, vb=vb, xb=xb, cb=cb, **arrays)


class HistoryBuffer:
    """Append-only record of psi and phi at every time level."""

    def __init__(self, shape: tuple[int, int], capacity: int = 64):
        self.shape = tuple(shape)
        self._psi = np.empty((max(capacity, 1),) + self.shape)
        self._phi = np.empty_like(self._psi)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, psi: np.ndarray, phi: np.ndarray) -> None:
        if self._n == self._psi.shape[0]:
            grow = self._psi.shape[0]
            self._psi = np.concatenate([self._psi, np.empty_like(self._psi[:grow])])
            self._phi = np.concatenate([self._phi, np.empty_like(self._phi[:grow])])
        self._psi[self._n] = psi
        self._phi[self._n] = phi
        self._n += 1

    @property
    def psi(self) -> np.ndarray:
        return self._psi[: self._n]

    @property
    def phi(self) -> np.ndarray:
        return self._phi[: self._n]

    def fork(self) -> "HistoryBuffer":
        other = HistoryBuffer(self.shape, capacity=max(self._n, 1))
        other._psi[: self._n] = self.psi
        other._phi[: self._n] = self.phi
        other._n = self._n
        return other

    @classmethod
    def from_arrays(cls, psi: np.ndarray, phi: np.ndarray) -> "HistoryBuffer":
        buf = cls(psi.shape[1:], capacity=len(psi))
        buf._psi[: len(psi)] = psi
        buf._phi[: len(phi)] = phi
        buf._n = len(psi)
        return buf


@dataclass
class SpectralState:
    step: int
    t: float
    u: np.ndarray
    psi: np.ndarray
    history: HistoryBuffer
    velocity_history: list = field(default_factory=list)
    picard_iterations: int = 0

    @property
    def phi(self) -> np.ndarray:
        return self.history.phi[-1]

    @property
    def mass(self) -> float:
        return float(self.psi[0, 0])


def _alpha(ops) -> float:
    return ops.model.alpha.alpha


def initial_state(ops: AssembledOperators, u0, psi0, dt: float) -> SpectralState:
    u0 = np.asarray(u0, dtype=float)
    psi0 = np.asarray(psi0, dtype=float)
    if u0.shape != (ops.vb.size,) or psi0.shape != ops.shape:
        raise ValueError(f"initial data shapes {u0.shape}, {psi0.shape} do not match the bases")
    mass = psi0[0, 0]
    if not mass > 0:
        raise ValueError(f"initial pdf has nonpositive mass {mass}")
    if abs(mass - 1.0) > MASS_TOL:
        raise ValueError(f"initial pdf must integrate to 1, got mass {mass!r}")
    hist = HistoryBuffer(ops.shape)
    hist.append(psi0, dt ** (_alpha(ops) - 1.0) * psi0)
    return SpectralState(0, 0.0, u0.copy(), psi0.copy(), hist, [u0.copy()])


def _dt_of(weights, dt):
    if dt is None:
        if weights is None:
            raise ValueError("a time step is required")
        return weights.dt
    return float(dt)


def step(
    state: SpectralState,
    ops: AssembledOperators,
    weights: KernelWeights | None = None,
    dt: float | None = None,
    picard: bool = False,
) -> SpectralState:
    """Advance one time step; the returned state shares nothing mutable with the input."""
    return advance(state, ops, _dt_of(weights, dt), 1, picard=picard)


def advance(state: SpectralState, ops: AssembledOperators, dt: float, n_steps: int, picard: bool = False):
    """Advance ``n_steps`` steps, copying the history buffer once rather than per step."""
    a = _alpha(ops)
    if len(state.history) != state.step + 1:
        raise StepError(f"history holds {len(state.history)} levels but the state is at step {state.step}")
    nu = ops.model.nu
    hist_buf = state.history.fork()
    u, psi, phi = state.u.copy(), state.psi.copy(), state.phi.copy()
    vel = list(state.velocity_history)
    n0 = state.step
    iters = 0
    w_all = gl_weights(1.0 - a, n0 + n_steps + 1)
    denom_u = 1.0 + dt * nu * ops.stiffness_x
    dta = dt**a
    for n in range(n0, n0 + n_steps):
        w = w_all[: n + 2]
        hist = np.tensordot(w[n + 1 : 0 : -1], hist_buf.psi, axes=1)
        base_fp = psi - dta * ops.diffusion(hist)
        u_exp, phi_exp, psi_exp = u, phi, psi
        iters = 0
        while True:
            psi_new = ops.solve_diffusion(base_fp - dt * ops.explicit_fp(u_exp, phi_exp), dta)
            u_new = (u - dt * (ops.advection_term(u_exp) + ops.stress_term(psi_exp))) / denom_u
            iters += 1
            if not picard or iters >= 5:
                break
            change = max(
                np.linalg.norm(psi_new - psi_exp) / max(np.linalg.norm(psi_new), 1e-300),
                np.linalg.norm(u_new - u_exp) / max(np.linalg.norm(u_new), 1e-300),
            )
            u_exp, psi_exp = u_new, psi_new
            phi_exp = dt ** (a - 1.0) * (psi_new + hist)
            if change <= 1e-8:
                break
        problem = None
        if not (np.all(np.isfinite(psi_new)) and np.all(np.isfinite(u_new))):
            problem = f"non-finite values at step {n + 1}"
        elif abs(psi_new[0, 0] - 1.0) > MASS_TOL:
            problem = f"mass drift {psi_new[0, 0] - 1.0:.3e} exceeds {MASS_TOL} at step {n + 1}; step rejected"
        if problem:
            err = StepError(problem)
            err.partial_state = SpectralState(n, n * dt, u, psi, hist_buf, vel, iters)
            raise err
        phi = dt ** (a - 1.0) * (psi_new + hist)
        hist_buf.append(psi_new, phi)
        u, psi = u_new, psi_new
        vel.append(u)
    return SpectralState(n0 + n_steps, (n0 + n_steps) * dt, u, psi, hist_buf, vel, iters)


def integer_order_step(u: np.ndarray, psi: np.ndarray, ops: AssembledOperators, dt: float):
    """Backward-Euler/explicit-coupling step of the integer-order system.

    Written against dense Kronecker-product matrices so that it shares no
    code path with :func:`step`.
    """
    m = ops.model
    nx, nq = ops.shape
    Iq, Ix = np.eye(nq), np.eye(nx)
    D = m.eps * np.kron(np.diag(ops.stiffness_xq), Iq) + np.kron(Ix, ops.stiffness_q) / (2 * m.lambda_deb)
    N = np.zeros((nx * nq, nx * nq))
    for i, ui in enumerate(u):
        if ui == 0.0:
            continue
        N += ui * np.kron(ops.transport[i].T, Iq)
        for j in range(m.dim):
            for k in range(m.dim):
                N -= ui * np.kron(ops.rot_x[i, :, :, j, k].T, ops.rot_q[j, k].T)
    z = psi.reshape(-1)
    z_new = np.linalg.solve(np.eye(nx * nq) + dt * D, z - dt * (N @ z))
    S = ops.stress.reshape(nx * nq, -1).T
    A = ops.advection.reshape(len(u) ** 2, -1).T
    L = np.eye(len(u)) + dt * m.nu * np.diag(ops.stiffness_x)
    u_new = np.linalg.solve(L, u - dt * (A @ np.kron(u, u) + S @ z))
    return u_new, z_new.reshape(nx, nq)


def project_velocity(vb: VelocityBasis, field_fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """L2 projection of a vector field given as f(x) -> (n_points, dim)."""
    x = vb.grid
    vals = np.asarray(field_fn(x), dtype=float)
    return np.einsum("lip,pi->l", vb.values(x), vals) / x.shape[0]


def project_pdf(ops: AssembledOperators, terms) -> np.ndarray:
    """Project sum_r fx_r(x) fq_r(q) onto the tensor basis.

    ``terms`` is a list of (fx, fq) callables taking point arrays.
    """
    x = ops.xb.grid
    X = ops.xb.values(x)
    quad = ops.cb.quad
    Y = ops.cb.node_values()
    out = np.zeros(ops.shape)
    for fx, fq in terms:
        cx = X @ np.asarray(fx(x), dtype=float) / x.shape[0]
        cq = Y @ (quad.w_m * np.asarray(fq(quad.nodes), dtype=float))
        out += np.outer(cx, cq)
    return out


def _ones(p):
    return np.ones(np.atleast_2d(p).shape[0])


def preset_initial_data(
    ops: AssembledOperators,
    preset: str = "equilibrium",
    shear_amplitude: float = 0.0,
    bump_strength: float = 0.0,
    anisotropy: float = 0.0,
    radial: float = 0.0,
):
    """Initial (u0, psi0) coefficient arrays for a named preset.

    Every preset accepts the optional shear velocity, an x-bump and q-shape
    modifiers so that benchmarks can combine them; the preset name only sets
    which of them is switched on by default.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    dim = ops.model.dim
    if preset == "shear-mode" and shear_amplitude == 0.0:
        shear_amplitude = 1.0
    if preset == "gaussian-bump-x" and bump_strength == 0.0:
        bump_strength = 1.0
    if preset == "anisotropic-q" and anisotropy == 0.0:
        anisotropy = 0.1

    def shear(x):
        out = np.zeros_like(x)
        out[:, 0] = shear_amplitude * np.sqrt(2) * np.sin(x[:, 1])
        return out

    u0 = project_velocity(ops.vb, shear) if shear_amplitude else np.zeros(ops.vb.size)

    grid = ops.xb.grid
    bump_mean = np.mean(np.exp(bump_strength * np.cos(grid).sum(axis=1)))

    def fx(x):
        return np.exp(bump_strength * np.cos(x).sum(axis=1)) / bump_mean

    quad = ops.cb.quad
    r2 = np.einsum("pi,pi->p", quad.nodes, quad.nodes)
    r2_mean = float(quad.w_m @ r2)
    r2_std = float(np.sqrt(quad.w_m @ (r2 - r2_mean) ** 2))

    def fq(q):
        q = np.atleast_2d(q)
        val = np.ones(q.shape[0])
        if anisotropy:
            val = val + anisotropy * (q[:, 0] ** 2 - q[:, 1] ** 2)
        if radial:
            s = np.einsum("pi,pi->p", q, q)
            val = val + radial * (s - r2_mean) / r2_std
        return val

    psi0 = project_pdf(ops, [(fx if bump_strength else _ones, fq)])
    return u0, psi0


def config_marginal_mass(ops: AssembledOperators, psi_q: np.ndarray, edges, sub: int = 8) -> np.ndarray:
    """Mass of M * sum_m psi_q[m] Y_m in each q1-q2 bin, by sub-grid midpoint quadrature (d = 2)."""
    from .fene_model import unnormalized_maxwellian

    e1, e2 = (np.asarray(e, dtype=float) for e in edges)
    spring = ops.cb.spring
    quad = ops.cb.quad
    out = np.zeros((len(e1) - 1, len(e2) - 1))
    for i in range(len(e1) - 1):
        for j in range(len(e2) - 1):
            h1 = (e1[i + 1] - e1[i]) / sub
            h2 = (e2[j + 1] - e2[j]) / sub
            c1 = e1[i] + h1 * (np.arange(sub) + 0.5)
            c2 = e2[j] + h2 * (np.arange(sub) + 0.5)
            pts = np.stack(np.meshgrid(c1, c2, indexing="ij"), axis=-1).reshape(-1, 2)
            inside = spring.admissible(pts) if spring.is_fene else np.linalg.norm(pts, axis=1) < spring.radius
            pts = pts[inside]
            if len(pts) == 0:
                continue
            dens = unnormalized_maxwellian(spring, pts) / quad.Z * (psi_q @ ops.cb.values(pts))
            out[i, j] = np.sum(dens) * h1 * h2
    return out
