"""Monte-Carlo simulation of subordinated dumbbell dynamics.

A path is driven in operational time tau by Euler-Maruyama steps of fixed
size ``d_tau``; physical time is the subordinator clock U(tau), a sum of
alpha-stable increments. The state at physical time t is the state at the
last operational time whose clock has not passed t, i.e. X(t) = Y(S^t) on the
operational mesh.

Paths are split into fixed blocks, each with its own counter-based stream
``Philox(SeedSequence([seed, block]))``, so results do not depend on how
blocks are scheduled across threads.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fene_model import SpringModel, potential_derivative
from .fractional_kernels import FractionalOrder, TimeGrid

__all__ = [
    "SubordinatorParams",
    "LangevinParams",
    "DumbbellEnsemble",
    "sample_subordinator_increment",
    "inverse_subordinator_path",
    "inverse_subordinator_paths",
    "make_ensemble",
    "advance_ensemble",
    "euler_maruyama_reference",
    "empirical_density",
    "zero_velocity",
    "shear_velocity",
    "block_rng",
    "thread_count",
    "BLOCK_SIZE",
    "MAX_REJECTIONS",
]

BLOCK_SIZE = 4096
MAX_REJECTIONS = 100
THREADS_ENV = "FRACNSFP_THREADS"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block)])))


@dataclass(frozen=True)
class SubordinatorParams:
    alpha: FractionalOrder
    tau0: float = 1.0

    def __post_init__(self):
        if not isinstance(self.alpha, FractionalOrder):
            object.__setattr__(self, "alpha", FractionalOrder(self.alpha))
        if not (self.tau0 > 0 and np.isfinite(self.tau0)):
            raise ValueError(f"tau0 must be positive, got {self.tau0}")

    def laplace_exponent(self, lam):
        a = self.alpha.alpha
        return self.tau0 ** (a - 1) * np.asarray(lam, dtype=float) ** a


def _stable_standard(alpha: float, rng: np.random.Generator, size) -> np.ndarray:
    """Positive alpha-stable draws with E exp(-lam S) = exp(-lam^alpha) (Kanter's representation)."""
    v = rng.uniform(0.0, np.pi, size)
    e = rng.standard_exponential(size)
    a = alpha
    num = np.sin(a * v) ** (a / (1 - a)) * np.sin((1 - a) * v)
    den = np.sin(v) ** (1 / (1 - a))
    return (num / den / e) ** ((1 - a) / a)


def sample_subordinator_increment(p: SubordinatorParams, d_tau: float, rng: np.random.Generator, size=None):
    """Increment of U over an operational-time step d_tau.

    Its Laplace transform is exp(-d_tau * Phi(lam)) with
    Phi(lam) = tau0^(alpha-1) lam^alpha. For alpha = 1 the increment is d_tau
    and the generator is not touched.
    """
    if not d_tau > 0:
        raise ValueError(f"d_tau must be positive, got {d_tau}")
    a = p.alpha.alpha
    if a == 1.0:
        return d_tau if size is None else np.full(size, float(d_tau))
    scale = (d_tau * p.tau0 ** (a - 1)) ** (1 / a)
    out = scale * _stable_standard(a, rng, 1 if size is None else size)
    # underflow to 0 is possible for tiny alpha; subordinators are strictly increasing
    out = np.maximum(out, np.finfo(float).tiny)
    return float(out[0]) if size is None else out


def inverse_subordinator_paths(
    p: SubordinatorParams, grid: TimeGrid, rng: np.random.Generator, n_paths: int = 1, d_tau: float | None = None
) -> np.ndarray:
    """First-passage times S^t on the grid, shape (n_paths, n_steps + 1).

    U is simulated on a fixed operational mesh of spacing ``d_tau``
    (default: the grid spacing) and the passage time is interpolated
    linearly inside the bracketing cell, which is exact for alpha = 1.
    """
    d_tau = grid.dt if d_tau is None else float(d_tau)
    t = grid.times
    out = np.zeros((n_paths, len(t)))
    clock = np.zeros(n_paths)
    tau = np.zeros(n_paths)
    pending = np.ones(n_paths, dtype=bool)
    next_idx = np.ones(n_paths, dtype=int)  # first grid index not yet resolved (t_0 gives S = 0)
    chunk = 256
    while pending.any():
        idx = np.nonzero(pending)[0]
        inc = sample_subordinator_increment(p, d_tau, rng, size=(len(idx), chunk))
        ucum = clock[idx, None] + np.cumsum(inc, axis=1)
        prev = np.concatenate([clock[idx, None], ucum[:, :-1]], axis=1)
        for r, i in enumerate(idx):
            n0 = next_idx[i]
            hi = np.searchsorted(t, ucum[r, -1], side="left")
            if hi > n0:
                tt = t[n0:hi]
                # cell c holds U(tau_c) <= t < U(tau_{c+1})
                c = np.searchsorted(ucum[r], tt, side="right")
                frac = (tt - prev[r, c]) / (ucum[r, c] - prev[r, c])
                out[i, n0:hi] = tau[i] + d_tau * (c + frac)
                next_idx[i] = hi
        clock[idx] = ucum[:, -1]
        tau[idx] += chunk * d_tau
        pending = next_idx < len(t)
    return out


def inverse_subordinator_path(p: SubordinatorParams, grid: TimeGrid, rng: np.random.Generator, d_tau: float | None = None) -> np.ndarray:
    return inverse_subordinator_paths(p, grid, rng, 1, d_tau)[0]


@dataclass(frozen=True)
class LangevinParams:
    """Dynamics parameters; unlike the solver, the free (zero) spring is allowed."""

    lambda_deb: float = 1.0
    eps: float = 0.5
    spring: SpringModel = field(default_factory=SpringModel)
    dim: int = 2

    def __post_init__(self):
        if not (self.lambda_deb > 0 and self.eps > 0):
            raise ValueError("lambda_deb and eps must be positive")
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")

    @classmethod
    def from_model(cls, model) -> "LangevinParams":
        return cls(model.lambda_deb, model.eps, model.spring, model.dim)


VelocityField = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def zero_velocity(x: np.ndarray):
    n, d = x.shape
    return np.zeros((n, d)), np.zeros((n, d, d))


def shear_velocity(amplitude: float) -> VelocityField:
    """u = amplitude * sqrt(2) * (sin x2, 0, ...) and its gradient."""

    def field_fn(x):
        n, d = x.shape
        u = np.zeros((n, d))
        g = np.zeros((n, d, d))
        u[:, 0] = amplitude * np.sqrt(2) * np.sin(x[:, 1])
        g[:, 0, 1] = amplitude * np.sqrt(2) * np.cos(x[:, 1])
        return u, g

    return field_fn


@dataclass
class DumbbellEnsemble:
    x: np.ndarray
    q: np.ndarray
    operational_time: np.ndarray
    clock: np.ndarray
    next_increment: np.ndarray
    flagged: np.ndarray
    rng_seed: int
    subordinator: SubordinatorParams
    d_tau: float
    t: float = 0.0
    rngs: list = field(default_factory=list, repr=False)
    q0: np.ndarray | None = None
    block_size: int = BLOCK_SIZE

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    def blocks(self):
        for b in range(len(self.rngs)):
            yield b, slice(b * self.block_size, min((b + 1) * self.block_size, self.n_paths))


def _initial_q(params: LangevinParams, rng: np.random.Generator, n: int) -> np.ndarray:
    d = params.dim
    sp = params.spring
    if sp.kind == "free":
        return np.zeros((n, d))
    if sp.kind == "hookean":
        return rng.standard_normal((n, d))
    rho2 = rng.beta(d / 2, sp.b / 2 + 1, n)
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return np.sqrt(sp.b * rho2)[:, None] * g


def make_ensemble(
    n_paths: int,
    params: LangevinParams,
    sub: SubordinatorParams,
    seed: int,
    d_tau: float,
    q_density: Callable[[np.ndarray], np.ndarray] | None = None,
    density_max: float | None = None,
    block_size: int = BLOCK_SIZE,
) -> DumbbellEnsemble:
    """Equilibrium-distributed ensemble, optionally reweighted by rejection.

    With ``q_density`` (a nonnegative function psi_hat of q, bounded by
    ``density_max``) the q-marginal is M * psi_hat instead of M.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    d = params.dim
    n_blocks = -(-n_paths // block_size)
    rngs = [block_rng(seed, b) for b in range(n_blocks)]
    xs, qs, incs = [], [], []
    for b, rng in enumerate(rngs):
        n = min(block_size, n_paths - b * block_size)
        x = rng.uniform(0.0, 2 * np.pi, (n, d))
        q = _initial_q(params, rng, n)
        if q_density is not None:
            if density_max is None:
                raise ValueError("density_max is required for rejection sampling")
            bad = np.ones(n, dtype=bool)
            accept = rng.uniform(size=n) * density_max <= q_density(q)
            bad = ~accept
            while bad.any():
                k = int(bad.sum())
                qn = _initial_q(params, rng, k)
                ok = rng.uniform(size=k) * density_max <= q_density(qn)
                idx = np.nonzero(bad)[0]
                q[idx[ok]] = qn[ok]
                bad[idx[ok]] = False
        xs.append(x)
        qs.append(q)
        incs.append(sample_subordinator_increment(sub, d_tau, rng, size=n))
    q = np.concatenate(qs)
    return DumbbellEnsemble(
        x=np.concatenate(xs),
        q=q,
        operational_time=np.zeros(n_paths),
        clock=np.zeros(n_paths),
        next_increment=np.concatenate(incs),
        flagged=np.zeros(n_paths, dtype=bool),
        rng_seed=int(seed),
        subordinator=sub,
        d_tau=float(d_tau),
        rngs=rngs,
        q0=q.copy(),
        block_size=block_size,
    )


def _drift_q(params: LangevinParams, q: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    omega = 0.5 * (grad_u - np.swapaxes(grad_u, 1, 2))
    rot = np.einsum("pij,pj->pi", omega, q)
    if params.spring.kind == "free":
        return rot
    s = 0.5 * np.einsum("pi,pi->p", q, q)
    return rot - potential_derivative(params.spring, s)[:, None] * q / (2 * params.lambda_deb)


def _em_substep(params, velocity, x, q, d_tau, rng, flagged):
    """One Euler-Maruyama step in operational time; returns (x, q, newly flagged mask)."""
    n, d = x.shape
    u, gu = velocity(x)
    xi = rng.standard_normal((n, d))
    eta = rng.standard_normal((n, d))
    x_new = np.mod(x + u * d_tau + math.sqrt(2 * params.eps * d_tau) * xi, 2 * np.pi)
    drift = q + _drift_q(params, q, gu) * d_tau
    sq = math.sqrt(d_tau / params.lambda_deb)
    q_new = drift + sq * eta
    newly = np.zeros(n, dtype=bool)
    if params.spring.is_fene:
        b = params.spring.b
        bad = np.einsum("pi,pi->p", q_new, q_new) >= b
        bad &= ~flagged
        tries = 0
        while bad.any() and tries < MAX_REJECTIONS:
            idx = np.nonzero(bad)[0]
            q_new[idx] = drift[idx] + sq * rng.standard_normal((len(idx), d))
            bad[idx] = np.einsum("pi,pi->p", q_new[idx], q_new[idx]) >= b
            tries += 1
        if bad.any():
            newly = bad
            q_new[bad] = q[bad]
        # flagged paths are frozen
        q_new[flagged] = q[flagged]
    return x_new, q_new, newly


def _advance_block(params, velocity, ens: DumbbellEnsemble, sl: slice, rng, target: float):
    x = ens.x[sl].copy()
    q = ens.q[sl].copy()
    op = ens.operational_time[sl].copy()
    clock = ens.clock[sl].copy()
    nxt = ens.next_increment[sl].copy()
    flagged = ens.flagged[sl].copy()
    tol = 1e-12 * max(1.0, target)
    while True:
        active = clock + nxt <= target + tol
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        xa, qa, newly = _em_substep(params, velocity, x[idx], q[idx], ens.d_tau, rng, flagged[idx])
        x[idx], q[idx] = xa, qa
        flagged[idx] |= newly
        op[idx] += ens.d_tau
        clock[idx] += nxt[idx]
        nxt[idx] = sample_subordinator_increment(ens.subordinator, ens.d_tau, rng, size=len(idx))
    return x, q, op, clock, nxt, flagged


def advance_ensemble(
    ens: DumbbellEnsemble,
    velocity: VelocityField,
    params: LangevinParams,
    dt: float,
    threads: int | None = None,
) -> DumbbellEnsemble:
    """Advance every path to physical time ens.t + dt.

    The block generators carried by the ensemble are advanced in place; the
    returned ensemble holds fresh state arrays.
    """
    target = ens.t + dt
    threads = thread_count() if threads is None else threads
    blocks = list(ens.blocks())

    def work(item):
        b, sl = item
        return sl, _advance_block(params, velocity, ens, sl, ens.rngs[b], target)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(item) for item in blocks]
    new = replace(
        ens,
        x=ens.x.copy(),
        q=ens.q.copy(),
        operational_time=ens.operational_time.copy(),
        clock=ens.clock.copy(),
        next_increment=ens.next_increment.copy(),
        flagged=ens.flagged.copy(),
        t=target,
    )
    for sl, (x, q, op, clock, nxt, flagged) in results:
        new.x[sl], new.q[sl], new.operational_time[sl] = x, q, op
        new.clock[sl], new.next_increment[sl], new.flagged[sl] = clock, nxt, flagged
    return new


def euler_maruyama_reference(
    n_paths: int, params: LangevinParams, seed: int, d_tau: float, n_steps: int, velocity: VelocityField = zero_velocity, block_size: int = BLOCK_SIZE
):
    """Plain Euler-Maruyama in physical time, drawing from the same block streams.

    Written as a direct loop so that the alpha = 1 pipeline can be compared
    against it path by path.
    """
    xs, qs = [], []
    n_blocks = -(-n_paths // block_size)
    d = params.dim
    for b in range(n_blocks):
        rng = block_rng(seed, b)
        n = min(block_size, n_paths - b * block_size)
        x = rng.uniform(0.0, 2 * np.pi, (n, d))
        q = _initial_q(params, rng, n)
        flagged = np.zeros(n, dtype=bool)
        for _ in range(n_steps):
            u, gu = velocity(x)
            xi = rng.standard_normal((n, d))
            eta = rng.standard_normal((n, d))
            x = np.mod(x + u * d_tau + math.sqrt(2 * params.eps * d_tau) * xi, 2 * np.pi)
            drift = q + _drift_q(params, q, gu) * d_tau
            sq = math.sqrt(d_tau / params.lambda_deb)
            q_new = drift + sq * eta
            if params.spring.is_fene:
                bad = np.einsum("pi,pi->p", q_new, q_new) >= params.spring.b
                tries = 0
                while bad.any() and tries < MAX_REJECTIONS:
                    idx = np.nonzero(bad)[0]
                    q_new[idx] = drift[idx] + sq * rng.standard_normal((len(idx), d))
                    bad[idx] = np.einsum("pi,pi->p", q_new[idx], q_new[idx]) >= params.spring.b
                    tries += 1
                q_new[bad] = q[bad]
                flagged |= bad
            q = q_new
        xs.append(x)
        qs.append(q)
    return np.concatenate(xs), np.concatenate(qs)


def empirical_density(ens_or_points, bins, ranges=None, coords: str = "q"):
    """Normalized histogram of the unflagged paths.

    ``coords`` selects "q", "x" or "xq"; returns (mass, edges).
    """
    if isinstance(ens_or_points, DumbbellEnsemble):
        keep = ~ens_or_points.flagged
        parts = {"q": ens_or_points.q[keep], "x": ens_or_points.x[keep]}
        pts = parts["q"] if coords == "q" else parts["x"] if coords == "x" else np.hstack([parts["x"], parts["q"]])
    else:
        pts = np.atleast_2d(np.asarray(ens_or_points, dtype=float))
    if len(pts) == 0:
        raise ValueError("no unflagged paths to histogram")
    mass, edges = np.histogramdd(pts, bins=bins, range=ranges)
    total = mass.sum()
    if total == 0:
        raise ValueError("no samples fall inside the histogram range")
    return mass / total, edges
