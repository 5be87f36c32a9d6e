"""Dynamics on the density manifold: push-forward of densities under the
phase-space flow, the weighted elliptic pseudo-inverse, Fisher
information with its Bohm potential, the Wasserstein metric, and the
noise-driven Hamiltonian flow for (rho, Phi) on a periodic grid.

One-dimensional grids throughout unless noted; the Monte Carlo
push-forward and the elliptic solver also accept 2D grids.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import (
    ConfigurationError,
    ConvergenceError,
    DiffeomorphismLostError,
    DomainError,
    GaugeError,
    SamplingError,
    StabilityError,
    SupportError,
)
from .fields import (
    DensityField,
    GridSpec,
    PotentialField,
    VelocityField,
    dealias,
    divergence,
    grad_components,
    laplacian,
    resample,
)
from .noise import WongZakaiMesh, wz_eval
from .phase import HamiltonianSpec, PhaseState, variational_flow, wz_flow

DEFAULT_FLOOR = 1e-10


def _time_index(times: np.ndarray, t: float) -> int:
    i = int(np.argmin(np.abs(times - t)))
    if abs(times[i] - t) > 1e-9:
        raise DomainError(f"t={t} does not align with stored sample times")
    return i


# ---------------------------------------------------------------------------
# weighted elliptic solver

def _weighted_laplacian_apply(grid: GridSpec, rho: np.ndarray, phi: np.ndarray):
    """Conservative second-order discretization of -div(rho grad phi)."""
    phi = np.asarray(phi, dtype=float)
    out = np.zeros(phi.shape)
    h2 = grid.h ** 2
    for axis in range(grid.dimension):
        rp = 0.5 * (rho + np.roll(rho, -1, axis=axis))
        rm = np.roll(rp, 1, axis=axis)
        out -= (
            rp * (np.roll(phi, -1, axis=axis) - phi)
            - rm * (phi - np.roll(phi, 1, axis=axis))
        ) / h2
    return out


def _fd_symbol(grid: GridSpec) -> np.ndarray:
    """Eigenvalues of the constant-coefficient five/three-point Laplacian."""
    lam1 = (2.0 - 2.0 * np.cos(grid.wavenumbers() * grid.h)) / grid.h ** 2
    if grid.dimension == 1:
        return lam1
    return lam1[:, None] + lam1[None, :]


def elliptic_solve(
    rho: DensityField,
    kappa: np.ndarray,
    rho_floor: float = DEFAULT_FLOOR,
    tol: float = 1e-10,
    maxiter: int = 5000,
) -> PotentialField:
    """Solve -div(rho grad Phi) = kappa on the periodic grid to relative
    residual <= tol, zero-mean gauge.

    Preconditioned conjugate gradients; the preconditioner inverts the
    constant-coefficient operator mean(rho) * (-Laplacian) spectrally.
    """
    grid = rho.grid
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape != grid.shape:
        raise ConfigurationError("source does not match the grid")
    if np.min(rho.values) < rho_floor:
        raise SupportError(f"density falls below the positivity floor {rho_floor}")
    knorm = float(np.max(np.abs(kappa)))
    if abs(grid.integrate(kappa)) > 1e-10 * max(1.0, knorm):
        raise GaugeError("source must have zero mean (compatibility condition)")
    if knorm == 0.0:
        return PotentialField(grid, np.zeros(grid.shape))

    rvals = rho.values
    shape = grid.shape
    n_tot = int(np.prod(shape))
    sym = _fd_symbol(grid) * float(np.mean(rvals))
    inv_sym = np.zeros_like(sym)
    nz = sym > 1e-30
    inv_sym[nz] = 1.0 / sym[nz]

    def apply_a(v):
        out = _weighted_laplacian_apply(grid, rvals, v.reshape(shape))
        return (out - out.mean()).ravel()

    def apply_m(v):
        hat = np.fft.fftn(np.asarray(v, dtype=float).reshape(shape))
        out = np.real(np.fft.ifftn(hat * inv_sym))
        return (out - out.mean()).ravel()

    A = LinearOperator((n_tot, n_tot), matvec=apply_a)
    M = LinearOperator((n_tot, n_tot), matvec=apply_m)
    b = (kappa - kappa.mean()).ravel()
    phi, _ = cg(A, b, rtol=tol * 1e-2, atol=0.0, maxiter=maxiter, M=M)
    resid = float(np.linalg.norm(apply_a(phi) - b) / np.linalg.norm(b))
    if resid > tol:
        raise ConvergenceError(
            f"elliptic solver stalled at relative residual {resid:.3e}",
            residual=resid,
        )
    return PotentialField.projected(grid, phi.reshape(shape))


def wasserstein_metric(rho: DensityField, kappa1, kappa2, tol: float = 1e-10) -> float:
    """Metric pairing g_W(kappa1, kappa2) = int grad Phi1 . grad Phi2 rho
    with -div(rho grad Phi_i) = kappa_i.

    Evaluated in the flux (midpoint) form so that it coincides with the
    dual pairing int kappa1 Phi2 of the discrete operator to round-off.
    """
    grid = rho.grid
    phi1 = elliptic_solve(rho, kappa1, tol=tol).values
    phi2 = elliptic_solve(rho, kappa2, tol=tol).values
    total = 0.0
    for axis in range(grid.dimension):
        rp = 0.5 * (rho.values + np.roll(rho.values, -1, axis=axis))
        d1 = (np.roll(phi1, -1, axis=axis) - phi1) / grid.h
        d2 = (np.roll(phi2, -1, axis=axis) - phi2) / grid.h
        total += float(np.sum(rp * d1 * d2)) * grid.cell_volume
    return total


# ---------------------------------------------------------------------------
# Fisher information and the Bohm potential

@dataclass
class FisherResult:
    value: float
    bohm: np.ndarray          # -4 * lap(sqrt rho) / sqrt rho
    form_discrepancy: float   # vs |grad log rho|^2 - 2 lap(rho)/rho


def fisher_and_bohm(rho: DensityField, rho_floor: float = DEFAULT_FLOOR) -> FisherResult:
    grid = rho.grid
    if np.min(rho.values) < rho_floor:
        raise SupportError(f"density falls below the positivity floor {rho_floor}")
    log_rho = np.log(rho.values)
    grad_sq = sum(g ** 2 for g in grad_components(grid, log_rho))
    value = grid.integrate(grad_sq * rho.values)
    s = np.sqrt(rho.values)
    bohm_a = -4.0 * laplacian(grid, s) / s
    bohm_b = grad_sq - 2.0 * laplacian(grid, rho.values) / rho.values
    return FisherResult(
        value=value,
        bohm=bohm_a,
        form_discrepancy=float(np.max(np.abs(bohm_a - bohm_b))),
    )


# ---------------------------------------------------------------------------
# functionals on the density manifold

@dataclass
class Functional:
    """F(rho) = int V rho + c_F * I(rho) with I the Fisher information.

    ``potential`` is a callable of the node coordinates or an array on the
    grid; the variation is V + c_F * (-4 lap sqrt(rho) / sqrt(rho)).
    """

    potential: object = None
    fisher_coeff: float = 0.0

    def potential_values(self, grid: GridSpec) -> np.ndarray:
        if self.potential is None:
            return np.zeros(grid.shape)
        if callable(self.potential):
            nodes = grid.nodes()
            return self.potential(*nodes) if grid.dimension == 2 else self.potential(nodes)
        return np.asarray(self.potential, dtype=float)

    def variation(self, grid: GridSpec, rho_values: np.ndarray) -> np.ndarray:
        out = self.potential_values(grid).copy()
        if self.fisher_coeff != 0.0:
            s = np.sqrt(np.maximum(rho_values, DEFAULT_FLOOR))
            out += self.fisher_coeff * (-4.0 * laplacian(grid, s) / s)
        return out

    def value(self, rho: DensityField) -> float:
        out = rho.grid.integrate(self.potential_values(rho.grid) * rho.values)
        if self.fisher_coeff != 0.0:
            out += self.fisher_coeff * fisher_and_bohm(rho).value
        return out


ZERO_FUNCTIONAL = Functional()


# ---------------------------------------------------------------------------
# push-forward of densities under the phase-space flow

@dataclass
class PushforwardResult:
    density: DensityField
    renorm_factor: float
    stderr: Optional[np.ndarray] = None
    excluded: int = 0


def _euclidean(spec: HamiltonianSpec) -> HamiltonianSpec:
    # integrate characteristics unwrapped; wrap only when binning
    if spec.domain == "torus":
        return dataclasses.replace(spec, domain="euclidean")
    return spec


def _initial_momenta(grid: GridSpec, v0: Optional[VelocityField], x0: np.ndarray):
    if v0 is None:
        return np.zeros_like(x0)
    return resample(grid, v0.values, x0)


def pushforward_jacobian(
    spec: HamiltonianSpec,
    rho0: DensityField,
    mesh: WongZakaiMesh,
    t: float,
    v0: Optional[VelocityField] = None,
    refine_factor: int = 4,
    det_threshold: float = 1e-6,
    substeps_per_cell: int = 8,
) -> PushforwardResult:
    """Transport rho0 along the flow map via the change-of-variables
    formula rho_t(y) = rho0(x0(y)) |det dx0/dy|.

    Characteristics seeded on a refined Lagrangian grid carry the
    first-variation Jacobian; the monotone 1D map is inverted by
    interpolation and rho0 is evaluated by trigonometric resampling.
    """
    grid = rho0.grid
    if grid.dimension != 1:
        raise ConfigurationError("Jacobian-formula push-forward is one-dimensional")
    L = grid.period
    m = refine_factor * grid.n
    seeds = grid.origin + L * np.arange(m) / m
    p0 = _initial_momenta(grid, v0, seeds)
    flow = variational_flow(
        _euclidean(spec),
        PhaseState(seeds[:, None], p0[:, None]),
        mesh,
        substeps_per_cell=substeps_per_cell,
    )
    idx = _time_index(flow.times, t)
    dets = flow.jacobians[: idx + 1, :, 0, 0]
    bad = np.nonzero(np.min(dets, axis=1) <= det_threshold)[0]
    if bad.size:
        raise DiffeomorphismLostError(
            "flow map stopped being a diffeomorphism",
            loss_time=float(flow.times[bad[0]]),
        )
    xt = flow.xs[idx, :, 0]
    jac = flow.jacobians[idx, :, 0, 0]
    if np.any(np.diff(xt) <= 0):
        raise DiffeomorphismLostError("transported grid is not monotone", loss_time=t)

    rho0_of = lambda pts: np.maximum(resample(grid, rho0.values, pts), 0.0)
    nodes = grid.axis()
    if spec.domain == "torus":
        # periodic dynamics: the map commutes with x -> x + L
        xt_ext = np.concatenate([xt - L, xt, xt + L])
        x0_ext = np.concatenate([seeds - L, seeds, seeds + L])
        j_ext = np.concatenate([jac, jac, jac])
        x0_at = np.interp(nodes, xt_ext, x0_ext)
        j_at = np.interp(nodes, xt_ext, j_ext)
        vals = rho0_of(x0_at) / np.abs(j_at)
    else:
        vals = np.zeros(grid.n)
        inside = (nodes >= xt[0]) & (nodes <= xt[-1])
        x0_at = np.interp(nodes[inside], xt, seeds)
        j_at = np.interp(nodes[inside], xt, jac)
        vals[inside] = rho0_of(x0_at) / np.abs(j_at)
    mass = grid.integrate(vals)
    if mass <= 0:
        raise SupportError("transported density lost all mass on the grid")
    return PushforwardResult(
        density=DensityField(grid, vals / mass), renorm_factor=1.0 / mass
    )


def sample_density(rho0: DensityField, n: int, rng, max_tries: int = 200) -> np.ndarray:
    """Draw n points from a grid density: inverse CDF in 1D, rejection in 2D."""
    grid = rho0.grid
    if grid.dimension == 1:
        # cells centered on the nodes so histogramming back is unbiased
        lo = grid.origin - grid.h / 2
        edges = lo + grid.h * np.arange(grid.n + 1)
        cdf = np.concatenate([[0.0], np.cumsum(rho0.values) * grid.h])
        cdf = cdf / cdf[-1]
        return np.interp(rng.random(n), cdf, edges)[:, None]
    rho_max = float(np.max(rho0.values))
    out = np.empty((0, 2))
    tries = 0
    accept_floor = 0.01
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise SamplingError(
                f"rejection acceptance below {accept_floor} for this density"
            )
        cand = grid.origin + grid.period * rng.random((4 * n, 2))
        ix = np.rint((cand - grid.origin) / grid.h).astype(int) % grid.n
        dens = rho0.values[ix[:, 0], ix[:, 1]]
        keep = rng.random(4 * n) * rho_max < dens
        if tries == 1 and keep.mean() < accept_floor:
            raise SamplingError(
                f"rejection acceptance {keep.mean():.4f} below floor {accept_floor}"
            )
        out = np.concatenate([out, cand[keep]])
    return out[:n]


def pushforward_mc(
    spec: HamiltonianSpec,
    rho0: DensityField,
    mesh: WongZakaiMesh,
    t: float,
    n_particles: int,
    seed: int,
    v0: Optional[VelocityField] = None,
    substeps_per_cell: int = 8,
) -> PushforwardResult:
    """Monte Carlo push-forward: sample rho0, advect every particle with the
    SAME noise path, and histogram onto the grid.

    Returns the normalized histogram density together with a per-bin
    binomial standard-error field.
    """
    grid = rho0.grid
    if n_particles < 1000:
        raise ConfigurationError("n_particles must be at least 1000")
    rng = np.random.default_rng(seed)
    x0 = sample_density(rho0, n_particles, rng)
    if grid.dimension == 1:
        p0 = _initial_momenta(grid, v0, x0[:, 0])[:, None]
    else:
        p0 = np.zeros_like(x0)
    flow = wz_flow(
        _euclidean(spec), PhaseState(x0, p0), mesh, substeps_per_cell=substeps_per_cell
    )
    idx = _time_index(flow.times, t)
    xt = flow.xs[idx]
    finite = np.all(np.isfinite(xt), axis=-1)
    excluded = int(n_particles - finite.sum())
    xt = xt[finite]
    if spec.domain == "torus":
        xt = grid.origin + np.mod(xt - grid.origin, grid.period)
    if grid.dimension == 1:
        lo = grid.origin - grid.h / 2
        pos = lo + np.mod(xt[:, 0] - lo, grid.period)
        edges = lo + grid.h * np.arange(grid.n + 1)
        counts, _ = np.histogram(pos, bins=edges)
    else:
        lo = grid.origin - grid.h / 2
        pos = lo + np.mod(xt - lo, grid.period)
        edges = lo + grid.h * np.arange(grid.n + 1)
        counts, _, _ = np.histogram2d(pos[:, 0], pos[:, 1], bins=(edges, edges))
    n_kept = counts.sum()
    phat = counts / n_kept
    vals = phat / grid.cell_volume
    stderr = np.sqrt(phat * (1 - phat) / n_kept) / grid.cell_volume
    return PushforwardResult(
        density=DensityField.normalized(grid, vals),
        renorm_factor=1.0,
        stderr=stderr,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# generalized Hamiltonian flow on the density manifold

@dataclass
class WhfSpec:
    """Ingredients of the flow for (rho, Phi): drift functional, noise
    functional, noise strength, positivity floor, CFL safety factor."""

    free_energy: Functional = field(default_factory=Functional)
    noise_energy: Functional = field(default_factory=Functional)
    eta: float = 0.0
    rho_floor: float = DEFAULT_FLOOR
    cfl: float = 0.5


def _whf_rhs(grid, wspec, xi_dot, rho, phi):
    kin = 1.0 + wspec.eta * xi_dot
    gphi = grad_components(grid, phi)[0]
    drho = -kin * divergence(grid, [dealias(grid, rho * gphi)])
    dphi = -kin * 0.5 * dealias(grid, gphi * gphi)
    dphi -= wspec.free_energy.variation(grid, rho)
    if wspec.eta != 0.0:
        dphi -= wspec.eta * xi_dot * wspec.noise_energy.variation(grid, rho)
    return drho, dphi


def generalized_whf_step(
    rho: DensityField,
    phi: PotentialField,
    xi_dot: float,
    wspec: WhfSpec,
    dt: float,
):
    """One RK4 substep of the noise-driven flow

        d rho/dt = -(1 + eta xi') div(rho grad Phi)
        d Phi/dt = -(1 + eta xi') |grad Phi|^2 / 2 - dF/drho - eta dS/drho xi'

    with spectral derivatives and 2/3-rule dealiasing of products.
    Returns (rho, Phi, report); the report carries the mass renormalization
    factor and the clipped fraction.
    """
    grid = rho.grid
    if grid.dimension != 1:
        raise ConfigurationError("density-manifold flow is one-dimensional")
    kin = 1.0 + wspec.eta * xi_dot
    speed = float(np.max(np.abs(grad_components(grid, phi.values)[0])))
    dt_max = wspec.cfl * grid.h / max(abs(kin) * speed, 1e-12)
    if dt > dt_max:
        raise StabilityError(
            f"dt={dt:.3e} exceeds the advective stability bound", suggested_dt=dt_max
        )
    r, s = rho.values, phi.values
    k1 = _whf_rhs(grid, wspec, xi_dot, r, s)
    k2 = _whf_rhs(grid, wspec, xi_dot, r + 0.5 * dt * k1[0], s + 0.5 * dt * k1[1])
    k3 = _whf_rhs(grid, wspec, xi_dot, r + 0.5 * dt * k2[0], s + 0.5 * dt * k2[1])
    k4 = _whf_rhs(grid, wspec, xi_dot, r + dt * k3[0], s + dt * k3[1])
    r_new = r + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    s_new = s + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    if not (np.all(np.isfinite(r_new)) and np.all(np.isfinite(s_new))):
        raise StabilityError("flow produced non-finite fields", suggested_dt=dt / 2)
    clipped = r_new < wspec.rho_floor
    r_new = np.maximum(r_new, wspec.rho_floor)
    mass = grid.integrate(r_new)
    report = {
        "mass_factor": 1.0 / mass,
        "clipped_fraction": float(np.mean(clipped)),
        "dt_max": dt_max,
    }
    return (
        DensityField(grid, r_new / mass),
        PotentialField.projected(grid, s_new),
        report,
    )


def whf_energy(rho: DensityField, phi: PotentialField, wspec: WhfSpec) -> float:
    """H(rho, Phi) = int |grad Phi|^2 rho / 2 + F(rho)."""
    gphi = grad_components(rho.grid, phi.values)[0]
    return 0.5 * rho.grid.integrate(gphi ** 2 * rho.values) + wspec.free_energy.value(rho)


@dataclass
class WhfTrajectory:
    times: np.ndarray
    rhos: list
    phis: list
    reports: list

    def at(self, t: float):
        i = _time_index(self.times, t)
        return self.rhos[i], self.phis[i]


def whf_evolve(
    rho0: DensityField,
    phi0: PotentialField,
    mesh: WongZakaiMesh,
    wspec: WhfSpec,
    substeps_per_cell: int,
    t_end: Optional[float] = None,
) -> WhfTrajectory:
    """March the flow across the noise cells, substeps RK4 steps per cell."""
    rho, phi = rho0, phi0
    dt = mesh.delta / substeps_per_cell
    t_end = mesh.base.T if t_end is None else t_end
    times = [0.0]
    rhos, phis, reports = [rho], [phi], [{}]
    t = 0.0
    for k in range(mesh.n_cells):
        if t >= t_end - 1e-12:
            break
        xi = float(mesh.cell_derivative(k).reshape(-1)[0])
        for _ in range(substeps_per_cell):
            rho, phi, rep = generalized_whf_step(rho, phi, xi, wspec, dt)
            t += dt
            times.append(t)
            rhos.append(rho)
            phis.append(phi)
            reports.append(rep)
    return WhfTrajectory(np.array(times), rhos, phis, reports)


# ---------------------------------------------------------------------------
# residual diagnostics

def el_residual(
    rhos: Sequence[DensityField],
    times: np.ndarray,
    mesh: WongZakaiMesh,
    free_energy: Functional = ZERO_FUNCTIONAL,
    noise_energy: Functional = ZERO_FUNCTIONAL,
    eta: float = 0.0,
    tol: float = 1e-10,
) -> dict:
    """Residuals of the two Hamiltonian equations reconstructed from a
    density trajectory alone.

    Phi_t is recovered as the weighted-elliptic preimage of the (scaled)
    time derivative of rho; the continuity residual is then measured
    spectrally and the Hamilton-Jacobi residual after zero-mean projection
    of both sides.
    """
    times = np.asarray(times, dtype=float)
    if len(rhos) != len(times) or len(times) < 5:
        raise ConfigurationError("need at least 5 aligned samples")
    dt = times[1] - times[0]
    if np.max(np.abs(np.diff(times) - dt)) > 1e-9:
        raise ConfigurationError("sample times must be uniform")
    grid = rhos[0].grid
    n_t = len(times)
    kins = np.empty(n_t)
    for j in range(n_t):
        _, slope = wz_eval(mesh, min(times[j], mesh.base.T))
        kins[j] = 1.0 + eta * float(np.reshape(slope, -1)[0])

    phis = {}
    for j in range(1, n_t - 1):
        drho = (rhos[j + 1].values - rhos[j - 1].values) / (2 * dt)
        phis[j] = elliptic_solve(rhos[j], drho / kins[j], tol=tol).values

    cont = []
    for j in range(1, n_t - 1):
        drho = (rhos[j + 1].values - rhos[j - 1].values) / (2 * dt)
        gphi = grad_components(grid, phis[j])[0]
        r = drho + kins[j] * divergence(grid, [rhos[j].values * gphi])
        cont.append(float(np.max(np.abs(r))))

    hjb = []
    for j in range(2, n_t - 2):
        dphi = (phis[j + 1] - phis[j - 1]) / (2 * dt)
        gphi = grad_components(grid, phis[j])[0]
        xi_dot = (kins[j] - 1.0) / eta if eta != 0.0 else 0.0
        r = (
            dphi
            + kins[j] * 0.5 * gphi ** 2
            + free_energy.variation(grid, rhos[j].values)
            + eta * xi_dot * noise_energy.variation(grid, rhos[j].values)
        )
        r -= r.mean()
        hjb.append(float(np.max(np.abs(r))))

    return {
        "times_continuity": times[1:-1],
        "continuity": np.array(cont),
        "times_hjb": times[2:-2],
        "hjb": np.array(hjb),
    }


def trig_test_battery(grid: GridSpec, n_modes: int = 3):
    """(label, psi, dpsi) triplets of low trigonometric modes."""
    x = grid.axis()
    out = []
    for m in range(1, n_modes + 1):
        w = 2 * np.pi * m / grid.period
        out.append((f"sin{m}", np.sin(w * x), w * np.cos(w * x)))
        out.append((f"cos{m}", np.cos(w * x), -w * np.sin(w * x)))
    return out


def continuity_residual(
    rhos: Sequence[DensityField],
    velocities: Sequence[VelocityField],
    times: np.ndarray,
    n_modes: int = 3,
) -> dict:
    """Weak-form residual |d/dt int psi rho - int grad psi . v rho| per time
    for a battery of trigonometric test functions (centered differences)."""
    times = np.asarray(times, dtype=float)
    if len(rhos) != len(times) or len(velocities) != len(times):
        raise ConfigurationError("series lengths must match the times")
    grid = rhos[0].grid
    if grid.dimension != 1:
        raise ConfigurationError("weak continuity residual is one-dimensional")
    dt = times[1] - times[0]
    battery = trig_test_battery(grid, n_modes)
    labels = [b[0] for b in battery]
    table = np.empty((len(battery), len(times) - 2))
    for i, (_, psi, dpsi) in enumerate(battery):
        obs = np.array([grid.integrate(psi * r.values) for r in rhos])
        flux = np.array(
            [
                grid.integrate(dpsi * v.values * r.values)
                for r, v in zip(rhos, velocities)
            ]
        )
        lhs = (obs[2:] - obs[:-2]) / (2 * dt)
        table[i] = np.abs(lhs - flux[1:-1])
    return {
        "times": times[1:-1],
        "labels": labels,
        "residuals": table,
        "max_per_time": table.max(axis=0),
    }
