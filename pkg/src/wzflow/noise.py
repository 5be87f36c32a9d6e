"""Stochastic drivers: Brownian paths on dyadic grids, piecewise-linear
interpolants, finite-mode Wiener fields, and the scaled ergodic dispersion
driver.

All randomness is derived from explicit 64-bit seeds through counter-based
Philox streams keyed by (seed, level), so construction and dyadic refinement
are reproducible independent of evaluation order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigurationError, DomainError

NODE_CAP = 2 ** 26

_MAGIC = b"WZPATH01"


def _level_rng(seed: int, level: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(level),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class BrownianPath:
    """Sample path of a d_B-component Brownian motion on the dyadic grid
    t_j = j * T * 2**-level, refinable by Brownian-bridge midpoint insertion.

    ``values`` has shape (2**level + 1, d_B) with values[0] == 0.
    Instances are immutable; refinement returns a new path.
    """

    T: float
    level: int
    seed: int
    d_B: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        self.values.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return 2 ** self.level + 1

    @property
    def dt(self) -> float:
        return self.T * 2.0 ** (-self.level)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_nodes)

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def at_level(self, level: int) -> np.ndarray:
        """Node values restricted to the coarser dyadic grid at ``level``."""
        if level > self.level:
            raise DomainError(f"level {level} finer than stored level {self.level}")
        stride = 2 ** (self.level - level)
        return self.values[::stride]


def sample_brownian(seed: int, T: float, level: int, d_B: int = 1) -> BrownianPath:
    """Sample a Brownian path at dyadic depth ``level``.

    The construction starts from the level-0 endpoint and bridges down, so
    paths of the same seed at different levels are restrictions of one
    another (the coupling required by the convergence studies).
    """
    if T <= 0:
        raise DomainError("horizon T must be positive")
    if level < 0:
        raise DomainError("level must be nonnegative")
    if d_B < 1:
        raise ConfigurationError("d_B must be at least 1")
    if (2 ** level + 1) * d_B > NODE_CAP:
        raise CapacityError(f"level {level} with d_B={d_B} exceeds node cap {NODE_CAP}")
    endpoint = _level_rng(seed, 0).standard_normal(d_B) * np.sqrt(T)
    values = np.vstack([np.zeros(d_B), endpoint])
    path = BrownianPath(T=float(T), level=0, seed=int(seed), d_B=int(d_B), values=values)
    for _ in range(level):
        path = refine(path)
    return path


def refine(path: BrownianPath) -> BrownianPath:
    """Insert Brownian-bridge midpoints, increasing the dyadic level by 1.

    Coarse node values are kept bit-for-bit; midpoints are conditional
    Gaussians with variance T * 2**-(level + 2), drawn from the Philox
    stream keyed by (seed, level + 1).
    """
    new_level = path.level + 1
    if (2 ** new_level + 1) * path.d_B > NODE_CAP:
        raise CapacityError(f"refining to level {new_level} exceeds node cap {NODE_CAP}")
    old = path.values
    n_mid = 2 ** path.level
    std = np.sqrt(path.T * 2.0 ** (-(path.level + 2)))
    noise = _level_rng(path.seed, new_level).standard_normal((n_mid, path.d_B)) * std
    mid = 0.5 * (old[:-1] + old[1:]) + noise
    new = np.empty((2 ** new_level + 1, path.d_B))
    new[::2] = old
    new[1::2] = mid
    return BrownianPath(T=path.T, level=new_level, seed=path.seed, d_B=path.d_B, values=new)


def path_to_bytes(path: BrownianPath) -> bytes:
    """Binary container: magic, header (T, level, d_B, seed), little-endian
    float64 payload."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<dqqq", path.T, path.level, path.d_B, path.seed))
    buf.write(path.values.astype("<f8").tobytes())
    return buf.getvalue()


def path_from_bytes(data: bytes) -> BrownianPath:
    if data[:8] != _MAGIC:
        raise ConfigurationError("not a Brownian path container")
    T, level, d_B, seed = struct.unpack("<dqqq", data[8:40])
    n = 2 ** level + 1
    values = np.frombuffer(data[40:], dtype="<f8").reshape(n, d_B).copy()
    return BrownianPath(T=T, level=int(level), seed=int(seed), d_B=int(d_B), values=values)


def path_to_csv(path: BrownianPath, fname) -> None:
    header = "t," + ",".join(f"B{i}" for i in range(path.d_B))
    data = np.column_stack([path.times, path.values])
    np.savetxt(fname, data, delimiter=",", header=header, comments="")


@dataclass(frozen=True)
class WongZakaiMesh:
    """Piecewise-linear interpolant of a Brownian path on cells of width
    delta = T * 2**-l; the derivative is the cell-constant increment / delta."""

    base: BrownianPath
    delta: float

    def __post_init__(self):
        ratio = self.base.T / self.delta
        ell = int(round(np.log2(ratio)))
        if ell < 0 or abs(ratio - 2 ** ell) > 1e-9 * ratio:
            raise ConfigurationError(f"delta={self.delta} is not T*2**-l for integer l")
        if ell > self.base.level:
            raise ConfigurationError(
                f"delta level {ell} exceeds path level {self.base.level}; refine first"
            )
        object.__setattr__(self, "_ell", ell)

    @property
    def ell(self) -> int:
        return self._ell

    @property
    def n_cells(self) -> int:
        return 2 ** self._ell

    @property
    def node_values(self) -> np.ndarray:
        return self.base.at_level(self._ell)

    @property
    def node_times(self) -> np.ndarray:
        return np.linspace(0.0, self.base.T, self.n_cells + 1)

    def cell_derivative(self, k) -> np.ndarray:
        """Constant slope on cell k, shape (d_B,) (or (len(k), d_B))."""
        vals = self.node_values
        k = np.asarray(k)
        return (vals[k + 1] - vals[k]) / self.delta

    def cell_index(self, t: float) -> int:
        if t < 0 or t > self.base.T:
            raise DomainError(f"t={t} outside [0, {self.base.T}]")
        return min(int(t / self.delta), self.n_cells - 1)


def wz_eval(mesh: WongZakaiMesh, t):
    """Interpolant value and cell derivative at time(s) t.

    The value is continuous and matches the Brownian path at mesh nodes;
    the derivative is the right-cell constant (last cell at t = T).
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0) or np.any(t_arr > mesh.base.T * (1 + 1e-12)):
        raise DomainError("evaluation time outside [0, T]")
    k = np.minimum((t_arr / mesh.delta).astype(int), mesh.n_cells - 1)
    vals = mesh.node_values
    slope = (vals[k + 1] - vals[k]) / mesh.delta
    value = vals[k] + slope * (t_arr - k * mesh.delta)[:, None]
    if np.isscalar(t) or np.ndim(t) == 0:
        return value[0], slope[0]
    return value, slope


@dataclass(frozen=True)
class WienerField:
    """Finite-mode Wiener field W(t, x) = sum_k q_k(x) beta_k(t).

    ``modes`` is a list of (q_k, dq_k) spatial callables; ``components`` is a
    single Brownian path whose d_B components are the independent beta_k.
    """

    modes: tuple
    components: BrownianPath

    def __post_init__(self):
        if len(self.modes) != self.components.d_B:
            raise ConfigurationError(
                f"{len(self.modes)} modes but path has d_B={self.components.d_B}"
            )

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mode_values(self, x_grid) -> np.ndarray:
        """Shape (n_modes, len(x_grid)) array of q_k(x)."""
        x = np.asarray(x_grid, dtype=float)
        return np.stack([np.broadcast_to(q(x), x.shape) for q, _ in self.modes])

    def mode_gradients(self, x_grid) -> np.ndarray:
        x = np.asarray(x_grid, dtype=float)
        return np.stack([np.broadcast_to(dq(x), x.shape) for _, dq in self.modes])

    def increment(self, delta: float, t0: float, t1: float, x_grid) -> np.ndarray:
        """WZ-interpolated field increment W_delta(t1, x) - W_delta(t0, x)."""
        mesh = WongZakaiMesh(self.components, delta)
        v0, _ = wz_eval(mesh, t0)
        v1, _ = wz_eval(mesh, t1)
        return (v1 - v0) @ self.mode_values(x_grid)

    def brownian_increment(self, t0: float, t1: float, x_grid) -> np.ndarray:
        """Exact-path field increment read off the stored dyadic nodes."""
        mesh = WongZakaiMesh(self.components, self.components.dt)
        v0, _ = wz_eval(mesh, t0)
        v1, _ = wz_eval(mesh, t1)
        return (v1 - v0) @ self.mode_values(x_grid)


def wiener_field_eval(field: WienerField, delta: float, t, x_grid):
    """Evaluate (W_delta(t, x), dW_delta/dt(t, x), grad_x W_delta(t, x)) on a grid."""
    mesh = WongZakaiMesh(field.components, delta)
    value, slope = wz_eval(mesh, t)
    qs = field.mode_values(x_grid)
    dqs = field.mode_gradients(x_grid)
    return value @ qs, slope @ qs, value @ dqs


@dataclass(frozen=True)
class DispersionDriver:
    """Stationary Ornstein-Uhlenbeck realization of the dispersion process m,
    stored on a fine grid over [0, T_outer / epsilon**2].

    The integrated driver t -> epsilon * int_0^{t/eps^2} m(s) ds converges in
    law to sigma0 * B(t) with sigma0**2 = ou_scale**2 / ou_rate**2.
    """

    ou_rate: float
    ou_scale: float
    epsilon: float
    T_outer: float
    seed: int
    n_sub: int = 64  # inner-grid points per unit of inner time

    def __post_init__(self):
        if self.ou_rate <= 0 or self.epsilon <= 0 or self.T_outer <= 0:
            raise ConfigurationError("ou_rate, epsilon, T_outer must be positive")
        tau_max = self.T_outer / self.epsilon ** 2
        n = int(np.ceil(tau_max * self.n_sub)) + 1
        if n > NODE_CAP:
            raise CapacityError(f"dispersion grid of {n} nodes exceeds cap {NODE_CAP}")
        dtau = tau_max / (n - 1)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))
        stat_std = self.ou_scale / np.sqrt(2 * self.ou_rate)
        decay = np.exp(-self.ou_rate * dtau)
        kick = stat_std * np.sqrt(1 - decay ** 2)
        m = np.empty(n)
        m[0] = stat_std * rng.standard_normal()
        noise = rng.standard_normal(n - 1)
        for j in range(1, n):
            m[j] = decay * m[j - 1] + kick * noise[j - 1]
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (m[:-1] + m[1:]) * dtau)])
        object.__setattr__(self, "_dtau", dtau)
        object.__setattr__(self, "_m", m)
        object.__setattr__(self, "_cum", cum)

    @property
    def sigma0_squared(self) -> float:
        return self.ou_scale ** 2 / self.ou_rate ** 2

    def m_at(self, tau):
        """Piecewise-linear interpolation of the stored inner-time process."""
        grid = np.arange(len(self._m)) * self._dtau
        return np.interp(tau, grid, self._m)

    def _antiderivative(self, tau: float) -> float:
        """int_0^tau m(s) ds with trapezoidal quadrature on the fine grid."""
        tau_max = (len(self._m) - 1) * self._dtau
        if tau < -1e-12 or tau > tau_max * (1 + 1e-12):
            raise DomainError(f"inner time {tau} outside stored horizon {tau_max}")
        j = min(int(tau / self._dtau), len(self._m) - 2)
        t_j = j * self._dtau
        frac = tau - t_j
        m_tau = self._m[j] + (self._m[j + 1] - self._m[j]) * frac / self._dtau
        return self._cum[j] + 0.5 * (self._m[j] + m_tau) * frac


def dispersion_integral(driver: DispersionDriver, t1: float, t2: float) -> float:
    """int_{t1}^{t2} (1/eps) m(s/eps**2) ds, additive over adjacent intervals."""
    if t1 < 0 or t2 < t1 or t2 > driver.T_outer * (1 + 1e-12):
        raise DomainError(f"interval [{t1}, {t2}] outside [0, {driver.T_outer}]")
    eps = driver.epsilon
    return eps * (driver._antiderivative(t2 / eps ** 2) - driver._antiderivative(t1 / eps ** 2))
