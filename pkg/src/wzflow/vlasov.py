"""Weak-form verification of the kinetic (phase-space law) equations.

Conditioned on one shared noise path the particle law satisfies a
first-order transport equation; averaging over the noise adds a
second-order momentum diffusion with coefficient eta^2 (grad sigma x
grad sigma) / 2.  Both statements are checked against particle
ensembles through a battery of smooth test functions, never through a
phase-space grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, EvaluationError, InsufficientDataError
from .noise import BrownianPath, WongZakaiMesh, sample_brownian, wz_eval
from .phase import HamiltonianSpec, PhaseState, strat_flow, wz_flow


@dataclass
class PhaseEnsemble:
    """Uniformly weighted particle cloud (x_i, p_i) at one time."""

    x: np.ndarray  # (N, d)
    p: np.ndarray  # (N, d)
    time: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if self.x.shape != self.p.shape or self.x.shape[0] < 1:
            raise ConfigurationError("particle arrays must match and be nonempty")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def average(self, values: np.ndarray) -> float:
        return float(np.mean(values))


@dataclass(frozen=True)
class TestFunction:
    """phi(x, p) = T(x) * p^m exp(-p^2) with T a low trigonometric mode.

    One-dimensional in x and p; all derivatives are analytic, and the
    Gaussian damping keeps every moment finite.
    """

    __test__ = False  # not a pytest class despite the name

    trig: str          # "one", "sin", "cos"
    power: int         # 0..3
    length: float = 2 * np.pi

    def __post_init__(self):
        if self.trig not in ("one", "sin", "cos") or not 0 <= self.power <= 3:
            raise ConfigurationError("unsupported test-function descriptor")

    @property
    def label(self) -> str:
        return f"{self.trig}*p{self.power}"

    def _t(self, x):
        w = 2 * np.pi / self.length
        if self.trig == "one":
            return np.ones_like(x), np.zeros_like(x)
        if self.trig == "sin":
            return np.sin(w * x), w * np.cos(w * x)
        return np.cos(w * x), -w * np.sin(w * x)

    def _m(self, p):
        m = self.power
        e = np.exp(-p ** 2)
        val = p ** m * e
        dp = (m * p ** max(m - 1, 0) * (1 if m else 0) - 2 * p ** (m + 1)) * e
        dpp = (
            (m * (m - 1) * p ** max(m - 2, 0) if m >= 2 else 0.0)
            - 2 * (2 * m + 1) * p ** m
            + 4 * p ** (m + 2)
        ) * e
        return val, dp, dpp

    def value(self, x, p):
        t, _ = self._t(x)
        m, _, _ = self._m(p)
        return t * m

    def dx(self, x, p):
        _, dt = self._t(x)
        m, _, _ = self._m(p)
        return dt * m

    def dp(self, x, p):
        t, _ = self._t(x)
        _, dm, _ = self._m(p)
        return t * dm

    def dpp(self, x, p):
        t, _ = self._t(x)
        _, _, dmm = self._m(p)
        return t * dmm


def default_battery(length: float = 2 * np.pi) -> list:
    """12 functions: {1, sin, cos} x {p^0..p^3} e^{-p^2}."""
    return [
        TestFunction(trig, power, length)
        for trig in ("one", "sin", "cos")
        for power in range(4)
    ]


# ---------------------------------------------------------------------------
# evolution

def evolve_conditional(
    spec: HamiltonianSpec,
    ensemble0: PhaseEnsemble,
    mesh: WongZakaiMesh,
    substeps_per_cell: int,
    sample_times: Sequence[float],
) -> list:
    """Advance every particle with the SAME noise interpolant and return
    the ensemble at each requested sample time."""
    flow = wz_flow(
        spec,
        PhaseState(ensemble0.x, ensemble0.p),
        mesh,
        substeps_per_cell=substeps_per_cell,
    )
    out = []
    for t in sample_times:
        i = int(np.argmin(np.abs(flow.times - t)))
        if abs(flow.times[i] - t) > 1e-9:
            raise EvaluationError(
                f"sample time {t} not on the integration grid (status {flow.status})"
            )
        xs, ps = flow.xs[i], flow.ps[i]
        finite = np.all(np.isfinite(xs), axis=-1) & np.all(np.isfinite(ps), axis=-1)
        out.append(
            PhaseEnsemble(
                xs[finite],
                ps[finite],
                time=float(flow.times[i]),
                provenance={
                    "seed": mesh.base.seed,
                    "excluded": int(ensemble0.n - finite.sum()),
                },
            )
        )
    return out


# ---------------------------------------------------------------------------
# weak residuals

def _check_times(sample_times):
    t = np.asarray(sample_times, dtype=float)
    if t.size < 3:
        raise InsufficientDataError("need at least 3 sample times")
    dt = t[1] - t[0]
    if np.max(np.abs(np.diff(t) - dt)) > 1e-9:
        raise ConfigurationError("sample times must be uniform")
    return t, dt


def weak_residual_first_order(
    spec: HamiltonianSpec,
    ensembles: Sequence[PhaseEnsemble],
    mesh: WongZakaiMesh,
    battery: Optional[list] = None,
) -> dict:
    """Residual of the conditional (first-order) transport equation in weak
    form, per test function and interior sample time."""
    battery = default_battery(spec.period) if battery is None else battery
    times, dt = _check_times([e.time for e in ensembles])
    labels = [phi.label for phi in battery]
    n_t = len(times)
    lhs = np.empty((len(battery), n_t - 2))
    rhs = np.empty_like(lhs)
    for i, phi in enumerate(battery):
        means = np.array(
            [e.average(phi.value(e.x[:, 0], e.p[:, 0])) for e in ensembles]
        )
        lhs[i] = (means[2:] - means[:-2]) / (2 * dt)
        for j in range(1, n_t - 1):
            e = ensembles[j]
            x, p = e.x, e.p
            _, slope = wz_eval(mesh, min(times[j], mesh.base.T))
            xi = float(np.reshape(slope, -1)[0])
            drift = (
                phi.dx(x[:, 0], p[:, 0]) * spec.grad_p_h0(x, p)[:, 0]
                - phi.dp(x[:, 0], p[:, 0]) * spec.grad_x_h0(x, p)[:, 0]
                - phi.dp(x[:, 0], p[:, 0]) * spec.grad_x_h1(x, p)[:, 0] * xi
            )
            rhs[i, j - 1] = float(np.mean(drift))
    return {
        "labels": labels,
        "times": times[1:-1],
        "lhs": lhs,
        "rhs": rhs,
        "residual": np.abs(lhs - rhs),
    }


def _second_order_terms(spec, phi, x, p, include_hessian):
    """Per-particle drift observable of the averaged (second-order) law."""
    drift = (
        phi.dx(x[:, 0], p[:, 0]) * spec.grad_p_h0(x, p)[:, 0]
        - phi.dp(x[:, 0], p[:, 0]) * spec.grad_x_h0(x, p)[:, 0]
    )
    if include_hessian:
        ds = spec.dsigma(x)[:, 0]
        drift = drift + 0.5 * spec.eta ** 2 * ds ** 2 * phi.dpp(x[:, 0], p[:, 0])
    return float(np.mean(drift))


def weak_residual_second_order(
    spec: HamiltonianSpec,
    ensemble0: PhaseEnsemble,
    n_replications: int,
    dt: float,
    sample_times: Sequence[float],
    seed: int,
    battery: Optional[list] = None,
    include_hessian_term: bool = True,
    n_bootstrap: int = 1000,
) -> dict:
    """Residual of the noise-averaged (second-order) equation with
    bootstrap confidence intervals over independent Brownian replications.

    Setting ``include_hessian_term=False`` drops the eta^2/2 momentum
    diffusion; on noisy data this ablation must push the residual out of
    its confidence interval.
    """
    if n_replications < 30:
        raise ConfigurationError("need at least 30 noise replications")
    battery = default_battery(spec.period) if battery is None else battery
    times, dt_out = _check_times(sample_times)
    t_end = float(times[-1])
    ratio = t_end / dt
    level = int(round(np.log2(ratio)))
    if abs(ratio - 2 ** level) > 1e-9 * max(ratio, 1.0):
        raise ConfigurationError("dt must divide the horizon dyadically")

    n_phi, n_t = len(battery), len(times)
    obs = np.empty((n_replications, n_phi, n_t))     # <phi> per replication
    drf = np.empty((n_replications, n_phi, n_t))     # drift observable
    for r in range(n_replications):
        path = sample_brownian(seed=seed + r, T=t_end, level=level)
        flow = strat_flow(spec, PhaseState(ensemble0.x, ensemble0.p), path, dt=dt)
        for j, t in enumerate(times):
            i = int(np.argmin(np.abs(flow.times - t)))
            if abs(flow.times[i] - t) > 1e-9:
                raise EvaluationError(f"sample time {t} unreachable ({flow.status})")
            x, p = flow.xs[i], flow.ps[i]
            for q, phi in enumerate(battery):
                obs[r, q, j] = float(np.mean(phi.value(x[:, 0], p[:, 0])))
                drf[r, q, j] = _second_order_terms(spec, phi, x, p, include_hessian_term)

    def residual_of(sample_idx):
        a = obs[sample_idx].mean(axis=0)   # (n_phi, n_t)
        d = drf[sample_idx].mean(axis=0)
        lhs = (a[:, 2:] - a[:, :-2]) / (2 * dt_out)
        return lhs, lhs - d[:, 1:-1]

    lhs, res = residual_of(np.arange(n_replications))
    rng = np.random.default_rng(seed ^ 0x5EED)
    boots = np.empty((n_bootstrap,) + res.shape)
    for b in range(n_bootstrap):
        idx = rng.integers(0, n_replications, n_replications)
        boots[b] = residual_of(idx)[1]
    ci_low = np.quantile(boots, 0.025, axis=0)
    ci_high = np.quantile(boots, 0.975, axis=0)
    mean_boots = boots.mean(axis=2)  # time-averaged residual per phi
    return {
        "labels": [phi.label for phi in battery],
        "times": times[1:-1],
        "lhs": lhs,
        "rhs": lhs - res,
        "residual": res,
        "ci_low": ci_low,
        "ci_high": ci_high,
        "mean_residual": res.mean(axis=1),
        "mean_ci_low": np.quantile(mean_boots, 0.025, axis=0),
        "mean_ci_high": np.quantile(mean_boots, 0.975, axis=0),
    }


def residual_table_to_csv(table: dict, path) -> None:
    """Rows: time, phi-id, lhs, rhs, residual[, ci_low, ci_high]."""
    has_ci = "ci_low" in table
    with open(path, "w") as fh:
        cols = "time,phi,lhs,rhs,residual" + (",ci_low,ci_high" if has_ci else "")
        fh.write(cols + "\n")
        for i, lab in enumerate(table["labels"]):
            for j, t in enumerate(table["times"]):
                row = [
                    f"{t:.17g}",
                    lab,
                    f"{table['lhs'][i, j]:.17g}",
                    f"{table['rhs'][i, j]:.17g}",
                    f"{table['residual'][i, j] if table['residual'].ndim == 2 else abs(table['residual'][i, j]):.17g}",
                ]
                if has_ci:
                    row += [
                        f"{table['ci_low'][i, j]:.17g}",
                        f"{table['ci_high'][i, j]:.17g}",
                    ]
                fh.write(",".join(row) + "\n")
