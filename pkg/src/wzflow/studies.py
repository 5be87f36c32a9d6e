"""Convergence-study harness.

Couples every noise-mesh level of a study to one underlying Brownian
path per replication, measures sup-in-time strong errors against a
reference (Stratonovich limit scheme, exact solution, or the finest
level), aggregates RMS errors with bootstrap confidence intervals, and
fits the convergence order on log-log axes.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DomainError,
    EvaluationError,
    InsufficientDataError,
)
from .noise import WongZakaiMesh, sample_brownian
from .phase import COMPLETED, HamiltonianSpec, PhaseState, strat_flow, wz_flow

try:  # package version for run manifests
    from importlib.metadata import version as _pkg_version

    VERSION = _pkg_version("wzflow")
except Exception:  # pragma: no cover
    VERSION = "unknown"

SYSTEMS = ("phase_flow", "snls", "wasserstein.generalized")


# ---------------------------------------------------------------------------
# order fitting and resampling

def fit_order(points: Sequence) -> tuple:
    """Ordinary least squares of log(error) on log(delta).

    Returns (slope, intercept, slope standard error)."""
    pts = [(float(d), float(e)) for d, e in points]
    if len(pts) < 3:
        raise InsufficientDataError("order fit needs at least 3 points")
    if any(e <= 0 for _, e in pts) or any(d <= 0 for d, _ in pts):
        raise DomainError("order fit needs positive deltas and errors")
    x = np.log([d for d, _ in pts])
    y = np.log([e for _, e in pts])
    n = len(pts)
    xm = x - x.mean()
    slope = float(np.dot(xm, y) / np.dot(xm, xm))
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    s2 = float(np.dot(resid, resid)) / (n - 2)
    stderr = float(np.sqrt(s2 / np.dot(xm, xm)))
    return slope, intercept, stderr


def bootstrap_rms_ci(samples: np.ndarray, n_bootstrap: int, rng) -> tuple:
    """95% percentile interval for sqrt(mean(samples^2)) under resampling."""
    samples = np.asarray(samples, dtype=float)
    m = samples.shape[0]
    idx = rng.integers(0, m, size=(n_bootstrap, m))
    stats = np.sqrt(np.mean(samples[idx] ** 2, axis=1))
    return float(np.quantile(stats, 0.025)), float(np.quantile(stats, 0.975))


# ---------------------------------------------------------------------------
# per-path error engines

def _check_deltas(deltas, T):
    out = sorted(float(d) for d in deltas)
    if len(set(out)) != len(out):
        raise ConfigurationError("delta levels must be distinct")
    for d in out:
        ratio = T / d
        if abs(round(np.log2(ratio)) - np.log2(ratio)) > 1e-9:
            raise ConfigurationError("delta levels must be dyadic fractions of T")
    return out[::-1]  # descending


def _grid_indices(times: np.ndarray, sample_times: np.ndarray) -> np.ndarray:
    dt = times[1] - times[0]
    idx = np.rint(sample_times / dt).astype(int)
    if np.max(np.abs(times[idx] - sample_times)) > 1e-9:
        raise EvaluationError("sample times are not on the stored grid")
    return idx


def _phase_errors(payload, deltas, M, T, dt, seed, substeps_per_cell):
    spec: HamiltonianSpec = payload["spec"]
    state0: PhaseState = payload["state0"]
    reference = payload.get("reference", "strat")
    x0 = np.broadcast_to(state0.x, (M,) + state0.x.shape).copy()
    p0 = np.broadcast_to(state0.p, (M,) + state0.p.shape).copy()
    batched = PhaseState(x0, p0)

    # the sup is taken over each level's own stored substep times (spacing
    # delta / substeps): a coarser common grid would only hit noise-cell
    # boundaries at fine delta, where the interpolant equals the Brownian
    # path and the error is invisible
    sub_bits = max(int(np.ceil(np.log2(substeps_per_cell))), 0)
    if 2 ** sub_bits != substeps_per_cell:
        raise ConfigurationError("substeps_per_cell must be a power of two")
    ell_min = int(round(np.log2(T / deltas[-1])))
    ref_bits = int(round(np.log2(T / dt))) if reference == "strat" else 0
    level = max(ell_min + sub_bits, ref_bits)
    path = sample_brownian(seed=seed, T=T, level=level, d_B=M)

    if reference == "strat":
        if ref_bits < ell_min + sub_bits:
            raise ConfigurationError(
                "reference dt must resolve the finest level's substep grid"
            )
        ref = strat_flow(spec, batched, path, dt=dt)
        if ref.status != COMPLETED:
            raise EvaluationError(f"reference integration failed: {ref.status}")
        ref_x, ref_p, ref_times = ref.xs, ref.ps, ref.times
    elif reference == "exact_additive":
        # sigma(x) = x, f = 0: p(t) = p0 - eta B(t) exactly
        nodes = path.at_level(level)  # (n+1, M)
        ref_p = p0[None, :, :] - spec.eta * nodes[:, :, None]
        ref_x = None
        ref_times = np.linspace(0.0, T, nodes.shape[0])
    else:
        raise ConfigurationError(f"unknown phase-flow reference {reference!r}")

    errors = np.full((M, len(deltas)), np.nan)
    census = {}
    for j, d in enumerate(deltas):
        mesh = WongZakaiMesh(path, d)
        run = wz_flow(spec, batched, mesh, substeps_per_cell=substeps_per_cell)
        if run.status != COMPLETED:
            census[d] = f"all paths: {run.status}"
            continue
        ii = _grid_indices(ref_times, run.times)
        dp = run.ps - ref_p[ii]
        if ref_x is not None:
            dx = run.xs - ref_x[ii]
            if spec.domain == "torus":
                half = spec.period / 2
                dx = np.mod(dx + half, spec.period) - half
            dist = np.sqrt(np.sum(dx ** 2 + dp ** 2, axis=-1))
        else:
            dist = np.sqrt(np.sum(dp ** 2, axis=-1))
        errors[:, j] = np.max(dist, axis=0)
    return np.array(deltas), errors, census


def _snls_errors(payload, deltas, M, T, dt, seed):
    from .snls import wz_convergence_study

    out = wz_convergence_study(
        payload["lam"],
        payload["f"],
        payload["F"],
        payload["modes"],
        payload["u0"],
        T,
        list(deltas) ,
        dt,
        M,
        seed,
    )
    return out["deltas"], out["per_path_errors"], {}


def _whf_errors(payload, deltas, M, T, dt, seed, substeps_per_cell):
    from .density import whf_evolve
    from .errors import StabilityError

    rho0, phi0, wspec = payload["rho0"], payload["phi0"], payload["wspec"]
    grid = rho0.grid
    ell_min = int(round(np.log2(T / deltas[-1])))
    n_coarse = int(round(T / deltas[0])) * substeps_per_cell
    sample_times = np.linspace(0.0, T, n_coarse + 1)
    errors = np.full((M, len(deltas) - 1), np.nan)
    failures = {d: 0 for d in deltas}
    for m in range(M):
        path = sample_brownian(seed=seed + m, T=T, level=ell_min, d_B=1)

        def run(delta):
            mesh = WongZakaiMesh(path, delta)
            return whf_evolve(rho0, phi0, mesh, wspec, substeps_per_cell, T)

        try:
            ref = run(deltas[-1])
        except StabilityError:
            for d in deltas:
                failures[d] += 1
            continue
        ii_ref = _grid_indices(ref.times, sample_times)
        for j, d in enumerate(deltas[:-1]):
            try:
                traj = run(d)
            except StabilityError:
                failures[d] += 1
                continue
            ii = _grid_indices(traj.times, sample_times)
            sup = max(
                np.sqrt(grid.integrate((traj.rhos[a].values - ref.rhos[b].values) ** 2))
                for a, b in zip(ii, ii_ref)
            )
            errors[m, j] = sup
    census = {d: n for d, n in failures.items() if n}
    return np.array(deltas[:-1]), errors, census


def _per_path_errors(system, payload, deltas, M, T, dt, seed, substeps_per_cell):
    deltas = _check_deltas(deltas, T)
    if system == "phase_flow":
        return _phase_errors(payload, deltas, M, T, dt, seed, substeps_per_cell)
    if system == "snls":
        return _snls_errors(payload, deltas, M, T, dt, seed)
    if system == "wasserstein.generalized":
        return _whf_errors(payload, deltas, M, T, dt, seed, substeps_per_cell)
    raise ConfigurationError(f"unknown system {system!r}; expected one of {SYSTEMS}")


def _failure_check(errors: np.ndarray, census: dict, deltas):
    bad = ~np.isfinite(errors)
    frac = bad.mean(axis=0)
    worst = float(np.max(frac)) if frac.size else 0.0
    if worst > 0.2:
        table = {float(d): float(f) for d, f in zip(deltas, frac)}
        raise EvaluationError(
            f"integration failed on more than 20% of paths: {table}; census {census}"
        )


# ---------------------------------------------------------------------------
# public studies

@dataclass
class ConvergenceReport:
    deltas: np.ndarray          # strictly decreasing
    errors: np.ndarray          # RMS over paths, per level
    ci_low: np.ndarray
    ci_high: np.ndarray
    order: Optional[float]
    order_stderr: Optional[float]
    intercept: Optional[float]
    degenerate: bool
    norm: str
    metadata: dict = field(default_factory=dict)


def _payload_hash(system, payload, deltas, M, T, dt, seed) -> str:
    digest = hashlib.sha256()
    digest.update(
        repr((system, sorted(payload.keys()), list(deltas), M, T, dt, seed)).encode()
    )
    return digest.hexdigest()[:16]


def strong_convergence_study(
    system: str,
    payload: dict,
    deltas: Sequence[float],
    M: int,
    T: float,
    dt: float,
    seed: int = 0,
    substeps_per_cell: int = 8,
    n_bootstrap: int = 1000,
    noise_floor: float = 1e-10,
) -> ConvergenceReport:
    """RMS of per-path sup-in-time errors per delta level, with bootstrap
    CIs and a log-log least-squares order fit (flagged degenerate when all
    errors sit at the integrator floor)."""
    used, errors, census = _per_path_errors(
        system, payload, deltas, M, T, dt, seed, substeps_per_cell
    )
    _failure_check(errors, census, used)
    rng = np.random.default_rng(seed ^ 0xB007)
    rms = np.empty(len(used))
    lo = np.empty_like(rms)
    hi = np.empty_like(rms)
    for j in range(len(used)):
        col = errors[:, j]
        col = col[np.isfinite(col)]
        rms[j] = float(np.sqrt(np.mean(col ** 2)))
        lo[j], hi[j] = bootstrap_rms_ci(col, n_bootstrap, rng)
    degenerate = bool(np.max(rms) < noise_floor)
    order = order_stderr = intercept = None
    if not degenerate and len(used) >= 3:
        order, intercept, order_stderr = fit_order(list(zip(used, rms)))
    norm = {
        "phase_flow": "sup-in-time phase-space distance",
        "snls": "sup-in-time L2 wave distance",
        "wasserstein.generalized": "sup-in-time L2 density distance",
    }[system]
    return ConvergenceReport(
        deltas=np.asarray(used),
        errors=rms,
        ci_low=lo,
        ci_high=hi,
        order=order,
        order_stderr=order_stderr,
        intercept=intercept,
        degenerate=degenerate,
        norm=norm,
        metadata={
            "system": system,
            "seed": seed,
            "M": M,
            "T": T,
            "dt": dt,
            "config_hash": _payload_hash(system, payload, deltas, M, T, dt, seed),
            "failures": {float(k): v for k, v in census.items()},
        },
    )


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple:
    """95% Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ConfigurationError("need at least one trial")
    p = successes / n
    denom = 1.0 + z ** 2 / n
    center = (p + z ** 2 / (2 * n)) / denom
    half = z / denom * np.sqrt(p * (1 - p) / n + z ** 2 / (4 * n ** 2))
    return max(center - half, 0.0), min(center + half, 1.0)


def probability_convergence_study(
    system: str,
    payload: dict,
    deltas: Sequence[float],
    eps_list: Sequence[float],
    M: int,
    T: float,
    dt: float,
    seed: int = 0,
    substeps_per_cell: int = 8,
) -> dict:
    """Empirical P(sup error > eps) per (delta, eps) with Wilson 95% CIs."""
    if M < 100:
        raise ConfigurationError("probability study needs M >= 100")
    used, errors, census = _per_path_errors(
        system, payload, deltas, M, T, dt, seed, substeps_per_cell
    )
    _failure_check(errors, census, used)
    eps = np.asarray(sorted(eps_list, reverse=True), dtype=float)
    freq = np.empty((len(used), eps.size))
    lo = np.empty_like(freq)
    hi = np.empty_like(freq)
    for j in range(len(used)):
        col = errors[:, j]
        col = col[np.isfinite(col)]
        for i, e in enumerate(eps):
            k = int(np.sum(col > e))
            freq[j, i] = k / col.size
            lo[j, i], hi[j, i] = wilson_interval(k, col.size)
    return {
        "deltas": np.asarray(used),
        "eps": eps,
        "freq": freq,
        "ci_low": lo,
        "ci_high": hi,
        "M": M,
        "failures": census,
    }


# ---------------------------------------------------------------------------
# persistence

def report_to_csv(report: ConvergenceReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("delta,rms_error,ci_low,ci_high\n")
        for d, e, a, b in zip(report.deltas, report.errors, report.ci_low, report.ci_high):
            fh.write(f"{d:.17g},{e:.17g},{a:.17g},{b:.17g}\n")


def report_to_json(report: ConvergenceReport, path) -> None:
    body = {
        "deltas": list(map(float, report.deltas)),
        "errors": list(map(float, report.errors)),
        "ci_low": list(map(float, report.ci_low)),
        "ci_high": list(map(float, report.ci_high)),
        "order": report.order,
        "order_stderr": report.order_stderr,
        "intercept": report.intercept,
        "degenerate": report.degenerate,
        "norm": report.norm,
        "metadata": report.metadata,
    }
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)


def probability_table_to_csv(table: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("delta,eps,freq,ci_low,ci_high\n")
        for j, d in enumerate(table["deltas"]):
            for i, e in enumerate(table["eps"]):
                fh.write(
                    f"{d:.17g},{e:.17g},{table['freq'][j, i]:.17g},"
                    f"{table['ci_low'][j, i]:.17g},{table['ci_high'][j, i]:.17g}\n"
                )


@dataclass
class RunRecord:
    """Reproducibility manifest: rerunning from the stored config and seeds
    must reproduce all numeric outputs bitwise in single-worker mode."""

    config: dict
    seeds: list
    artifacts: list
    wall_clock: float
    version: str = VERSION
    created: float = field(default_factory=time.time)

    def write(self, path) -> None:
        body = {
            "config": self.config,
            "seeds": list(self.seeds),
            "artifacts": [str(a) for a in self.artifacts],
            "wall_clock": self.wall_clock,
            "version": self.version,
            "created": self.created,
        }
        with open(path, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
