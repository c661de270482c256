"""Synthetic data generation and the simulation study harness.

The generator draws prediction features Z with iid standard-normal entries
and builds protected features as ``X = rho * Z[:, :p] + E`` with independent
standard-normal noise E, so the population correlation between paired
columns is ``rho / sqrt(rho^2 + 1)``.  Responses are sampled from the chosen
family at mean ``h(Z gamma)``.

Randomness comes from counter-based Philox streams keyed by a splitmix64
chain over ``(seed, *ids)``; identical seeds reproduce datasets bit for bit,
and every (cell, replicate) pair owns an independent, documented stream.
"""

from __future__ import annotations

import concurrent.futures
import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .correct import (
    MdmmConfig,
    augment_intercept,
    correct_features_linear,
    fit_constrained_glm,
)
from .errors import DidNotConverge, InvalidSpec, OrthokitError
from .evalmodel import evaluate_glm
from .glm import family_by_name, fit_glm

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def stream(seed: int, *ids: int) -> np.random.Generator:
    """Philox generator keyed by a splitmix64 chain over (seed, *ids)."""
    key = int(seed) & _MASK64
    for i in ids:
        key = _splitmix64(key ^ (int(i) & _MASK64))
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SyntheticSpec:
    """One cell of the synthetic design grid."""

    n: int
    p: int
    q: int
    rho: float
    family: str = "bernoulli"
    seed: int = 0
    true_gamma: tuple | None = None

    def validate(self) -> None:
        if self.n < 1:
            raise InvalidSpec(f"n must be >= 1, got {self.n}")
        if not 1 <= self.p <= self.q:
            raise InvalidSpec(f"need 1 <= p <= q, got p={self.p}, q={self.q}")
        if not np.isfinite(self.rho):
            raise InvalidSpec("rho must be finite")
        family_by_name(self.family)
        if self.true_gamma is not None and len(self.true_gamma) != self.q:
            raise InvalidSpec("true_gamma length must equal q")


@dataclass
class SyntheticDataset:
    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    true_gamma: np.ndarray
    spec: SyntheticSpec


# Linear predictors are clipped here before exponentiation when sampling
# poisson responses, to keep extreme draws finite.
POISSON_ETA_CLIP = 10.0


def generate(spec: SyntheticSpec, replicate: int = 0) -> SyntheticDataset:
    """Draw one dataset for the given cell; deterministic in (seed, replicate)."""
    spec.validate()
    family = family_by_name(spec.family)
    rng = stream(spec.seed, replicate)
    z = rng.standard_normal((spec.n, spec.q))
    e = rng.standard_normal((spec.n, spec.p))
    x = spec.rho * z[:, : spec.p] + e
    if spec.true_gamma is not None:
        gamma = np.asarray(spec.true_gamma, dtype=np.float64)
    else:
        # scaled to keep Var(Z gamma) ~ 1 regardless of q
        gamma = rng.standard_normal(spec.q) / np.sqrt(spec.q)
    eta = z @ gamma
    if family.name == "bernoulli":
        y = (rng.random(spec.n) < family.h(eta)).astype(np.float64)
    elif family.name == "poisson":
        rate = np.exp(np.clip(eta, -POISSON_ETA_CLIP, POISSON_ETA_CLIP))
        y = rng.poisson(rate).astype(np.float64)
    else:
        y = eta + rng.standard_normal(spec.n)
    return SyntheticDataset(z=z, x=x, y=y, true_gamma=gamma, spec=spec)


METHODS = ("uncorrected", "cl", "ch")

STUDY_COLUMNS = (
    "family",
    "n",
    "p",
    "q",
    "rho",
    "replicate",
    "method",
    "coefficient_index",
    "estimate",
    "std_error",
    "z_stat",
    "p_value",
    "constraint_residual",
    "loss",
    "converged",
    "error",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


@dataclass
class StudyTable:
    """Long-format simulation results with a fixed column set."""

    rows: list = field(default_factory=list)
    columns: tuple = STUDY_COLUMNS

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_fmt(row.get(c)) for c in self.columns])

    def summarize(self) -> list:
        """Per (cell, method) medians and significance fractions."""
        groups: dict = {}
        for row in self.rows:
            if row.get("error"):
                continue
            key = (
                row["family"], row["n"], row["p"], row["q"], row["rho"],
                row["method"],
            )
            groups.setdefault(key, []).append(row)
        out = []
        for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
            rows = groups[key]
            est = np.array([abs(r["estimate"]) for r in rows])
            pv = np.array([r["p_value"] for r in rows])
            res = [
                r["constraint_residual"]
                for r in rows
                if r.get("constraint_residual") is not None
            ]
            out.append(
                {
                    "family": key[0],
                    "n": key[1],
                    "p": key[2],
                    "q": key[3],
                    "rho": key[4],
                    "method": key[5],
                    "median_abs_estimate": float(np.median(est)),
                    "median_p_value": float(np.median(pv)),
                    "fraction_significant": float(np.mean(pv < 0.05)),
                    "max_constraint_residual": (
                        float(np.max(res)) if res else None
                    ),
                    "rows": len(rows),
                }
            )
        return out


def run_method(
    data: SyntheticDataset,
    method: str,
    mdmm: MdmmConfig | None = None,
):
    """Fit one method on a dataset and evaluate the protected influence.

    Returns ``(report, outcome)`` where ``outcome`` is the constrained-fit
    result for method ``ch`` and None otherwise.  ``DidNotConverge`` from the
    constrained fit is resolved to its best outcome rather than raised.
    """
    family = family_by_name(data.spec.family)
    if method == "uncorrected":
        fit = _tolerant_fit(data.z, data.y, family)
        return evaluate_glm(data.x, fit.fitted_means, family), None
    if method == "cl":
        zc = correct_features_linear(augment_intercept(data.x), data.z)
        fit = _tolerant_fit(zc, data.y, family)
        return evaluate_glm(data.x, fit.fitted_means, family), None
    if method == "ch":
        try:
            out = fit_constrained_glm(
                data.z, data.y, data.x, family, mdmm
            )
        except DidNotConverge as exc:
            if exc.result is None:
                raise
            out = exc.result
        return evaluate_glm(data.x, out.corrected_predictions, family), out
    raise InvalidSpec(f"unknown method {method!r}")


def _tolerant_fit(z, y, family):
    try:
        return fit_glm(z, y, family, with_intercept=True)
    except DidNotConverge as exc:
        if exc.result is None:
            raise
        return exc.result


def _study_cell(args):
    cell_idx, spec, replicate, mdmm = args
    rows = []
    base = {
        "family": spec.family,
        "n": spec.n,
        "p": spec.p,
        "q": spec.q,
        "rho": spec.rho,
        "replicate": replicate,
    }
    try:
        data = generate(spec, replicate)
    except OrthokitError as exc:
        for method in METHODS:
            rows.append(
                dict(
                    base,
                    method=method,
                    coefficient_index=-1,
                    error=f"generate: {exc}",
                )
            )
        return cell_idx, replicate, rows
    for method in METHODS:
        try:
            report, outcome = run_method(data, method, mdmm)
        except OrthokitError as exc:
            rows.append(
                dict(
                    base,
                    method=method,
                    coefficient_index=-1,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
            continue
        for j in range(spec.p):
            rows.append(
                dict(
                    base,
                    method=method,
                    coefficient_index=j,
                    estimate=float(report.coefficients[j]),
                    std_error=float(report.std_errors[j]),
                    z_stat=float(report.z_stats[j]),
                    p_value=float(report.p_values[j]),
                    constraint_residual=(
                        outcome.constraint_residual if outcome else None
                    ),
                    loss=outcome.loss if outcome else None,
                    converged=(
                        outcome.converged if outcome else report.converged
                    ),
                    error=None,
                )
            )
    return cell_idx, replicate, rows


def simulation_study(
    grid: Iterable[SyntheticSpec],
    replicates: int,
    mdmm: MdmmConfig | None = None,
    threads: int | None = None,
) -> StudyTable:
    """Run uncorrected, feature-projection, and constrained fits per cell.

    Each (cell, replicate) draws its own stream, so results do not depend on
    execution order; failures become error-marker rows instead of aborting
    the study.  ``threads`` > 1 runs cells concurrently.
    """
    grid = list(grid)
    if not grid:
        raise InvalidSpec("grid must contain at least one cell")
    if replicates < 1:
        raise InvalidSpec("replicates must be >= 1")
    jobs = [
        (ci, spec, r, mdmm)
        for ci, spec in enumerate(grid)
        for r in range(replicates)
    ]
    results = {}
    if threads and threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            for ci, r, rows in ex.map(_study_cell, jobs):
                results[(ci, r)] = rows
    else:
        for job in jobs:
            ci, r, rows = _study_cell(job)
            results[(ci, r)] = rows
    table = StudyTable()
    for ci in range(len(grid)):
        for r in range(replicates):
            table.rows.extend(results[(ci, r)])
    return table


TRAJECTORY_COLUMNS = ("iteration", "method", "loss", "corr_with_protected")


@dataclass
class TrajectoryTable:
    rows: list = field(default_factory=list)
    columns: tuple = TRAJECTORY_COLUMNS

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_fmt(row.get(c)) for c in self.columns])

    def final(self, method: str) -> dict:
        rows = [r for r in self.rows if r["method"] == method]
        return rows[-1]


def _safe_corr(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = np.std(a), np.std(b)
    if sa <= 0.0 or sb <= 0.0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def figure1_demo(
    seed: int = 0,
    n: int = 400,
    iterations: int = 4000,
    learning_rate: float = 0.1,
    record_every: int = 10,
) -> TrajectoryTable:
    """Two-feature logistic demonstration of the three corrections.

    One protected feature is correlated with the first of two prediction
    features.  All three optimizers start from zero coefficients and use the
    same learning rate, so iteration 0 is identical across methods.  The
    table records, per method and iteration, the loss and the Pearson
    correlation between the activated predictions and the protected feature.
    """
    rng = stream(seed, 0xF1D)
    z = rng.standard_normal((n, 2))
    e = rng.standard_normal(n)
    x1 = 2.0 * z[:, 0] + e
    gamma_true = np.array([1.2, -0.8])
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(z @ gamma_true)))).astype(
        np.float64
    )
    family = family_by_name("bernoulli")
    x = x1[:, None]
    zd = augment_intercept(z)
    zc = augment_intercept(
        correct_features_linear(augment_intercept(x), z)
    )

    table = TrajectoryTable()

    def record(method: str, t: int, mu: np.ndarray) -> None:
        table.rows.append(
            {
                "iteration": t,
                "method": method,
                "loss": family.nll(y, mu) / n,
                "corr_with_protected": _safe_corr(mu, x1),
            }
        )

    def run_gd(design: np.ndarray, method: str) -> None:
        gamma = np.zeros(design.shape[1])
        for t in range(iterations + 1):
            mu = family.h(design @ gamma)
            if t % record_every == 0 or t == iterations:
                record(method, t, mu)
            gamma = gamma - learning_rate * (design.T @ (mu - y)) / n

    run_gd(zd, "uncorrected")
    run_gd(zc, "cl")

    def on_iteration(t: int, gamma: np.ndarray) -> None:
        if t % record_every == 0:
            record("ch", t, family.h(zd @ gamma))

    cfg = MdmmConfig(learning_rate=learning_rate, max_iter=iterations)
    try:
        out = fit_constrained_glm(
            z, y, x, family, cfg, warm_start=False, callback=on_iteration
        )
    except DidNotConverge as exc:
        out = exc.result
    if out is not None:
        record("ch", out.iterations, out.corrected_predictions)
    return table
