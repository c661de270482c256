"""GLM engine: canonical families, IRLS fitting, and Wald inference.

The three canonical families are supported: gaussian/identity,
bernoulli/sigmoid, and poisson/exp.  Fitting uses Fisher scoring (expected
Hessian), for which the weight of observation i is
``1 / (g'(mu_i)^2 V(mu_i))`` and the working response is
``g'(mu_i) (y_i - mu_i)``; for canonical links the score reduces to
``Z^T (y - mu)``, which is also the convergence criterion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DidNotConverge,
    DomainError,
    SingularInformation,
)
from .linalg import as_matrix, as_vector, least_squares

# Clamp applied to means before weight/likelihood evaluation, keeping the
# link derivative and variance function away from their boundary
# singularities.
MEAN_EPS = 1e-10

# Default certification thresholds: a report is null-certified when every
# slope is non-significant at this level and numerically small.
ALPHA = 0.05
COEF_NULL_THRESHOLD = 1e-2


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class GlmFamily:
    """A canonical link/activation triple defining a GLM.

    ``h`` is the inverse link (the activation), ``h_prime`` its derivative,
    ``g_prime`` the derivative of the link ``g = h^{-1}``, ``variance`` the
    variance function V(mu), and ``clip_mean`` maps means into the open
    domain on which weights are defined.
    """

    name: str
    h: Callable[[np.ndarray], np.ndarray]
    h_inv: Callable[[np.ndarray], np.ndarray]
    h_prime: Callable[[np.ndarray], np.ndarray]
    g_prime: Callable[[np.ndarray], np.ndarray]
    variance: Callable[[np.ndarray], np.ndarray]
    clip_mean: Callable[[np.ndarray], np.ndarray]
    check_y: Callable[[np.ndarray], None]
    # derivative of h expressed through the mean (h' = V for canonical
    # links), letting hot loops reuse an already-computed mu
    h_prime_from_mu: Callable[[np.ndarray], np.ndarray] = None  # type: ignore[assignment]

    @property
    def h0(self) -> float:
        """Activation at zero; the constant added by prediction corrections."""
        return float(self.h(np.zeros(1))[0])

    def nll(self, y: np.ndarray, mu: np.ndarray) -> float:
        """Negative log-likelihood up to additive terms free of mu.

        Defined (and convex in the linear predictor) for any real response,
        which lets evaluation models regress corrected predictions that may
        fall outside the family's natural response domain.
        """
        mu = self.clip_mean(mu)
        if self.name == "gaussian":
            return float(0.5 * np.sum((y - mu) ** 2))
        if self.name == "bernoulli":
            return float(-np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))
        return float(np.sum(mu - y * np.log(mu)))

    def deviance(self, y: np.ndarray, mu: np.ndarray) -> float:
        """Scaled deviance; falls back to 2*NLL when the saturated part is
        undefined for out-of-domain responses."""
        mu = self.clip_mean(mu)
        if self.name == "gaussian":
            return float(np.sum((y - mu) ** 2))
        if self.name == "bernoulli":
            if np.any(y < 0.0) or np.any(y > 1.0):
                return 2.0 * self.nll(y, mu)
            yc = np.clip(y, MEAN_EPS, 1.0 - MEAN_EPS)
            dev = y * np.log(yc / mu) + (1.0 - y) * np.log((1.0 - yc) / (1.0 - mu))
            return float(2.0 * np.sum(dev))
        if np.any(y < 0.0):
            return 2.0 * self.nll(y, mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(y > 0.0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
        return float(2.0 * np.sum(term - (y - mu)))


def _check_gaussian(y: np.ndarray) -> None:
    return None


def _check_bernoulli(y: np.ndarray) -> None:
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise DomainError("bernoulli responses must lie in [0, 1]")


def _check_poisson(y: np.ndarray) -> None:
    if np.any(y < 0.0):
        raise DomainError("poisson responses must be non-negative")


GAUSSIAN = GlmFamily(
    name="gaussian",
    h=lambda eta: np.asarray(eta, dtype=np.float64),
    h_inv=lambda mu: np.asarray(mu, dtype=np.float64),
    h_prime=lambda eta: np.ones_like(np.asarray(eta, dtype=np.float64)),
    g_prime=lambda mu: np.ones_like(np.asarray(mu, dtype=np.float64)),
    variance=lambda mu: np.ones_like(np.asarray(mu, dtype=np.float64)),
    clip_mean=lambda mu: np.asarray(mu, dtype=np.float64),
    check_y=_check_gaussian,
    h_prime_from_mu=lambda mu: np.ones_like(np.asarray(mu, dtype=np.float64)),
)

BERNOULLI = GlmFamily(
    name="bernoulli",
    h=_sigmoid,
    h_inv=lambda mu: np.log(mu) - np.log1p(-mu),
    h_prime=lambda eta: _sigmoid(eta) * (1.0 - _sigmoid(eta)),
    g_prime=lambda mu: 1.0 / (mu * (1.0 - mu)),
    variance=lambda mu: mu * (1.0 - mu),
    clip_mean=lambda mu: np.clip(mu, MEAN_EPS, 1.0 - MEAN_EPS),
    check_y=_check_bernoulli,
    h_prime_from_mu=lambda mu: mu * (1.0 - mu),
)

POISSON = GlmFamily(
    name="poisson",
    h=np.exp,
    h_inv=np.log,
    h_prime=np.exp,
    g_prime=lambda mu: 1.0 / mu,
    variance=lambda mu: np.asarray(mu, dtype=np.float64),
    clip_mean=lambda mu: np.clip(mu, MEAN_EPS, None),
    check_y=_check_poisson,
    h_prime_from_mu=lambda mu: np.asarray(mu, dtype=np.float64),
)

FAMILIES = {f.name: f for f in (GAUSSIAN, BERNOULLI, POISSON)}


def family_by_name(name: str) -> GlmFamily:
    try:
        return FAMILIES[name]
    except KeyError:
        raise DomainError(
            f"unknown family {name!r}; expected one of {sorted(FAMILIES)}"
        ) from None


def fisher_weights(family: GlmFamily, mu) -> np.ndarray:
    """Expected-Hessian IRLS weights ``1 / (g'(mu)^2 V(mu))``."""
    m = as_vector(mu, "mean vector")
    if family.name == "bernoulli" and (np.any(m <= 0.0) or np.any(m >= 1.0)):
        raise DomainError("bernoulli means must lie strictly in (0, 1)")
    if family.name == "poisson" and np.any(m <= 0.0):
        raise DomainError("poisson means must be strictly positive")
    gp = family.g_prime(m)
    v = family.variance(m)
    return 1.0 / (gp * gp * v)


def working_response(family: GlmFamily, y, mu) -> np.ndarray:
    """Linearized pseudo-response ``g'(mu) (y - mu)`` used in each IRLS step."""
    yv = as_vector(y, "response")
    m = as_vector(mu, "mean vector")
    if yv.shape != m.shape:
        raise DomainError("response and mean vectors must have equal length")
    if family.name == "bernoulli" and (np.any(m <= 0.0) or np.any(m >= 1.0)):
        raise DomainError("bernoulli means must lie strictly in (0, 1)")
    if family.name == "poisson" and np.any(m <= 0.0):
        raise DomainError("poisson means must be strictly positive")
    return family.g_prime(m) * (yv - m)


@dataclass
class GlmFit:
    """Result of an IRLS fit."""

    coefficients: np.ndarray
    fitted_means: np.ndarray
    iterations: int
    converged: bool
    final_deviance: float
    weight_diag: np.ndarray
    family: GlmFamily
    with_intercept: bool = False


@dataclass
class EvaluationReport:
    """Wald inference summary for an evaluation-model fit.

    ``null_certified`` is True when every reported coefficient is both
    statistically indistinguishable from zero at level ``ALPHA`` and
    numerically below ``COEF_NULL_THRESHOLD`` in magnitude.
    """

    coefficients: np.ndarray
    std_errors: np.ndarray
    z_stats: np.ndarray
    p_values: np.ndarray
    converged: bool
    null_certified: bool
    names: list = field(default_factory=list)


def normal_sf2(z: np.ndarray) -> np.ndarray:
    """Two-sided normal tail probability ``2 (1 - Phi(|z|))`` via erfc."""
    zv = np.atleast_1d(np.asarray(z, dtype=np.float64))
    return np.array([math.erfc(abs(t) / math.sqrt(2.0)) for t in zv])


def fit_glm(
    z,
    y,
    family: GlmFamily,
    max_iter: int = 100,
    tol: float = 1e-8,
    with_intercept: bool = False,
    check_domain: bool = True,
    trace: list | None = None,
) -> GlmFit:
    """Fit a canonical GLM by Fisher-scoring IRLS with step-halving.

    Convergence requires the score ``Z^T (y - mu)`` to have max-norm at most
    ``tol``.  The deviance is non-increasing across accepted steps; if a full
    IRLS step increases it, the step is halved (up to 30 times).  Raises
    ``DidNotConverge`` (carrying the best fit so far) after ``max_iter``.

    ``check_domain=False`` skips the response-domain check, which evaluation
    models need when regressing corrected predictions that can leave the
    family's natural range.
    """
    zm = as_matrix(z, "design matrix")
    yv = as_vector(y, "response")
    if zm.shape[0] != yv.shape[0]:
        raise DomainError(
            f"design has {zm.shape[0]} rows but response has {yv.shape[0]}"
        )
    if check_domain:
        family.check_y(yv)
    if with_intercept:
        zm = np.column_stack([np.ones(zm.shape[0]), zm])

    n, k = zm.shape
    beta = np.zeros(k)
    eta = zm @ beta
    mu = family.clip_mean(family.h(eta))
    nll = family.nll(yv, mu)
    if trace is not None:
        trace.append(family.deviance(yv, mu))

    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        w = fisher_weights(family, mu)
        resp = eta + working_response(family, yv, mu)
        sw = np.sqrt(w)
        beta_new = least_squares(zm * sw[:, None], resp * sw)

        step = beta_new - beta
        accepted = False
        for _ in range(31):
            cand = beta + step
            eta_c = zm @ cand
            mu_c = family.clip_mean(family.h(eta_c))
            nll_c = family.nll(yv, mu_c)
            if np.isfinite(nll_c) and nll_c <= nll + 1e-12 * (abs(nll) + 1.0):
                beta, eta, mu, nll = cand, eta_c, mu_c, nll_c
                accepted = True
                break
            step *= 0.5
        if trace is not None:
            trace.append(family.deviance(yv, mu))
        score = zm.T @ (yv - mu)
        if np.max(np.abs(score)) <= tol:
            converged = True
            break
        if not accepted:
            # No descent direction left at floating-point resolution.
            break

    fit = GlmFit(
        coefficients=beta,
        fitted_means=mu,
        iterations=iterations,
        converged=converged,
        final_deviance=family.deviance(yv, mu),
        weight_diag=fisher_weights(family, mu),
        family=family,
        with_intercept=with_intercept,
    )
    if not converged:
        raise DidNotConverge(
            f"IRLS did not reach score tolerance {tol} in {iterations} iterations",
            iterations=iterations,
            result=fit,
        )
    return fit


def wald_inference(fit: GlmFit, z) -> EvaluationReport:
    """Wald standard errors, z statistics, and two-sided normal p-values.

    Standard errors are the square roots of the diagonal of
    ``(Z^T W Z)^{-1}`` with W the Fisher weights at the fitted means; for the
    gaussian family this is scaled by the residual variance estimate.
    """
    zm = as_matrix(z, "design matrix")
    if fit.with_intercept:
        zm = np.column_stack([np.ones(zm.shape[0]), zm])
    if zm.shape[1] != fit.coefficients.shape[0]:
        raise DomainError("design width does not match coefficient length")
    n, k = zm.shape

    info = zm.T @ (fit.weight_diag[:, None] * zm)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation(str(exc)) from exc
    if not np.all(np.isfinite(cov)):
        raise SingularInformation("information matrix inverse is not finite")

    if fit.family.name == "gaussian":
        # gaussian deviance is the residual sum of squares
        dof = max(n - k, 1)
        sigma2 = fit.final_deviance / dof
        cov = cov * sigma2

    diag = np.diag(cov).copy()
    if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
        raise SingularInformation("non-positive variance estimate")
    se = np.sqrt(diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        zstat = np.where(se > 0, fit.coefficients / se, 0.0)
    pvals = normal_sf2(zstat)
    null_cert = bool(
        fit.converged
        and np.all(pvals > ALPHA)
        and np.all(np.abs(fit.coefficients) < COEF_NULL_THRESHOLD)
    )
    return EvaluationReport(
        coefficients=fit.coefficients.copy(),
        std_errors=se,
        z_stats=zstat,
        p_values=pvals,
        converged=fit.converged,
        null_certified=null_cert,
    )
