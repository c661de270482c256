"""Correction routines.

Four ways to remove the linear influence of protected features:

* ``correct_features_linear`` / ``correct_features_relu`` replace the
  prediction features by their projection onto the orthogonal complement of
  the protected span.
* ``correct_predictions_glm`` projects already-computed predictions and
  re-centers them at the activation's value at zero.
* ``fit_constrained_glm`` refits a GLM subject to the corrected predictions
  being empirically uncorrelated with every (centered) protected column,
  solved by simultaneous gradient descent in the coefficients and gradient
  ascent in a single Lagrange multiplier with a quadratic damping penalty.
* ``correct_tensor_prediction`` / ``correct_tensor_preactivation`` apply the
  complement projector along the observation mode of tensor-valued outputs
  (for pre-activations: before the ReLU is applied).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DidNotConverge, DimensionMismatch, DomainError
from .glm import GlmFamily, fit_glm
from .linalg import (
    apply_complement,
    as_matrix,
    as_vector,
    build_projector,
    center_columns,
    mode1_product,
)


# stability-cap curvature proxy refresh interval (iterations)
JJ_REFRESH = 25


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_dot_terms(a, b) -> tuple[float, float, float, float]:
    """The four rectified dot products of a pair of vectors.

    Returns ``(h(a).h(b), h(-a).h(b), h(a).h(-b), h(-a).h(-b))`` with
    ``h = relu``.  Since ``x = h(x) - h(-x)``, the raw inner product equals
    the alternating sum ``t0 - t1 - t2 + t3``.
    """
    av = as_vector(a)
    bv = as_vector(b)
    return (
        float(relu(av) @ relu(bv)),
        float(relu(-av) @ relu(bv)),
        float(relu(av) @ relu(-bv)),
        float(relu(-av) @ relu(-bv)),
    )


def augment_intercept(x) -> np.ndarray:
    """Prepend a column of ones (so projections also remove the mean)."""
    xm = as_matrix(x)
    return np.column_stack([np.ones(xm.shape[0]), xm])


def correct_features_linear(x, z) -> np.ndarray:
    """Project every feature column onto the complement of the protected span."""
    proj = build_projector(x)
    return apply_complement(proj, z)


def correct_features_relu(x, z) -> np.ndarray:
    """Feature correction used with ReLU prediction/evaluation models.

    Numerically identical to ``correct_features_linear``; kept as a separate
    entry point because its downstream contract (behaviour of rectified
    cross-terms in an L2 evaluation) differs from the linear one.
    """
    return correct_features_linear(x, z)


def correct_predictions_glm(x, y_hat, family: GlmFamily) -> np.ndarray:
    """Project predictions onto the complement of span([1, X]) and re-center.

    The intercept column is included in the projection so that the corrected
    predictions have mean exactly ``h(0)``; an evaluation GLM with intercept
    then has a zero score at zero slopes.  The output is returned unclipped
    and may leave the family's natural response range (e.g. probabilities
    outside (0, 1)); evaluation models accept such values.
    """
    yv = as_vector(y_hat, "predictions")
    proj = build_projector(augment_intercept(x))
    if yv.shape[0] != proj.n:
        raise DimensionMismatch("predictions length does not match protected rows")
    return proj.complement(yv[:, None])[:, 0] + family.h0


def constraint_value(gamma, z, x_centered, family: GlmFamily) -> float:
    """Squared norm of the covariances-without-1/n: ``||Xc^T h(Z gamma)||^2``.

    ``x_centered`` must be column-centered.  Zero exactly when the activated
    predictions are orthogonal to every centered protected column.  The
    normalized residual reported by ``fit_constrained_glm`` equals this value
    divided by n^2.
    """
    zm = as_matrix(z, "design matrix")
    xc = as_matrix(x_centered, "centered protected features")
    g = as_vector(gamma, "coefficients")
    mu = family.h(zm @ g)
    v = xc.T @ mu
    return float(v @ v)


@dataclass(frozen=True)
class MdmmConfig:
    """Hyperparameters of the constrained-GLM optimizer.

    ``learning_rate`` drives both the coefficient descent and the multiplier
    ascent (each step is additionally capped by a local curvature estimate of
    the penalty term); ``damping`` scales the quadratic constraint penalty.
    When the multiplier ascent stalls while infeasible, the multiplier is
    scaled by ``lambda_growth`` (checked every ``stall_check`` iterations).
    Divergence halves the learning rate and resumes from the best iterate
    recorded so far, with the total backoff budget tied to ``max_restarts``.
    """

    learning_rate: float = 1e-2
    damping: float = 1.0
    max_iter: int = 50_000
    constraint_tol: float = 1e-6
    lambda_init: float = 0.0
    cosine_decay: bool = False
    loss_window: int = 100
    loss_rtol: float = 1e-9
    stall_check: int = 250
    lambda_growth: float = 10.0
    max_restarts: int = 5
    divergence_limit: float = 1e8
    feasible_budget: int = 1500


@dataclass
class CorrectionOutcome:
    """Result of a constrained GLM fit.

    ``constraint_residual`` is the squared norm of the empirical covariances
    between centered protected columns and the corrected predictions, i.e.
    ``||Xc^T h(Z gamma) / n||^2`` (equal to ``constraint_value(...) / n^2``).
    ``loss`` is the family negative log-likelihood (total, not per-row).
    """

    gamma_c: np.ndarray
    corrected_predictions: np.ndarray
    constraint_residual: float
    loss: float
    lambda_final: float
    iterations: int
    converged: bool
    stationarity: float = float("nan")
    restarts: int = 0
    with_intercept: bool = True


def _warm_start(zd: np.ndarray, y: np.ndarray, family: GlmFamily) -> np.ndarray:
    try:
        fit = fit_glm(zd, y, family)
        return fit.coefficients
    except DidNotConverge as exc:
        # Near-separated designs: the best iterate is still a usable start.
        if exc.result is not None:
            return exc.result.coefficients
        return np.zeros(zd.shape[1])


def fit_constrained_glm(
    z,
    y,
    x,
    family: GlmFamily,
    cfg: MdmmConfig | None = None,
    with_intercept: bool = True,
    warm_start: bool = True,
    callback=None,
) -> CorrectionOutcome:
    """Fit a GLM whose activated predictions are uncorrelated with protected
    features.

    Minimizes the per-observation negative log-likelihood subject to
    ``||Xc^T h(Z gamma) / n||^2 = 0`` (Xc column-centered, so the intercept
    stays unconstrained).  Updates, with step ``nu``, multiplier ``lam`` and
    damping ``zeta``::

        gamma <- gamma - nu * [grad_nll + (lam + zeta*A) * grad_A]
        lam   <- lam + nu * A

    Starts from the unconstrained fit (``warm_start=False`` starts from zero
    coefficients).  Convergence requires the residual to be at or below
    ``cfg.constraint_tol`` and the loss to be flat (relative change below
    ``cfg.loss_rtol`` across ``cfg.loss_window`` iterations) or a bounded
    post-feasibility budget to be spent.  Raises ``DidNotConverge`` carrying
    the best outcome found so far.  ``callback(t, gamma)`` is invoked once
    per iteration with the pre-update coefficients.
    """
    cfg = cfg or MdmmConfig()
    zm = as_matrix(z, "design matrix")
    yv = as_vector(y, "response")
    xm = as_matrix(x, "protected features")
    n = zm.shape[0]
    if yv.shape[0] != n or xm.shape[0] != n:
        raise DimensionMismatch("Z, y, and X must share the row count")
    family.check_y(yv)

    zd = np.column_stack([np.ones(n), zm]) if with_intercept else zm
    xc = center_columns(xm)
    sd_x = xc.std(axis=0)
    if np.any(sd_x <= 0.0):
        raise DomainError("protected features must not be constant columns")

    gamma0 = _warm_start(zd, yv, family) if warm_start else np.zeros(zd.shape[1])
    # A saturated warm start (near-separated logistic fits) has vanishing
    # activation derivatives, which kills the constraint gradient; start
    # from zero coefficients instead, which is exactly feasible for
    # centered constraints.
    with np.errstate(over="ignore"):
        hp0 = family.h_prime(zd @ gamma0)
    if family.name == "bernoulli" and float(np.mean(hp0)) < 1e-3:
        gamma0 = np.zeros(zd.shape[1])
    lam0 = float(cfg.lambda_init)
    nu0 = float(cfg.learning_rate)
    zeta = float(cfg.damping)
    tol = float(cfg.constraint_tol)

    # Precondition the constraint: scale each centered protected column by
    # 1 / (sd(x_j) * sd(mu at warm start)), making the optimizer's constraint
    # a sum of squared correlation-scale quantities.  The feasible set is
    # unchanged; convergence and the reported residual use the unscaled
    # covariances.
    with np.errstate(over="ignore", invalid="ignore"):
        mu_warm = family.h(zd @ gamma0)
    sd_mu = float(np.std(mu_warm)) if np.all(np.isfinite(mu_warm)) else 1.0
    if not np.isfinite(sd_mu) or sd_mu <= 1e-12:
        sd_mu = 1.0
    col_scale = 1.0 / (sd_x * sd_mu)
    xcs = xc * col_scale
    # contiguous transposes keep the two per-iteration gemv calls fast
    zdt = np.ascontiguousarray(zd.T)
    xcst = np.ascontiguousarray(xcs.T)

    def state(g: np.ndarray):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            eta = zd @ g
            mu = family.h(eta)
            c_s = xcst @ mu / n
            a_opt = float(c_s @ c_s)
            c_raw = c_s / col_scale
            a_raw = float(c_raw @ c_raw)
            loss = family.nll(yv, mu) / n
        return eta, mu, c_s, a_opt, a_raw, loss

    def grads(mu: np.ndarray, c_s: np.ndarray):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            mu_c = family.clip_mean(mu)
            grad_l = zdt @ (mu_c - yv) / n
            grad_a = 2.0 * (zdt @ (family.h_prime_from_mu(mu) * (xcs @ c_s))) / n
        return grad_l, grad_a

    best: CorrectionOutcome | None = None

    def record(g, a_raw, loss, lam, it, converged, restarts, stat):
        nonlocal best
        out = CorrectionOutcome(
            gamma_c=g.copy(),
            corrected_predictions=family.h(zd @ g),
            constraint_residual=a_raw,
            loss=loss * n,
            lambda_final=lam,
            iterations=it,
            converged=converged,
            stationarity=stat,
            restarts=restarts,
            with_intercept=with_intercept,
        )
        if best is None:
            best = out
        else:
            b_feas, o_feas = best.constraint_residual <= tol, a_raw <= tol
            if (o_feas and not b_feas) or (
                o_feas == b_feas
                and (
                    (o_feas and out.loss < best.loss)
                    or (not o_feas and a_raw < best.constraint_residual)
                )
            ):
                best = out
        return out

    nu = nu0
    gamma = gamma0.copy()
    lam = lam0

    max_backoffs = 4 * max(cfg.max_restarts, 1)

    def stat_at(mu, c_s, lam):
        grad_l, grad_a = grads(mu, c_s)
        return float(np.max(np.abs(grad_l + lam * grad_a)))

    loss_hist: deque = deque(maxlen=cfg.loss_window + 1)
    check_a = None
    backoffs = 0
    converged = False
    feasible_since = 0
    total_iter = 0
    # curvature proxy ||grad A||^2 / (4 A) for the stability cap; refreshed
    # periodically and whenever the multiplier or step changes
    jj = 0.0
    jj_age = JJ_REFRESH
    while total_iter < cfg.max_iter:
        total_iter += 1
        eta, mu, c_s, a_opt, a_raw, loss = state(gamma)
        if callback is not None:
            callback(total_iter - 1, gamma)
        if not np.isfinite(loss) or not np.isfinite(a_opt) or max(
            abs(loss), a_opt
        ) > cfg.divergence_limit:
            # Diverged: halve the step and resume from the best iterate seen
            # (fall back to the warm start before anything was recorded).
            backoffs += 1
            if backoffs > max_backoffs:
                break
            nu *= 0.5
            if best is not None:
                gamma = best.gamma_c.copy()
                lam = min(lam, best.lambda_final)
            else:
                gamma = gamma0.copy()
                lam = lam0
            loss_hist.clear()
            check_a = None
            feasible_since = 0
            jj_age = JJ_REFRESH
            continue
        loss_hist.append(loss)
        if a_raw <= tol:
            if feasible_since == 0:
                feasible_since = total_iter
        else:
            feasible_since = 0
        plateau = (
            len(loss_hist) > cfg.loss_window
            and abs(loss_hist[-1] - loss_hist[0])
            <= cfg.loss_rtol * (abs(loss_hist[-1]) + 1e-12)
        )
        budget_spent = (
            feasible_since > 0
            and total_iter - feasible_since >= cfg.feasible_budget
        )
        if a_raw <= tol and (plateau or budget_spent):
            record(
                gamma, a_raw, loss, lam, total_iter, True, backoffs,
                stat_at(mu, c_s, lam),
            )
            converged = True
            break

        mult = lam + zeta * a_opt
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            w_a = (2.0 / n) * family.h_prime_from_mu(mu) * (xcs @ c_s)
            if jj_age >= JJ_REFRESH and a_opt > 0.0:
                grad_a = zdt @ w_a
                jj = float(grad_a @ grad_a) / (4.0 * a_opt)
                jj_age = 0
            jj_age += 1
            # combined step direction grad_l + mult * grad_a in a single gemv
            force = zdt @ ((family.clip_mean(mu) - yv) / n + mult * w_a)

        # Per-iteration stability cap: the penalty/multiplier force has local
        # curvature roughly 2 (lam + zeta A) * ||grad A||^2 / (4 A); keep the
        # step below the edge of that quadratic.  The configured rate is an
        # upper bound, used whenever the constraint term is gentle.
        nu_t = nu
        if cfg.cosine_decay:
            nu_t = nu * 0.5 * (1.0 + np.cos(np.pi * total_iter / cfg.max_iter))
        if a_opt > 0.0:
            nu_t = min(nu_t, 0.5 / (2.0 * mult * jj + 1.0))
        gamma = gamma - nu_t * force
        lam = lam + nu_t * a_opt

        if total_iter % cfg.stall_check == 0 and a_raw > tol:
            record(
                gamma, a_raw, loss, lam, total_iter, False, backoffs,
                stat_at(mu, c_s, lam),
            )
            if check_a is not None and a_raw > 2.0 * check_a:
                # Oscillating: back off the step size, keep the multiplier.
                nu *= 0.5
            elif check_a is not None and a_raw > 0.25 * check_a:
                # Ascent too slow to reach tolerance: boost the multiplier.
                lam = max(lam * cfg.lambda_growth, 1e-2)
            check_a = a_raw
            jj_age = JJ_REFRESH

    eta, mu, c_s, a_opt, a_raw, loss = state(gamma)
    if np.all(np.isfinite(gamma)) and np.isfinite(a_raw) and np.isfinite(loss):
        record(
            gamma, a_raw, loss, lam, total_iter, converged, backoffs,
            stat_at(mu, c_s, lam),
        )
    out = best
    if out is None or not (out.constraint_residual <= tol):
        raise DidNotConverge(
            "constraint residual "
            f"{float('nan') if out is None else out.constraint_residual:.3e} "
            f"above tolerance {tol:.1e} after {total_iter} iterations",
            iterations=total_iter,
            result=out,
        )
    return out


def correct_tensor_prediction(x, y_hat_tensor) -> np.ndarray:
    """Project a tensor-valued prediction along its observation mode."""
    proj = build_projector(x)
    return mode1_product(proj, y_hat_tensor)


def correct_tensor_preactivation(x, pre_activation_tensor) -> np.ndarray:
    """Project a tensor-valued pre-activation along its observation mode.

    Numerically the same operation as ``correct_tensor_prediction``; the
    distinct name marks that it is meant to run before a ReLU is applied.
    """
    proj = build_projector(x)
    return mode1_product(proj, pre_activation_tensor)
