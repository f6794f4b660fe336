"""Smoothed Huber estimation of the change-plane model.

The indicator ``1(U1 + U2'eta >= 0)`` is replaced by ``K((U1 + U2'eta)/h)``
and the sum of Huber losses is minimized by alternating between
``(alpha, beta)`` (a Huber regression on a smoothed design, optionally with
adaptive tau) and ``eta`` (quasi-Newton with multi-start).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ChangePlaneParams,
    DimensionError,
    FitConfig,
    IdentifiabilityError,
    RngStream,
    classify,
    derive_stream,
    parallel_map,
    stream_key,
    validate_dataset,
)
from .huber import (
    huber_fit_adaptive,
    huber_fit_fixed_tau,
    huber_loss,
    huber_psi,
    least_squares,
)
from .smoothkernel import (
    KernelSpec,
    estimate_sigma_u,
    kernel_values,
    rule_of_thumb_h,
    select_h_cv,
)


@dataclass(frozen=True)
class SmoothedFitResult:
    params: ChangePlaneParams
    tau: float
    h: float
    loss_trace: np.ndarray
    converged: bool
    subgroup_labels: np.ndarray
    iterations: int = 0
    kernel: str = "sigmoid"


@dataclass(frozen=True)
class BootstrapCI:
    lower: np.ndarray
    upper: np.ndarray
    level: float
    B: int
    dropped: int = 0
    replicates: np.ndarray = field(default=None, repr=False)


# -- loss and gradient --------------------------------------------------------

def _parts(d, zeta, spec):
    zeta.check_against(d)
    b = d.U[:, 0] + d.U[:, 1:] @ zeta.eta
    k, k1, _ = kernel_values(spec.kind, b / spec.h)
    zb = d.Z @ zeta.beta
    r = d.y - d.X @ zeta.alpha - zb * k
    return r, k, k1, zb


def smoothed_loss(d, zeta: ChangePlaneParams, tau, spec: KernelSpec, weights=None):
    """sum_i w_i L_tau(y_i - X_i'alpha - Z_i'beta K_h(U1_i + U2_i'eta))."""
    r, _, _, _ = _parts(d, zeta, spec)
    loss = huber_loss(r, tau)
    if weights is not None:
        loss = loss * weights
    return float(np.sum(loss))


def smoothed_loss_grad(d, zeta: ChangePlaneParams, tau, spec: KernelSpec, weights=None):
    """Gradient of :func:`smoothed_loss` with respect to (alpha, beta, eta)."""
    r, k, k1, zb = _parts(d, zeta, spec)
    psi = huber_psi(r, tau)
    if weights is not None:
        psi = psi * weights
    g_alpha = -d.X.T @ psi
    g_beta = -d.Z.T @ (psi * k)
    g_eta = -d.U[:, 1:].T @ (psi * zb * k1) / spec.h
    return np.concatenate([g_alpha, g_beta, g_eta])


def indicator_residuals(d, params: ChangePlaneParams):
    lab = classify(params.eta, d.U)
    return d.y - d.X @ params.alpha - (d.Z @ params.beta) * lab


# -- metrics ------------------------------------------------------------------

def l2_error(est: ChangePlaneParams, truth: ChangePlaneParams):
    """Euclidean distance between the (alpha, beta) blocks."""
    if est.alpha.shape != truth.alpha.shape or est.beta.shape != truth.beta.shape:
        raise DimensionError("estimate and truth have different dimensions")
    return float(np.linalg.norm(est.theta - truth.theta))


def accuracy(labels_hat, labels_true):
    a = np.asarray(labels_hat)
    b = np.asarray(labels_true)
    if a.shape != b.shape:
        raise DimensionError(f"label arrays differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean(a == b))


# -- theta step ---------------------------------------------------------------

def smoothed_design(d, eta, spec):
    b = d.U[:, 0] + d.U[:, 1:] @ np.asarray(eta, dtype=float)
    k, _, _ = kernel_values(spec.kind, b / spec.h)
    return np.hstack([d.X, d.Z * k[:, None]])


def fit_theta_step(d, eta, tau_policy, spec, tau=None, init=None, tau0=None,
                   weights=None, tol=1e-8):
    """Minimize the smoothed loss over (alpha, beta) with eta held fixed.

    ``tau_policy`` is ``"adaptive"`` (tau recalibrated jointly),
    ``"fixed"`` (uses ``tau``) or ``"infinite"`` (least squares).
    Returns ``(alpha, beta, tau)``.
    """
    W = smoothed_design(d, eta, spec)
    p = d.p
    if tau_policy == "infinite":
        theta = least_squares(W, d.y, weights)
        if np.linalg.matrix_rank(W) < W.shape[1]:
            from .huber import RankDeficientError
            raise RankDeficientError("smoothed design is rank deficient")
        t = math.inf
    elif tau_policy == "fixed":
        fit = huber_fit_fixed_tau(W, d.y, tau, init=init, tol=tol, weights=weights)
        theta, t = fit.theta, fit.tau
    elif tau_policy == "adaptive":
        if weights is not None:
            raise ValueError("adaptive tau does not support observation weights")
        fit = huber_fit_adaptive(W, d.y, tol=tol, init=init, tau0=tau0,
                                 d=W.shape[1] - 1, z=math.log(d.n))
        theta, t = fit.theta, fit.tau
    else:
        raise ValueError(f"unknown tau policy {tau_policy!r}")
    return theta[:p], theta[p:], t


# -- eta step -----------------------------------------------------------------

def _bfgs(fg, x0, gtol=1e-8, max_iter=100):
    """Minimal BFGS with Armijo backtracking. Returns (x, f, converged)."""
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    m = x.size
    Hinv = np.eye(m)
    first = True
    for _ in range(max_iter):
        gmax = np.max(np.abs(g)) if m else 0.0
        if gmax <= gtol:
            return x, f, True
        p = -Hinv @ g
        slope = g @ p
        if slope >= 0:
            Hinv = np.eye(m)
            p = -g
            slope = -(g @ g)
            first = True
        if first:
            scale = min(1.0, 1.0 / np.linalg.norm(p))
            p = p * scale
            slope = slope * scale
        t = 1.0
        while True:
            xn = x + t * p
            fn, gn = fg(xn)
            if fn <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-10:
                return x, f, False
        s = xn - x
        yv = gn - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if first:
                Hinv = np.eye(m) * (sy / (yv @ yv))
                first = False
            rho = 1.0 / sy
            V = np.eye(m) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        stalled = f - fn <= 1e-14 * max(1.0, abs(f))
        x, f, g = xn, fn, gn
        if stalled:
            return x, f, np.max(np.abs(g)) <= gtol
    return x, f, bool(np.max(np.abs(g)) <= gtol)


def _feasible(b, min_group):
    if min_group <= 0:
        return True
    frac = np.count_nonzero(b >= 0) / b.size
    return min_group <= frac <= 1.0 - min_group


def _eta_objective(d, alpha, beta, tau, spec, weights, min_group=0.0):
    """Smoothed loss and gradient in eta; planes leaving less than
    ``min_group`` of the sample on one side get an infinite loss."""
    a = d.y - d.X @ alpha
    zb = d.Z @ beta
    u1 = d.U[:, 0]
    U2 = d.U[:, 1:]
    h = spec.h
    kind = spec.kind
    w = weights

    def fg(eta):
        b = u1 + U2 @ eta
        if not _feasible(b, min_group):
            return math.inf, np.zeros_like(eta)
        k, k1, _ = kernel_values(kind, b / h)
        r = a - zb * k
        loss = huber_loss(r, tau)
        psi = huber_psi(r, tau)
        if w is not None:
            loss = loss * w
            psi = psi * w
        return float(np.sum(loss)), -(U2.T @ (psi * zb * k1)) / h

    return fg


def random_etas(U, count, rng):
    """Random boundary orientations, each coordinate scaled to its column.

    A Gaussian direction ``g`` in R^r is divided componentwise by the root
    mean square of the columns of ``U``; the leading coefficient is made
    positive and the result normalized to ``eta = g[1:] / g[0]``.
    """
    if count <= 0:
        return np.empty((0, U.shape[1] - 1))
    scale = np.sqrt(np.mean(U * U, axis=0))
    scale[scale == 0] = 1.0
    g = rng.standard_normal((count, U.shape[1])) / scale
    g0 = np.maximum(np.abs(g[:, :1]), 1e-12)
    return g[:, 1:] / g0


def fit_eta_step(d, alpha, beta, tau, spec, init_eta, n_starts=20, stream=None,
                 weights=None, gtol=1e-8, refine=5, min_group=0.0):
    """Minimize the smoothed loss over eta with (alpha, beta, tau) fixed.

    BFGS with backtracking runs from ``init_eta`` and from the ``refine`` best
    of ``n_starts`` random starting points; the lowest objective wins, and
    ``init_eta`` is kept whenever nothing improves on it. Planes with less
    than ``min_group`` of the sample on either side are excluded.
    """
    beta = np.asarray(beta, dtype=float)
    if not np.any(beta != 0):
        raise IdentifiabilityError("beta = 0: eta is not identified")
    fg = _eta_objective(d, np.asarray(alpha, dtype=float), beta, tau, spec, weights, min_group)
    init_eta = np.atleast_1d(np.asarray(init_eta, dtype=float))
    best_x, best_f = init_eta, fg(init_eta)[0]

    starts = [init_eta]
    if n_starts > 0:
        stream = stream if stream is not None else derive_stream(0, 0)
        cand = random_etas(d.U, n_starts, stream.generator())
        vals = np.array([fg(c)[0] for c in cand])
        for j in np.argsort(vals, kind="stable")[:refine]:
            starts.append(cand[j])
    for x0 in starts:
        if not math.isfinite(fg(x0)[0]):
            continue
        x, f, _ = _bfgs(fg, x0, gtol=gtol)
        if f < best_f:
            best_x, best_f = x, f
    return best_x


# -- pilot --------------------------------------------------------------------

def _profile_search(d, spec, n_cand, stream, weights=None, min_group=0.0):
    """Best eta among random candidates under the profiled quadratic loss."""
    cands = np.vstack([np.zeros((1, d.r - 1)), random_etas(d.U, n_cand, stream.generator())])
    feasible = [e for e in cands if _feasible(d.U[:, 0] + d.U[:, 1:] @ e, min_group)]
    if feasible:
        cands = feasible
    best, best_val = cands[0], np.inf
    for eta in cands:
        W = smoothed_design(d, eta, spec)
        theta = least_squares(W, d.y, weights)
        res = d.y - W @ theta
        val = float(res @ res) if weights is None else float(weights @ (res * res))
        if val < best_val:
            best, best_val = eta, val
    return best


def _alternate(d, spec, eta, tau_policy, cfg, stream, tau=None, theta=None,
               weights=None, n_starts=None):
    """Alternate theta and eta steps; returns (params, tau, trace, converged, iters)."""
    n_starts = cfg.n_starts if n_starts is None else n_starts
    p = d.p
    eta = np.asarray(eta, dtype=float)
    trace = []
    converged = False
    prev_loss, prev_tau = None, tau
    alpha = beta = None
    it = 0
    for it in range(1, cfg.max_outer_iter + 1):
        alpha, beta, tau = fit_theta_step(
            d, eta, tau_policy, spec, tau=tau,
            init=theta, tau0=tau if tau_policy == "adaptive" else None,
            weights=weights,
        )
        theta = np.concatenate([alpha, beta])
        if not np.any(beta != 0):
            trace.append(smoothed_loss(d, ChangePlaneParams(alpha, beta, eta), tau, spec, weights))
            converged = True
            break
        eta = fit_eta_step(d, alpha, beta, tau, spec, eta, n_starts=n_starts,
                           stream=stream.child("eta", it), weights=weights,
                           min_group=cfg.min_group)
        loss = smoothed_loss(d, ChangePlaneParams(alpha, beta, eta), tau, spec, weights)
        trace.append(loss)
        if prev_loss is not None:
            dl = abs(prev_loss - loss) <= cfg.tol * max(1.0, abs(loss))
            dt = tau_policy != "adaptive" or abs(tau - prev_tau) <= cfg.tol * tau
            if dl and dt:
                converged = True
                break
        prev_loss, prev_tau = loss, tau
    return ChangePlaneParams(alpha[:p], beta, eta), tau, np.array(trace), converged, it


def _resolve_h(d, cfg, eta):
    if cfg.h_policy == "fixed":
        return cfg.h
    sigma = estimate_sigma_u(d.U, eta)
    if sigma == 0:
        raise ValueError("boundary values are all zero; cannot set h by rule of thumb")
    return rule_of_thumb_h(cfg.c_h, sigma, d.n)


def fit_alternating(d, cfg: FitConfig = FitConfig(), weights=None) -> SmoothedFitResult:
    """Fit (alpha, beta, eta) by the alternating smoothed-Huber scheme.

    1. Quadratic-loss pilot: random search for eta under the profiled least
       squares loss, then alternating least-squares/eta steps.
    2. ``h`` from the configured policy (the rule of thumb uses the pilot eta).
    3. Robust alternation from the pilot, with tau recalibrated in every
       theta step and frozen during the following eta step.

    If the fitted beta is (numerically) zero the classifier is meaningless;
    run a subgroup test before trusting the labels.
    """
    validate_dataset(d)
    if d.p + d.q >= d.n:
        raise DimensionError("need p + q < n")
    stream = derive_stream(cfg.seed, stream_key("fit"))
    kind = cfg.kernel

    # pilot at a provisional h
    h0 = cfg.h if cfg.h_policy == "fixed" else _resolve_h(d, cfg, np.zeros(d.r - 1))
    eta0 = _profile_search(d, KernelSpec(kind, h0), 10 * max(cfg.n_starts, 1),
                           stream.child("profile"), weights, cfg.min_group)
    pilot = _alternate(d, KernelSpec(kind, h0), eta0, "infinite", cfg,
                       stream.child("pilot0"), weights=weights)[0]
    if cfg.h_policy == "rule_of_thumb":
        h = _resolve_h(d, cfg, pilot.eta)
    elif cfg.h_policy == "cross_validation":
        cands = cfg.cv_candidates
        if cands is None:
            base = _resolve_h(d, cfg, pilot.eta)
            cands = tuple(base * f for f in (0.25, 0.5, 1.0, 2.0, 4.0))
        h = select_h_cv(d, cfg.replace(h_policy="fixed", h=cands[0]), cands)
    else:
        h = h0
    spec = KernelSpec(kind, h)
    if h != h0:
        pilot = _alternate(d, spec, pilot.eta, "infinite", cfg, stream.child("pilot1"),
                           weights=weights)[0]

    if cfg.tau_policy == "infinite":
        params, tau, trace, conv, it = _alternate(d, spec, pilot.eta, "infinite", cfg,
                                                  stream.child("ols"), weights=weights)
    else:
        res = indicator_residuals(d, pilot)
        dof = max(d.n - d.p - d.q - d.r, 1)
        sigma_eps = math.sqrt(float(res @ res) / dof)
        if cfg.tau_policy == "fixed":
            tau0 = cfg.tau
        else:
            tau0 = sigma_eps * math.sqrt(d.n / (d.p + d.q - 1 + math.log(d.n)))
            if tau0 == 0:
                tau0 = 1.0
        params, tau, trace, conv, it = _alternate(
            d, spec, pilot.eta, cfg.tau_policy, cfg, stream.child("robust"),
            tau=tau0, theta=pilot.theta, weights=weights,
        )
    return SmoothedFitResult(
        params=params, tau=float(tau), h=float(h), loss_trace=trace, converged=bool(conv),
        subgroup_labels=classify(params.eta, d.U), iterations=it, kernel=kind,
    )


# -- bootstrap confidence intervals ---------------------------------------------

def refit_weighted(d, cfg, point: SmoothedFitResult, weights, n_starts=0):
    """Refit with observation weights, warm-started at ``point``.

    tau and h are held at the point-estimate values.
    """
    spec = KernelSpec(point.kernel, point.h)
    policy = "infinite" if math.isinf(point.tau) else "fixed"
    params, _, _, conv, _ = _alternate(
        d, spec, point.params.eta, policy, cfg, derive_stream(cfg.seed, stream_key("refit")),
        tau=point.tau, theta=point.params.theta, weights=weights, n_starts=n_starts,
    )
    return params, conv


def _ci_replicate(d, cfg, point, b, multipliers):
    if multipliers is None:
        w = derive_stream(cfg.seed, stream_key("bootci", b)).generator().exponential(1.0, d.n)
    else:
        w = np.asarray(multipliers(b), dtype=float) if callable(multipliers) \
            else np.asarray(multipliers, dtype=float)
    params, conv = refit_weighted(d, cfg, point, w)
    return params.zeta, conv


def bootstrap_ci(d, cfg: FitConfig, B=200, level=0.95, threads=1, point=None,
                 multipliers=None, max_drop=0.1) -> BootstrapCI:
    """Percentile intervals from a multiplier bootstrap of the smoothed loss.

    Each replicate reweights the loss summands by i.i.d. Exp(1) multipliers
    (mean 1, variance 1) and refits from the point estimate. Replicates that
    fail to converge are dropped; more than ``max_drop`` of them is an error.
    ``multipliers`` overrides the draws (an array, or a callable of the
    replicate index).
    """
    if B < 100:
        raise ValueError(f"B must be at least 100, got {B}")
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    point = fit_alternating(d, cfg) if point is None else point
    out = parallel_map(functools.partial(_ci_replicate, d, cfg, point, multipliers=multipliers),
                       range(B), threads)
    reps = np.array([z for z, _ in out])
    ok = np.array([c for _, c in out])
    dropped = int(np.count_nonzero(~ok))
    if dropped > max_drop * B:
        raise RuntimeError(f"{dropped} of {B} bootstrap replicates failed to converge")
    kept = reps[ok]
    a = (1.0 - level) / 2.0
    lower = np.quantile(kept, a, axis=0)
    upper = np.quantile(kept, 1.0 - a, axis=0)
    return BootstrapCI(lower, upper, float(level), int(B), dropped, reps)
