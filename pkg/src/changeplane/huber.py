"""Huber loss, its score, and (adaptive) Huber regression.

``tau = np.inf`` is accepted everywhere and means the quadratic loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class RankDeficientError(np.linalg.LinAlgError):
    pass


class CalibrationError(ValueError):
    """The censored equation for tau has no positive root."""


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")


def huber_loss(u, tau):
    """u**2/2 inside [-tau, tau], tau*|u| - tau**2/2 outside."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    if math.isinf(tau):
        out = 0.5 * u * u
    else:
        out = np.where(a <= tau, 0.5 * u * u, tau * a - 0.5 * tau * tau)
    return out[()] if out.ndim == 0 else out


def huber_psi(u, tau):
    """Derivative of the Huber loss: sgn(u) * min(|u|, tau)."""
    _check_tau(tau)
    out = np.clip(np.asarray(u, dtype=float), -tau, tau)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class HuberFit:
    theta: np.ndarray
    tau: float
    iterations: int
    converged: bool
    residuals: np.ndarray

    def objective(self):
        return float(np.sum(huber_loss(self.residuals, self.tau)))


def _check_design(W, y):
    W = np.asarray(W, dtype=float)
    y = np.asarray(y, dtype=float)
    if W.ndim != 2 or y.ndim != 1 or W.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes W{W.shape}, y{y.shape}")
    n, d = W.shape
    if n <= d:
        raise RankDeficientError(f"need n > d, got n={n}, d={d}")
    if np.linalg.matrix_rank(W) < d:
        raise RankDeficientError("design matrix is rank deficient")
    return W, y


def least_squares(W, y, weights=None):
    if weights is None:
        return np.linalg.lstsq(W, y, rcond=None)[0]
    sw = np.sqrt(weights)
    return np.linalg.lstsq(W * sw[:, None], y * sw, rcond=None)[0]


def score_norm(W, y, theta, tau, weights=None):
    """Max-norm of sum_i w_i psi_tau(y_i - W_i'theta) W_i."""
    psi = huber_psi(y - W @ theta, tau)
    if weights is not None:
        psi = psi * weights
    return float(np.max(np.abs(W.T @ psi)))


def huber_fit_fixed_tau(W, y, tau, init=None, tol=1e-8, max_iter=500, weights=None,
                        check=True):
    """Huber regression at fixed ``tau`` by iteratively reweighted least squares.

    Each step solves a weighted normal equation with weights
    ``min(1, tau/|r_i|)``; this is a majorize-minimize scheme, so the Huber
    objective never increases. Convergence is declared once the max-norm of
    the score equation is at most ``tol * n``. Non-convergence is reported
    through the ``converged`` flag.

    ``weights`` are optional per-observation multipliers on the loss.
    """
    _check_tau(tau)
    if check:
        W, y = _check_design(W, y)
    n = W.shape[0]
    sw = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if math.isinf(tau):
        theta = least_squares(W, y, None if weights is None else sw)
        return HuberFit(theta, math.inf, 0, True, y - W @ theta)

    theta = least_squares(W, y, None if weights is None else sw) if init is None \
        else np.asarray(init, dtype=float).copy()
    thresh = tol * n
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = y - W @ theta
        a = np.abs(r)
        if np.max(np.abs(W.T @ (sw * np.clip(r, -tau, tau)))) <= thresh:
            converged = True
            it -= 1
            break
        w = sw * np.where(a > tau, tau / np.maximum(a, 1e-300), 1.0)
        WtW = W.T @ (W * w[:, None])
        theta = np.linalg.solve(WtW, W.T @ (w * y))
    else:
        r = y - W @ theta
        converged = np.max(np.abs(W.T @ (sw * np.clip(r, -tau, tau)))) <= thresh
    return HuberFit(theta, float(tau), it, bool(converged), y - W @ theta)


def censored_equation(residuals, tau, d, z):
    """(tau^2 n)^-1 sum min(r^2, tau^2) - (d + z)/n."""
    r2 = np.asarray(residuals, dtype=float) ** 2
    n = r2.size
    return float(np.sum(np.minimum(r2, tau * tau)) / (tau * tau * n) - (d + z) / n)


def calibrate_tau(residuals, d, z):
    """Solve sum_i min(r_i^2, tau^2) / tau^2 = d + z for tau > 0.

    The left side is nonincreasing in tau and piecewise of the form
    ``S_k / tau^2 + (n - k)`` between consecutive order statistics of
    ``|r|``, so the root is found exactly by scanning the pieces. When the
    number of nonzero residuals equals ``d + z`` the root set is an interval
    and its right end is returned.
    """
    a = np.sort(np.abs(np.asarray(residuals, dtype=float)))
    n = a.size
    c = float(d + z)
    if not np.any(a > 0):
        raise CalibrationError("all residuals are zero")
    nnz = np.count_nonzero(a)
    if nnz < c:
        raise CalibrationError(
            f"censored equation unsolvable: {nnz} nonzero residuals but d+z={c:.4g}"
        )
    if nnz == c:
        # every tau up to the smallest nonzero |r| is a root; take the largest
        return float(a[n - nnz])
    S = np.concatenate([[0.0], np.cumsum(a * a)])   # S[k] = sum of k smallest
    k = np.arange(n + 1)
    denom = c - (n - k)
    lo = np.concatenate([[0.0], a])                  # tau must lie in [lo[k], hi[k]]
    hi = np.concatenate([a, [np.inf]])
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.sqrt(np.where(denom > 0, S / denom, np.nan))
    ok = (denom > 0) & (S > 0) & (tau >= lo) & (tau <= hi)
    if not ok.any():
        raise CalibrationError("no root of the censored equation was bracketed")
    return float(tau[np.argmax(ok)])


def huber_fit_adaptive(W, y, tol=1e-8, max_iter=50, d=None, z=None, init=None,
                       tau0=None, inner_max_iter=500):
    """Jointly estimate coefficients and tau.

    Alternates a fixed-tau Huber fit with the censored equation
    ``sum min(r^2, tau^2)/tau^2 = d + z`` until both hold. Defaults are
    ``d = W.shape[1] - 1`` and ``z = log(n)``; the starting point is least
    squares with ``tau0 = sigma_hat * sqrt(n / (d + z))``.
    """
    W, y = _check_design(W, y)
    n, ncol = W.shape
    d = ncol - 1 if d is None else d
    z = math.log(n) if z is None else z
    theta = least_squares(W, y) if init is None else np.asarray(init, dtype=float)
    if tau0 is None:
        res = y - W @ theta
        sigma = math.sqrt(float(res @ res) / (n - ncol))
        if sigma == 0.0:
            return HuberFit(theta, 1.0, 0, True, res)
        tau = sigma * math.sqrt(n / (d + z))
    else:
        tau = float(tau0)

    converged = False
    fit = None
    for it in range(1, max_iter + 1):
        fit = huber_fit_fixed_tau(W, y, tau, init=theta, tol=tol,
                                  max_iter=inner_max_iter, check=False)
        theta = fit.theta
        if not np.any(fit.residuals != 0):
            # exact interpolation; every tau is a solution
            return HuberFit(theta, tau, it, True, fit.residuals)
        gap = censored_equation(fit.residuals, tau, d, z)
        if fit.converged and abs(gap) <= tol:
            converged = True
            break
        tau = calibrate_tau(fit.residuals, d, z)
    return HuberFit(theta, float(tau), it, converged, fit.residuals)
