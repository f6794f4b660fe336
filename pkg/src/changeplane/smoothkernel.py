"""Smooth surrogates for the indicator 1(t >= 0) and smoothness selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

KINDS = ("sigmoid", "normal_cdf", "normal_mix")
_ALIASES = {"normcdf": "normal_cdf", "normmix": "normal_mix", "logistic": "sigmoid"}
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def canonical_kind(kind):
    kind = _ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class KernelSpec:
    """Smooth function ``K`` applied at scale ``h``: ``K_h(t) = K(t/h)``.

    ``normal_mix`` is ``Phi(u) + u*phi(u)``; it satisfies the symmetry
    ``K(-u) = 1 - K(u)`` but is not confined to [0, 1].
    """

    kind: str = "sigmoid"
    h: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")

    def with_h(self, h):
        return KernelSpec(self.kind, h)


def kernel_values(kind, u):
    """``(K(u), K'(u), K''(u))`` for an array ``u`` (no 1/h factors)."""
    u = np.asarray(u, dtype=float)
    if kind == "sigmoid":
        k = expit(u)
        k1 = k * (1.0 - k)
        k2 = k1 * (1.0 - 2.0 * k)
    elif kind == "normal_cdf":
        k = ndtr(u)
        k1 = _phi(u)
        k2 = -u * k1
    elif kind == "normal_mix":
        ph = _phi(u)
        k = ndtr(u) + u * ph
        k1 = (2.0 - u * u) * ph
        k2 = u * (u * u - 4.0) * ph
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return k, k1, k2


def kernel_eval(spec: KernelSpec, t):
    """K, K', K'' evaluated at ``t/h``. Callers apply the chain-rule 1/h."""
    k, k1, k2 = kernel_values(spec.kind, np.asarray(t, dtype=float) / spec.h)
    if np.ndim(k) == 0:
        return float(k), float(k1), float(k2)
    return k, k1, k2


def indicator_gap(spec: KernelSpec, t):
    t = np.asarray(t, dtype=float)
    k, _, _ = kernel_values(spec.kind, t / spec.h)
    out = np.abs(k - (t >= 0))
    return float(out) if out.ndim == 0 else out


def rule_of_thumb_h(c_h, sigma_u_hat, n):
    """h = c_h * sigma_u * log(n) / sqrt(n)."""
    if not (c_h > 0 and sigma_u_hat > 0):
        raise ValueError("c_h and sigma_u_hat must be positive")
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    return c_h * sigma_u_hat * math.log(n) / math.sqrt(n)


def estimate_sigma_u(U, eta):
    """Root mean square of the boundary values with n - r degrees of freedom."""
    U = np.asarray(U, dtype=float)
    n, r = U.shape
    if n <= r:
        raise ValueError(f"need n > r, got n={n}, r={r}")
    b = U[:, 0] + U[:, 1:] @ np.atleast_1d(np.asarray(eta, dtype=float))
    return math.sqrt(float(b @ b) / (n - r))


def select_h_cv(d, cfg, candidates, tau=None):
    """Pick the smoothness parameter by K-fold cross-validation.

    For every candidate the full change-plane model is refitted on each
    training split, and the held-out Huber loss of the unsmoothed prediction
    ``X'a + Z'b 1(U1 + U2'eta >= 0)`` is accumulated. All candidates are
    scored at one common ``tau`` (by default the adaptive Huber fit of ``y``
    on ``[X, Z]``), so losses are comparable. Ties go to the smaller ``h``.
    """
    from .changeplane_fit import fit_alternating, indicator_residuals
    from .core import derive_stream
    from scipy.linalg import orth

    from .huber import huber_fit_adaptive, huber_loss

    cand = np.atleast_1d(np.asarray(candidates, dtype=float))
    if cand.size == 0 or np.any(cand <= 0):
        raise ValueError("candidates must be nonempty and positive")
    if cand.size == 1:
        return float(cand[0])
    folds = cfg.cv_folds
    if d.n < folds:
        raise ValueError(f"n={d.n} is smaller than the number of folds {folds}")
    if tau is None:
        if cfg.tau_policy == "infinite":
            tau = math.inf
        else:
            # an orthonormal basis keeps the fit defined when Z repeats X
            tau = huber_fit_adaptive(orth(np.hstack([d.X, d.Z])), d.y).tau
    perm = derive_stream(cfg.seed, 0xC5).generator().permutation(d.n)
    fold_of = np.empty(d.n, dtype=int)
    fold_of[perm] = np.arange(d.n) % folds

    order = np.argsort(cand, kind="stable")
    losses = np.empty(cand.size)
    for j in order:
        sub_cfg = cfg.replace(h_policy="fixed", h=float(cand[j]))
        total = 0.0
        for f in range(folds):
            train = d.subset(fold_of != f)
            test = d.subset(fold_of == f)
            fit = fit_alternating(train, sub_cfg)
            total += float(np.sum(huber_loss(indicator_residuals(test, fit.params), tau)))
        losses[j] = total
    best = min(order, key=lambda j: (losses[j], cand[j]))
    return float(cand[best])
