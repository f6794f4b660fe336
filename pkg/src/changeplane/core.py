"""Shared data model for change-plane regression.

The model is

    y = X'alpha + Z'beta * 1(U'gamma >= 0) + eps,

and internally the boundary is always written as ``U1 + U2'eta >= 0`` with an
implicit unit coefficient on the first grouping column.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Array blocks disagree in shape."""


class NonFiniteError(ValueError):
    """A data block holds NaN or inf."""


class IdentifiabilityError(ValueError):
    """A parameter cannot be identified from the supplied values."""


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a 2-d array, got ndim={a.ndim}")
    return a


@dataclass(frozen=True)
class Dataset:
    """Response ``y`` with baseline ``X``, difference ``Z`` and grouping ``U`` blocks.

    Column 0 of ``U`` is the grouping variable with the implicit unit
    coefficient; columns 1.. multiply ``eta``.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    U: np.ndarray

    @classmethod
    def from_arrays(cls, y, X, Z, U, validate=True):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1:
            y = y.ravel()
        d = cls(y, _as_matrix(X, "X"), _as_matrix(Z, "Z"), _as_matrix(U, "U"))
        if validate:
            validate_dataset(d)
        return d

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Z.shape[1]

    @property
    def r(self):
        return self.U.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.X[idx], self.Z[idx], self.U[idx])


def validate_dataset(d: Dataset) -> None:
    """Raise if any of the Dataset invariants fail; return None otherwise."""
    y = np.asarray(d.y)
    if y.ndim != 1:
        raise DimensionError(f"y must be 1-d, got shape {y.shape}")
    n = y.shape[0]
    for name in ("X", "Z", "U"):
        block = np.asarray(getattr(d, name))
        if block.ndim != 2:
            raise DimensionError(f"{name} must be 2-d, got shape {block.shape}")
        if block.shape[0] != n:
            raise DimensionError(
                f"{name} has {block.shape[0]} rows but y has {n}"
            )
    p, q, r = d.X.shape[1], d.Z.shape[1], d.U.shape[1]
    if n < max(p + q, r) + 1:
        raise DimensionError(
            f"n={n} is too small for p+q={p + q}, r={r}; need n >= {max(p + q, r) + 1}"
        )
    for name in ("y", "X", "Z", "U"):
        block = np.asarray(getattr(d, name))
        bad = ~np.isfinite(block)
        if bad.any():
            loc = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NonFiniteError(f"non-finite value in {name} at index {loc}")


@dataclass(frozen=True)
class ChangePlaneParams:
    alpha: np.ndarray
    beta: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "eta"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if v.ndim != 1:
                raise DimensionError(f"{name} must be 1-d")
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"{name} has non-finite entries")
            object.__setattr__(self, name, v)

    @property
    def theta(self):
        return np.concatenate([self.alpha, self.beta])

    @property
    def zeta(self):
        return np.concatenate([self.alpha, self.beta, self.eta])

    @classmethod
    def from_zeta(cls, zeta, p, q):
        zeta = np.asarray(zeta, dtype=float)
        return cls(zeta[:p], zeta[p:p + q], zeta[p + q:])

    def check_against(self, d: Dataset):
        if (self.alpha.size, self.beta.size, self.eta.size) != (d.p, d.q, d.r - 1):
            raise DimensionError(
                f"parameter sizes {(self.alpha.size, self.beta.size, self.eta.size)} "
                f"do not match dataset (p, q, r-1) = {(d.p, d.q, d.r - 1)}"
            )


@dataclass(frozen=True)
class GammaVector:
    gamma: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if not np.any(g != 0):
            raise IdentifiabilityError("gamma must be nonzero")
        object.__setattr__(self, "gamma", g)


def gamma_to_eta(g):
    """Map an unnormalized grouping vector to ``(eta, flip)``.

    ``eta = gamma[1:] / gamma[0]``. When ``flip`` is True the leading
    coefficient was negative, so ``1(U'gamma >= 0)`` corresponds to
    ``U1 + U2'eta <= 0`` rather than ``>= 0``.
    """
    gamma = g.gamma if isinstance(g, GammaVector) else np.asarray(g, dtype=float)
    if gamma[0] == 0:
        raise IdentifiabilityError("leading coefficient gamma[0] is zero")
    return gamma[1:] / gamma[0], bool(gamma[0] < 0)


def boundary_values(eta, U):
    U = _as_matrix(U, "U")
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if eta.size != U.shape[1] - 1:
        raise DimensionError(f"eta has length {eta.size}, expected r-1={U.shape[1] - 1}")
    return U[:, 0] + U[:, 1:] @ eta


def classify(eta, U):
    """Subgroup labels ``1(U1 + U2'eta >= 0)``; ties at zero go to group 1."""
    return (boundary_values(eta, U) >= 0).astype(np.int8)


# -- random streams ---------------------------------------------------------

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """A reproducible, counter-based random stream keyed by (seed, stream_id).

    Draws come from a Philox generator whose key is derived from both
    integers, so the sequence depends on nothing but the pair.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = int(getattr(self, name))
            if not 0 <= v <= _U64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v}")
            object.__setattr__(self, name, v)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of the stream."""
        ss = np.random.SeedSequence([self.seed, self.stream_id])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "RngStream":
        """Derive an independent sub-stream, e.g. one per replicate."""
        return RngStream(self.seed, stream_key(self.stream_id, *keys))


def derive_stream(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id)


def stream_key(*parts) -> int:
    """Hash a tuple of ints/strings/floats into a u64 stream identifier."""
    parts = tuple(p.item() if isinstance(p, np.generic) else p for p in parts)
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def resolve_threads(threads=1):
    """Worker count; the CHANGEPLANE_THREADS environment variable wins when set."""
    env = os.environ.get("CHANGEPLANE_THREADS")
    t = int(env) if env else int(threads)
    if t < 1:
        raise ValueError(f"thread count must be positive, got {t}")
    return t


def _pinned(fn, item):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return fn(item)


def parallel_map(fn, items, threads=1):
    """``[fn(x) for x in items]``, optionally over joblib workers.

    BLAS is limited to one thread inside every call, so floating-point
    results do not depend on the number of workers.
    """
    threads = resolve_threads(threads)
    items = list(items)
    if threads == 1:
        return [_pinned(fn, x) for x in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=threads)(delayed(_pinned)(fn, x) for x in items)


# -- configuration ------------------------------------------------------------

H_POLICIES = ("rule_of_thumb", "fixed", "cross_validation")
TAU_POLICIES = ("adaptive", "fixed", "infinite")


@dataclass(frozen=True)
class FitConfig:
    """Tuning knobs for the smoothed Huber change-plane fit.

    ``h_policy``: ``rule_of_thumb`` (uses ``c_h``), ``fixed`` (uses ``h``) or
    ``cross_validation`` (uses ``cv_folds`` and optional ``cv_candidates``).
    ``tau_policy``: ``adaptive``, ``fixed`` (uses ``tau``) or ``infinite``
    (least squares). ``min_group`` is the smallest fraction of the sample
    allowed on either side of the fitted plane.
    """

    kernel: str = "sigmoid"
    h_policy: str = "rule_of_thumb"
    c_h: float = 1.0
    h: float | None = None
    cv_folds: int = 5
    cv_candidates: tuple | None = None
    tau_policy: str = "adaptive"
    tau: float | None = None
    max_outer_iter: int = 50
    tol: float = 1e-6
    seed: int = 0
    n_starts: int = 20
    min_group: float = 0.05

    def __post_init__(self):
        from .smoothkernel import canonical_kind

        object.__setattr__(self, "kernel", canonical_kind(self.kernel))
        if self.h_policy not in H_POLICIES:
            raise ValueError(f"h_policy must be one of {H_POLICIES}, got {self.h_policy!r}")
        if self.tau_policy not in TAU_POLICIES:
            raise ValueError(f"tau_policy must be one of {TAU_POLICIES}, got {self.tau_policy!r}")
        if self.h_policy == "fixed" and not (self.h is not None and self.h > 0):
            raise ValueError("fixed h policy needs h > 0")
        if self.h_policy == "rule_of_thumb" and not self.c_h > 0:
            raise ValueError("c_h must be positive")
        if self.h_policy == "cross_validation" and self.cv_folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        if self.tau_policy == "fixed" and not (self.tau is not None and self.tau > 0):
            raise ValueError("fixed tau policy needs tau > 0")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer_iter < 1:
            raise ValueError("max_outer_iter must be at least 1")
        if self.n_starts < 0:
            raise ValueError("n_starts must be nonnegative")
        if not 0 <= self.min_group < 0.5:
            raise ValueError("min_group must lie in [0, 0.5)")
        if self.cv_candidates is not None:
            object.__setattr__(self, "cv_candidates", tuple(float(c) for c in self.cv_candidates))
        RngStream(self.seed)  # range check

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)
