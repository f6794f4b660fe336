"""Simulation laboratory: data generation and Monte Carlo experiment runners."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.stats import norm

from .core import (
    ChangePlaneParams,
    Dataset,
    RngStream,
    classify,
    derive_stream,
    parallel_map,
    stream_key,
)

ERROR_DISTS = (
    "gaussian", "t2", "pareto21", "weibull",
    "gauss_mix", "t2_weibull_mix", "pareto_gauss_mix", "lognormal_gauss_mix",
)

GAUSS_SD = math.sqrt(2.0)
PARETO_MEAN = 2.0                                   # Par(shape 2, scale 1)
WEIBULL_SHAPE = WEIBULL_SCALE = 0.75
WEIBULL_MEAN = WEIBULL_SCALE * float(gamma_fn(1.0 + 1.0 / WEIBULL_SHAPE))
LOGNORMAL_MEAN = math.exp(0.5)
GAUSS_MIX_SDS = (1.0, 3.0)                          # scale-contaminated normal


def _draw(dist, n, rng):
    if dist == "gaussian":
        return rng.normal(0.0, GAUSS_SD, n)
    if dist == "t2":
        return rng.standard_t(2, n)
    if dist == "pareto21":
        # numpy's pareto is Lomax; +1 gives classical Pareto with x_m = 1
        return rng.pareto(2.0, n) + 1.0 - PARETO_MEAN
    if dist == "weibull":
        return WEIBULL_SCALE * rng.weibull(WEIBULL_SHAPE, n) - WEIBULL_MEAN
    if dist == "lognormal":
        return np.exp(rng.standard_normal(n)) - LOGNORMAL_MEAN
    if dist == "gauss_mix":
        sd = np.where(rng.random(n) < 0.5, *GAUSS_MIX_SDS)
        return sd * rng.standard_normal(n)
    pairs = {
        "t2_weibull_mix": ("t2", "weibull"),
        "pareto_gauss_mix": ("pareto21", "gaussian"),
        "lognormal_gauss_mix": ("lognormal", "gaussian"),
    }
    if dist in pairs:
        a, b = pairs[dist]
        pick = rng.random(n) < 0.5
        return np.where(pick, _draw(a, n, rng), _draw(b, n, rng))
    raise ValueError(f"unknown error distribution {dist!r}; expected one of {ERROR_DISTS}")


def gen_errors(dist, n, stream: RngStream):
    """Mean-zero i.i.d. errors.

    Families with nonzero theoretical mean are shifted by it (Pareto(2,1):
    2; Weibull(0.75, 0.75): 0.75*Gamma(7/3); lognormal: e^(1/2)). Mixtures
    pick each component with probability 1/2.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if dist not in ERROR_DISTS:
        raise ValueError(f"unknown error distribution {dist!r}; expected one of {ERROR_DISTS}")
    return _draw(dist, n, stream.generator())


@dataclass(frozen=True)
class DgpConfig:
    n: int = 200
    p: int = 3
    q: int = 3
    r: int = 3
    alpha_star: tuple | None = None
    beta_star: tuple | None = None
    gamma_minus1: tuple | None = None
    error_dist: str = "pareto21"
    design_scale: float = math.sqrt(2.0)
    z_equals_x: bool = True
    beta_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha_star is None:
            object.__setattr__(self, "alpha_star", (5.0,) + (0.5,) * (self.p - 1))
        if self.beta_star is None:
            object.__setattr__(self, "beta_star", (0.5,) * self.q)
        if self.gamma_minus1 is None:
            object.__setattr__(self, "gamma_minus1", (1.0,) + (2.0,) * (self.r - 2))
        object.__setattr__(self, "alpha_star", tuple(float(v) for v in self.alpha_star))
        object.__setattr__(self, "beta_star", tuple(float(v) for v in self.beta_star))
        object.__setattr__(self, "gamma_minus1", tuple(float(v) for v in self.gamma_minus1))
        if min(self.p, self.q) < 1 or self.r < 2:
            raise ValueError("need p, q >= 1 and r >= 2")
        if len(self.alpha_star) != self.p or len(self.beta_star) != self.q:
            raise ValueError("alpha_star/beta_star lengths must equal p/q")
        if len(self.gamma_minus1) != self.r - 1:
            raise ValueError("gamma_minus1 must have length r - 1")
        if self.z_equals_x and self.p != self.q:
            raise ValueError("z_equals_x requires p == q")
        if not self.design_scale > 0:
            raise ValueError("design_scale must be positive")
        if not self.beta_scale >= 0:
            raise ValueError("beta_scale must be nonnegative")
        if self.error_dist not in ERROR_DISTS:
            raise ValueError(f"unknown error distribution {self.error_dist!r}")
        if self.n < max(self.p + self.q, self.r) + 1:
            raise ValueError("n too small for the requested dimensions")

    def replace(self, **kw):
        import dataclasses
        return dataclasses.replace(self, **kw)


def gamma1_gaussian(gamma_minus1, design_scale, split=0.35):
    """Leading coefficient putting a fraction ``split`` below the plane.

    ``design_scale`` is the variance of each Gaussian grouping variable.
    """
    sd = math.sqrt(design_scale) * float(np.linalg.norm(gamma_minus1))
    return -float(norm.ppf(split)) * sd


def gamma1_empirical(gamma_minus1, draw_u2, size=100_000, split=0.35, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    u2 = draw_u2(size, rng)
    return -float(np.quantile(u2 @ np.asarray(gamma_minus1), split))


def gen_dataset(cfg: DgpConfig, noiseless=False):
    """Draw ``(Dataset, truth, labels_true)`` from the simulation design.

    X1 = U1 = 1; the remaining X, Z and U columns are N(0, design_scale * I);
    gamma_1 is the Gaussian quantile that splits the population 65/35.
    """
    g = derive_stream(cfg.seed, stream_key("design")).generator()
    n, p, q, r = cfg.n, cfg.p, cfg.q, cfg.r
    sd = math.sqrt(cfg.design_scale)
    X = np.hstack([np.ones((n, 1)), sd * g.standard_normal((n, p - 1))])
    if cfg.z_equals_x:
        Z = X.copy()
    else:
        Z = np.hstack([np.ones((n, 1)), sd * g.standard_normal((n, q - 1))])
    U = np.hstack([np.ones((n, 1)), sd * g.standard_normal((n, r - 1))])
    gm1 = np.array(cfg.gamma_minus1)
    g1 = gamma1_gaussian(gm1, cfg.design_scale)
    eta = gm1 / g1
    alpha = np.array(cfg.alpha_star)
    beta = cfg.beta_scale * np.array(cfg.beta_star)
    labels = classify(eta, U)
    y = X @ alpha + (Z @ beta) * labels
    if not noiseless:
        y = y + gen_errors(cfg.error_dist, n, derive_stream(cfg.seed, stream_key("errors")))
    return Dataset(y, X, Z, U), ChangePlaneParams(alpha, beta, eta), labels


# -- experiment runners -------------------------------------------------------

EST_METHODS = ("AHu", "Hub", "OLS")
TEST_METHODS = ("rwast", "wast", "sst")
HUB_TAU0 = 1.345
REPORT_COLUMNS = ("method", "n", "error_dist", "beta_scale", "metric_name", "median", "iqr",
                  "mean", "mc_se", "replications", "failures")
RAW_COLUMNS = ("method", "n", "error_dist", "beta_scale", "rep", "metric_name", "value")


@dataclass(frozen=True)
class ReportRow:
    method: str
    n: int
    error_dist: str
    beta_scale: float
    metric_name: str
    median: float
    iqr: float
    mean: float
    mc_se: float
    replications: int
    failures: int = 0


@dataclass
class ExperimentReport:
    """Summary rows plus the raw per-replicate values behind them."""

    rows: list = field(default_factory=list)
    raw: list = field(default_factory=list)

    def row(self, method, n, error_dist, metric_name, beta_scale=None):
        for r in self.rows:
            if (r.method, r.n, r.error_dist, r.metric_name) == (method, n, error_dist, metric_name) \
                    and (beta_scale is None or r.beta_scale == beta_scale):
                return r
        raise KeyError((method, n, error_dist, metric_name, beta_scale))

    def to_csv(self, path):
        _write_csv(path, REPORT_COLUMNS, [[getattr(r, c) for c in REPORT_COLUMNS] for r in self.rows])

    def raw_to_csv(self, path):
        _write_csv(path, RAW_COLUMNS, self.raw)


def fmt_number(v):
    """17 significant digits, enough to round-trip any double."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt_number(v) for v in row) + "\n")


def summarize(values, method, n, error_dist, beta_scale, metric_name, failures=0):
    """One report row; mc_se is sd / sqrt(replications)."""
    v = np.asarray(values, dtype=float)
    if v.size < 1:
        raise ValueError("need at least one replication")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return ReportRow(method, int(n), error_dist, float(beta_scale), metric_name,
                     float(med), float(q3 - q1),
                     float(np.mean(v)), sd / math.sqrt(v.size), int(v.size), int(failures))


def hub_tau(y):
    """1.345 times the normalized median absolute deviation of ``y``."""
    y = np.asarray(y, dtype=float)
    mad = float(np.median(np.abs(y - np.median(y))))
    return HUB_TAU0 * mad / float(norm.ppf(0.75))


def _grid_values(grid, key, default):
    v = grid.get(key, default)
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _method_cfg(method, fit_cfg, y):
    if method == "AHu":
        return fit_cfg.replace(tau_policy="adaptive")
    if method == "Hub":
        return fit_cfg.replace(tau_policy="fixed", tau=hub_tau(y))
    if method == "OLS":
        return fit_cfg.replace(tau_policy="infinite")
    raise ValueError(f"unknown estimation method {method!r}; expected one of {EST_METHODS}")


def _h_for(n, fit_cfg, h_rule):
    if h_rule == "sqrt_log":
        return fit_cfg.replace(h_policy="fixed", h=math.sqrt(math.log(n) / n))
    return fit_cfg


def _estimation_task(task):
    from .changeplane_fit import accuracy, fit_alternating, l2_error

    dgp, fit_cfg, methods, h_rule, rep = task
    d, truth, labels = gen_dataset(dgp)
    cfg0 = _h_for(dgp.n, fit_cfg.replace(seed=dgp.seed), h_rule)
    out = {}
    for m in methods:
        try:
            fit = fit_alternating(d, _method_cfg(m, cfg0, d.y))
            out[m] = (l2_error(fit.params, truth), accuracy(fit.subgroup_labels, labels))
        except (ValueError, np.linalg.LinAlgError):
            out[m] = None
    return out


def run_estimation_experiment(grid, reps, base_seed=0, dgp=None, fit_cfg=None,
                              h_rule="default", threads=1):
    """Monte Carlo L2 error and subgroup accuracy of the estimation methods.

    ``grid`` maps ``n``, ``dist`` and ``method`` to lists. Every replicate
    draws one dataset, shared by all methods. ``h_rule="sqrt_log"`` fixes
    ``h = sqrt(log n / n)``; otherwise ``fit_cfg`` decides. Failed fits are
    counted per cell and left out of the summaries.
    """
    from .core import FitConfig

    if reps < 1:
        raise ValueError("reps must be at least 1")
    dgp = DgpConfig() if dgp is None else dgp
    fit_cfg = FitConfig() if fit_cfg is None else fit_cfg
    methods = _grid_values(grid, "method", EST_METHODS)
    for m in methods:
        if m not in EST_METHODS:
            raise ValueError(f"unknown estimation method {m!r}; expected one of {EST_METHODS}")
    ns = _grid_values(grid, "n", [dgp.n])
    dists = _grid_values(grid, "dist", [dgp.error_dist])

    tasks, keys = [], []
    for n in ns:
        for dist in dists:
            for rep in range(reps):
                seed = stream_key(base_seed, "estimation", n, dist, rep)
                tasks.append((dgp.replace(n=n, error_dist=dist, seed=seed), fit_cfg, methods,
                              h_rule, rep))
                keys.append((n, dist, rep))
    results = parallel_map(_estimation_task, tasks, threads)

    report = ExperimentReport()
    for n in ns:
        for dist in dists:
            cell = [res for (kn, kd, _), res in zip(keys, results) if (kn, kd) == (n, dist)]
            for m in methods:
                ok = [(rep, c[m]) for rep, c in enumerate(cell) if c[m] is not None]
                fails = len(cell) - len(ok)
                for j, metric in enumerate(("l2_error", "accuracy")):
                    vals = [v[j] for _, v in ok]
                    for rep, v in ok:
                        report.raw.append([m, n, dist, dgp.beta_scale, rep, metric, float(v[j])])
                    if vals:
                        report.rows.append(summarize(vals, m, n, dist, dgp.beta_scale, metric,
                                                     fails))
    return report


def _test_task(task):
    from .subgroup_test import bootstrap_pvalue

    dgp, methods, B, M, level, rep = task
    d, _, _ = gen_dataset(dgp)
    out = {}
    for m in methods:
        try:
            res = bootstrap_pvalue(d, m, B, derive_stream(dgp.seed, stream_key("bootstrap", m)),
                                   M=M)
            out[m] = res.p_value
        except (ValueError, np.linalg.LinAlgError):
            out[m] = None
    return out


def run_test_experiment(grid, reps, B, base_seed=0, dgp=None, M=1000, level=0.05,
                        threads=1):
    """Rejection rates of the subgroup tests over a grid of signal scales.

    ``grid`` maps ``n``, ``dist``, ``method`` and ``beta_scale`` to lists.
    Rows with ``beta_scale = 0`` are type-I error rates, the rest are power;
    the raw table holds the p-values.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    dgp = DgpConfig() if dgp is None else dgp
    methods = _grid_values(grid, "method", TEST_METHODS)
    for m in methods:
        if m not in TEST_METHODS:
            raise ValueError(f"unknown test method {m!r}; expected one of {TEST_METHODS}")
    ns = _grid_values(grid, "n", [dgp.n])
    dists = _grid_values(grid, "dist", [dgp.error_dist])
    scales = _grid_values(grid, "beta_scale", [0.0])

    tasks, keys = [], []
    for n in ns:
        for dist in dists:
            for c in scales:
                for rep in range(reps):
                    seed = stream_key(base_seed, "testing", n, dist, float(c), rep)
                    tasks.append((dgp.replace(n=n, error_dist=dist, beta_scale=float(c),
                                              seed=seed), methods, B, M, level, rep))
                    keys.append((n, dist, float(c)))
    results = parallel_map(_test_task, tasks, threads)

    report = ExperimentReport()
    for n in ns:
        for dist in dists:
            for c in scales:
                cell = [res for k, res in zip(keys, results) if k == (n, dist, float(c))]
                for m in methods:
                    pv = [(rep, r[m]) for rep, r in enumerate(cell) if r[m] is not None]
                    for rep, p in pv:
                        report.raw.append([m, n, dist, float(c), rep, "p_value", float(p)])
                    if pv:
                        rej = [float(p <= level) for _, p in pv]
                        report.rows.append(summarize(rej, m, n, dist, float(c),
                                                     "rejection_rate", len(cell) - len(pv)))
    return report


PLOT_COLUMNS = ("method", "error_dist", "n", "beta_scale", "metric", "value", "lower", "upper")


def plot_rows(report: ExperimentReport):
    """Long-format table for plotting.

    Estimation metrics give the median with the quartiles as the band;
    rejection rates give the rate with a +-2 mc_se band clipped to [0, 1].
    """
    out = []
    for r in report.rows:
        if r.metric_name == "rejection_rate":
            lo, hi = max(0.0, r.mean - 2 * r.mc_se), min(1.0, r.mean + 2 * r.mc_se)
            out.append([r.method, r.error_dist, r.n, r.beta_scale, r.metric_name, r.mean, lo, hi])
            continue
        vals = [row[6] for row in report.raw
                if (row[0], row[1], row[2], row[3], row[5])
                == (r.method, r.n, r.error_dist, r.beta_scale, r.metric_name)]
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out.append([r.method, r.error_dist, r.n, r.beta_scale, r.metric_name,
                    float(med), float(q1), float(q3)])
    return out


def write_plot_csv(report: ExperimentReport, path):
    _write_csv(path, PLOT_COLUMNS, plot_rows(report))
