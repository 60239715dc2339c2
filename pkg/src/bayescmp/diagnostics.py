"""Posterior diagnostics: KL divergences, quantile/coverage calibration,
covariance eigenstructure checks, prior-consistency and cross-method scoring.

All diagnostics are pure functions of their inputs; with fixed seeds the
reports are reproducible bitwise. Density handles follow a small duck-typed
protocol: ``log_pdf(x)`` everywhere, plus ``sample(n, rng)`` for Monte Carlo
estimates and ``ppf(q)`` for quadrature ranges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .errors import InputError
from .mdn import MoGPosterior

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class KlResult:
    value: float
    se: float
    diverged: bool


def kl_divergence(p, q, mode: str = "quadrature", n: int = 10000,
                  rng: np.random.Generator | None = None) -> KlResult:
    """Kullback-Leibler divergence D(p || q).

    Quadrature mode (1-D only) integrates p log(p/q) on a grid spanning p's
    central mass and needs ``p.ppf``; Monte Carlo mode averages the log ratio
    over samples from p and reports a standard error. Regions where q
    vanishes while p does not make the divergence infinite (flagged).
    """
    if mode == "quadrature":
        lo, hi = float(p.ppf(1e-7)), float(p.ppf(1.0 - 1e-7))
        grid = np.linspace(lo, hi, n)
        logp = np.asarray(p.log_pdf(grid), dtype=float)
        logq = np.asarray(q.log_pdf(grid), dtype=float)
        pd = np.exp(logp)
        bad = (pd > 1e-300) & ~np.isfinite(logq)
        if np.any(bad):
            return KlResult(np.inf, 0.0, True)
        integrand = np.where(pd > 0, pd * (logp - logq), 0.0)
        return KlResult(float(np.trapezoid(integrand, grid)), 0.0, False)
    if mode == "monte_carlo":
        if rng is None:
            raise InputError("monte_carlo mode needs an rng")
        xs = p.sample(n, rng)
        vals = np.asarray(p.log_pdf(xs), dtype=float) - np.asarray(q.log_pdf(xs), dtype=float)
        if not np.all(np.isfinite(vals)):
            return KlResult(np.inf, 0.0, True)
        return KlResult(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n)), False)
    raise InputError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class NormalizedKl:
    value: float
    defined: bool
    numerator: float
    denominator: float


def normalized_kl(exact, estimate, prior, mode: str = "quadrature", n: int = 10000,
                  rng: np.random.Generator | None = None) -> NormalizedKl:
    """D(exact || estimate) / D(exact || prior); undefined when the
    denominator is below 1e-8 (posterior equals prior)."""
    num = kl_divergence(exact, estimate, mode, n, rng).value
    den = kl_divergence(exact, prior, mode, n, rng).value
    if not np.isfinite(den) or den < 1e-8:
        return NormalizedKl(np.nan, False, num, den)
    return NormalizedKl(num / den, True, num, den)


class Marginal1D:
    """One-dimensional Gaussian mixture with CDF/quantile machinery.

    Quantiles are found by bisection to 1e-8 on a bracket of +-10 total
    standard deviations around the mixture mean.
    """

    def __init__(self, weights, mus, sigmas):
        self.weights = np.asarray(weights, dtype=float)
        self.mus = np.asarray(mus, dtype=float)
        self.sigmas = np.asarray(sigmas, dtype=float)

    @classmethod
    def from_mog(cls, q: MoGPosterior, j: int = 0) -> "Marginal1D":
        return cls(*q.marginal_params(j))

    def mean(self) -> float:
        return float(self.weights @ self.mus)

    def std(self) -> float:
        m = self.mean()
        return float(np.sqrt(self.weights @ (self.sigmas**2 + self.mus**2) - m**2))

    def cdf(self, x) -> float | np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.mus) / self.sigmas
        out = (ndtr(z) * self.weights).sum(axis=-1)
        return float(out) if out.ndim == 0 else out

    def log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.mus) / self.sigmas
        comp = -0.5 * z**2 - np.log(self.sigmas) - 0.5 * np.log(2.0 * np.pi) + np.log(self.weights)
        m = comp.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(comp - m).sum(axis=-1, keepdims=True))).squeeze(-1)

    def ppf(self, q: float, tol: float = 1e-8) -> float:
        m, s = self.mean(), max(self.std(), 1e-300)
        lo, hi = m - 10.0 * s, m + 10.0 * s
        # widen if the bracket misses the quantile (heavy mixture tails)
        while self.cdf(lo) > q and lo > m - 1e6 * s:
            lo -= 10.0 * s
        while self.cdf(hi) < q and hi < m + 1e6 * s:
            hi += 10.0 * s
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < q:
                lo = mid
            else:
                hi = mid
            if hi - lo < tol * max(1.0, abs(m)):
                break
        return 0.5 * (lo + hi)

    def central_interval(self, gamma: float) -> tuple[float, float]:
        if gamma <= 0.0:
            m = self.ppf(0.5)
            return m, m
        if gamma >= 1.0:
            return -np.inf, np.inf
        return self.ppf(0.5 * (1.0 - gamma)), self.ppf(0.5 * (1.0 + gamma))


@dataclass(frozen=True)
class QuantileCheck:
    quantiles: np.ndarray
    ks_stat: float
    ks_critical_1pct: float
    passed: bool


def quantile_check(cdfs, true_params) -> QuantileCheck:
    """Quantiles of the true parameters under their predicted posterior CDFs.

    For a well-calibrated posterior the quantiles are uniform; the report
    carries the KS statistic against the uniform and the asymptotic 1%
    critical value 1.628/sqrt(n).
    """
    true_params = np.asarray(true_params, dtype=float)
    qs = np.array([float(cdf(t)) for cdf, t in zip(cdfs, true_params)])
    ks = float(stats.kstest(qs, "uniform").statistic)
    crit = 1.628 / np.sqrt(qs.size)
    return QuantileCheck(qs, ks, float(crit), ks < crit)


def credible_coverage(marginals, true_params, levels) -> np.ndarray:
    """Fraction of true parameters inside the central interval per level."""
    true_params = np.asarray(true_params, dtype=float)
    levels = np.asarray(levels, dtype=float)
    cover = np.zeros(levels.size)
    for m, t in zip(marginals, true_params):
        for i, g in enumerate(levels):
            lo, hi = m.central_interval(float(g))
            cover[i] += float(lo <= t <= hi)
    return cover / true_params.size


@dataclass(frozen=True)
class EigenCheck:
    angle_deg: float
    angle_defined: bool
    proj_mean_exact: np.ndarray
    proj_mean_est: np.ndarray
    proj_var_exact: np.ndarray
    proj_var_est: np.ndarray
    variance_capture: np.ndarray
    eigvals_est: np.ndarray


def eigen_check(exact_samples: np.ndarray, q: MoGPosterior, n: int = 2000,
                rng: np.random.Generator | None = None) -> EigenCheck:
    """Covariance eigenstructure comparison for 2-D posteriors.

    Projects exact and estimated samples onto the estimated covariance
    eigenvectors (largest/smallest eigenvalue order), reports projected
    moments, the variance captured relative to the exact samples' own
    eigenvalues, and the angle between leading eigenvectors. The angle is
    undefined (flagged) when the estimated covariance is near isotropic
    (eigenvalue ratio < 1.05).
    """
    exact_samples = np.asarray(exact_samples, dtype=float)
    if exact_samples.ndim != 2 or exact_samples.shape[1] != 2 or q.d != 2:
        raise InputError("eigen_check requires 2-D posteriors")
    rng = np.random.default_rng(0) if rng is None else rng

    cov_est = q.cov()
    evals, evecs = np.linalg.eigh(cov_est)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]

    est_samples = q.sample(n, rng)
    proj_exact = exact_samples @ evecs
    proj_est = est_samples @ evecs

    cov_exact = np.cov(exact_samples.T)
    xevals, xevecs = np.linalg.eigh(cov_exact)
    xorder = np.argsort(xevals)[::-1]
    xevals, xevecs = xevals[xorder], xevecs[:, xorder]

    ratio = evals[0] / max(evals[1], 1e-300)
    defined = bool(ratio >= 1.05)
    cosang = abs(float(evecs[:, 0] @ xevecs[:, 0]))
    angle = float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))) if defined else np.nan

    return EigenCheck(
        angle_deg=angle,
        angle_defined=defined,
        proj_mean_exact=proj_exact.mean(axis=0),
        proj_mean_est=proj_est.mean(axis=0),
        proj_var_exact=proj_exact.var(axis=0, ddof=1),
        proj_var_est=proj_est.var(axis=0, ddof=1),
        variance_capture=proj_exact.var(axis=0, ddof=1) / np.maximum(xevals, 1e-300),
        eigvals_est=evals,
    )


def prior_consistency(train_classifier, generate_test, priors, n_per_prior: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Mean predicted posterior of model 0 versus its training prior.

    ``train_classifier(prior_vec, rng)`` must return a predictor mapping raw
    summaries to model probabilities; ``generate_test(prior_vec, n, rng)``
    returns fresh test summaries drawn at that prior. Returns a (len(priors),
    2) table of (prior, mean posterior).
    """
    table = np.zeros((len(priors), 2))
    for i, p0 in enumerate(priors):
        prior_vec = np.array([p0, 1.0 - p0])
        predict = train_classifier(prior_vec, rng)
        summaries = generate_test(prior_vec, n_per_prior, rng)
        probs = predict(summaries)
        table[i] = (p0, float(np.atleast_2d(probs)[:, 0].mean()))
    return table


@dataclass(frozen=True)
class MethodScore:
    mae: float | None
    cross_entropy: float | None


def compare_methods(method_probs: dict, exact_probs: np.ndarray | None = None,
                    labels: np.ndarray | None = None) -> dict:
    """Per-method mean absolute error vs the exact posterior and/or mean
    cross-entropy vs the true model indices, on identical test points."""
    if exact_probs is None and labels is None:
        raise InputError("need exact posteriors or labels to score against")
    out = {}
    for name, probs in method_probs.items():
        probs = np.atleast_2d(np.asarray(probs, dtype=float))
        mae = None
        ce = None
        if exact_probs is not None:
            mae = float(np.abs(probs[:, 0] - np.atleast_2d(exact_probs)[:, 0]).mean())
        if labels is not None:
            lab = np.asarray(labels, dtype=int).ravel()
            picked = np.clip(probs[np.arange(lab.size), lab], _PROB_FLOOR, None)
            ce = float(-np.log(picked).mean())
        out[name] = MethodScore(mae=mae, cross_entropy=ce)
    return out


@dataclass
class CalibrationReport:
    """Aggregated diagnostics, serializable as text plus tabular files."""

    name: str
    quantile_checks: dict = field(default_factory=dict)
    coverage_levels: np.ndarray | None = None
    coverages: dict = field(default_factory=dict)
    normalized_kls: dict = field(default_factory=dict)
    eigen_angles: np.ndarray | None = None
    prior_table: np.ndarray | None = None
    method_scores: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"calibration report: {self.name}"]
        for label, qc in self.quantile_checks.items():
            lines.append(
                f"  quantile check [{label}]: KS={qc.ks_stat:.4f} "
                f"(1% critical {qc.ks_critical_1pct:.4f}) -> {'pass' if qc.passed else 'FAIL'}"
            )
        if self.coverage_levels is not None:
            for label, cov in self.coverages.items():
                worst = float(np.abs(cov - self.coverage_levels).max())
                lines.append(f"  coverage [{label}]: max |coverage - level| = {worst:.4f}")
        for label, vals in self.normalized_kls.items():
            vals = np.asarray(vals)
            ok = vals[np.isfinite(vals)]
            if ok.size:
                lines.append(f"  normalized KL [{label}]: median {np.median(ok):.4f}")
        if self.eigen_angles is not None:
            ang = self.eigen_angles[np.isfinite(self.eigen_angles)]
            if ang.size:
                lines.append(f"  eigen angles: median {np.median(ang):.2f} deg over {ang.size} cases")
        if self.prior_table is not None:
            worst = float(np.abs(self.prior_table[:, 0] - self.prior_table[:, 1]).max())
            lines.append(f"  prior consistency: max |mean posterior - prior| = {worst:.4f}")
        for method, score in self.method_scores.items():
            bits = []
            if score.mae is not None:
                bits.append(f"MAE={score.mae:.4f}")
            if score.cross_entropy is not None:
                bits.append(f"CE={score.cross_entropy:.4f}")
            lines.append(f"  method {method}: " + ", ".join(bits))
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.to_text())
        tables = {}
        for label, qc in self.quantile_checks.items():
            np.savetxt(out_dir / f"quantiles_{label}.csv", qc.quantiles, header="quantile", comments="")
            tables[f"ks_{label}"] = {"stat": qc.ks_stat, "critical_1pct": qc.ks_critical_1pct}
        if self.coverage_levels is not None:
            for label, cov in self.coverages.items():
                np.savetxt(
                    out_dir / f"coverage_{label}.csv",
                    np.column_stack([self.coverage_levels, cov]),
                    header="level,coverage", delimiter=",", comments="",
                )
        for label, vals in self.normalized_kls.items():
            np.savetxt(out_dir / f"nkl_{label}.csv", np.asarray(vals), header="normalized_kl", comments="")
        if self.eigen_angles is not None:
            np.savetxt(out_dir / "eigen_angles.csv", self.eigen_angles, header="angle_deg", comments="")
        if self.prior_table is not None:
            np.savetxt(out_dir / "prior_consistency.csv", self.prior_table,
                       header="prior,mean_posterior", delimiter=",", comments="")
        if self.method_scores:
            tables["methods"] = {
                name: {"mae": s.mae, "cross_entropy": s.cross_entropy}
                for name, s in self.method_scores.items()
            }
        if tables:
            (out_dir / "summary.json").write_text(json.dumps(tables, indent=2, sort_keys=True) + "\n")
