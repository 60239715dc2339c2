"""Reference ABC implementations used for method comparison.

Both samplers operate on summary vectors with a Euclidean distance; callers
are expected to pass z-scored summaries (a prior-predictive pilot or the
reference table itself provides the scaling). Simulators are batched:
``simulate(thetas, rng) -> summaries``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counts import GammaParams
from .errors import ConfigError, InputError, ParameterDomainError


@dataclass(frozen=True)
class RejectionConfig:
    """Tolerance, simulation budget and distance for basic rejection."""

    epsilon: float
    n_simulations: int
    distance: str = "euclidean"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterDomainError("epsilon must be >= 0")
        if self.n_simulations < 1:
            raise ParameterDomainError("n_simulations must be >= 1")
        if self.distance != "euclidean":
            raise ConfigError(f"unknown distance {self.distance!r}")


@dataclass(frozen=True)
class SmcConfig:
    """Round schedule for SMC-ABC.

    ``draws_per_round`` counts simulator calls, so the total budget is
    rounds * draws_per_round. The tolerance shrinks to the median accepted
    distance of the previous round; the perturbation kernel covariance is
    ``kernel_scale`` times the weighted covariance of the previous particles.
    """

    n_rounds: int
    draws_per_round: int
    initial_epsilon: float = np.inf
    kernel_scale: float = 2.0
    ess_min: float = 5.0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ConfigError("n_rounds must be >= 1")
        if self.draws_per_round < 1:
            raise ConfigError("draws_per_round must be >= 1")


class BoxUniformPrior:
    """Independent uniform prior over an axis-aligned box."""

    def __init__(self, lows, highs):
        self.lows = np.asarray(lows, dtype=float)
        self.highs = np.asarray(highs, dtype=float)
        if np.any(self.highs <= self.lows):
            raise ParameterDomainError("box prior needs highs > lows")

    @property
    def dim(self) -> int:
        return self.lows.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lows, self.highs, size=(n, self.dim))

    def log_pdf(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        inside = np.all((thetas >= self.lows) & (thetas <= self.highs), axis=1)
        log_vol = -np.log(self.highs - self.lows).sum()
        return np.where(inside, log_vol, -np.inf)


class GammaProductPrior:
    """Independent Gamma priors over each coordinate."""

    def __init__(self, *components: GammaParams):
        if not components:
            raise ParameterDomainError("need at least one Gamma component")
        self.components = components

    @property
    def dim(self) -> int:
        return len(self.components)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.column_stack([g.sample(n, rng) for g in self.components])

    def log_pdf(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return sum(g.log_pdf(thetas[:, j]) for j, g in enumerate(self.components))


def _distances(summaries: np.ndarray, x_o: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(summaries) - np.asarray(x_o, dtype=float), axis=1)


@dataclass
class RejectionResult:
    accepted: np.ndarray
    distances: np.ndarray
    acceptance_rate: float
    none_accepted: bool


def reject_params(prior, simulate, x_o_summary, cfg: RejectionConfig, rng: np.random.Generator) -> RejectionResult:
    """Basic ABC rejection for a parameter posterior.

    Draws cfg.n_simulations parameters from the prior, simulates each, and
    accepts those whose summaries fall within epsilon of the observation.
    Zero acceptances are flagged, not an error.
    """
    thetas = prior.sample(cfg.n_simulations, rng)
    summaries = simulate(thetas, rng)
    d = _distances(summaries, x_o_summary)
    mask = d <= cfg.epsilon
    return RejectionResult(
        accepted=thetas[mask],
        distances=d[mask],
        acceptance_rate=float(mask.mean()),
        none_accepted=not bool(mask.any()),
    )


@dataclass
class ModelPosteriorEstimate:
    probs: np.ndarray
    n_accepted_per_model: np.ndarray
    acceptance_rate: float
    undefined: bool


def accepted_model_fractions(model_idx: np.ndarray, distances: np.ndarray, epsilon: float,
                             n_models: int) -> ModelPosteriorEstimate:
    """Posterior estimate = per-model share of the accepted simulations."""
    mask = distances <= epsilon
    counts = np.bincount(model_idx[mask], minlength=n_models).astype(float)
    total = counts.sum()
    if total == 0:
        return ModelPosteriorEstimate(np.full(n_models, np.nan), counts, 0.0, True)
    return ModelPosteriorEstimate(counts / total, counts, float(mask.mean()), False)


def reject_models(model_prior, priors, simulators, x_o_summary, cfg: RejectionConfig,
                  rng: np.random.Generator) -> ModelPosteriorEstimate:
    """Basic ABC rejection for model comparison.

    Per simulation a model index is drawn from the model prior, parameters
    from that model's prior, and the pair is accepted on summary distance.
    """
    model_prior = np.asarray(model_prior, dtype=float)
    n_models = model_prior.size
    if len(priors) != n_models or len(simulators) != n_models:
        raise InputError("need one prior and one simulator per model")
    m = rng.choice(n_models, size=cfg.n_simulations, p=model_prior)
    d = np.empty(cfg.n_simulations)
    for k in range(n_models):
        sel = np.flatnonzero(m == k)
        if sel.size:
            thetas = priors[k].sample(sel.size, rng)
            d[sel] = _distances(simulators[k](thetas, rng), x_o_summary)
    return accepted_model_fractions(m, d, cfg.epsilon, n_models)


@dataclass
class SmcRound:
    epsilon: float
    model_idx: np.ndarray
    thetas: list
    weights: np.ndarray
    probs: np.ndarray
    ess: float
    n_accepted: int


@dataclass
class SmcResult:
    rounds: list
    probs: np.ndarray
    degenerate: bool
    dead_models: np.ndarray

    @property
    def final_round(self) -> SmcRound:
        return self.rounds[-1]


def _weighted_cov(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    w = w / w.sum()
    mu = w @ x
    xc = x - mu
    return (xc * w[:, None]).T @ xc + 1e-10 * np.eye(x.shape[1])


def _gauss_kernel_logpdf(x: np.ndarray, centers: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(x | center_j, cov) for each (row of x, row of centers)."""
    L = np.linalg.cholesky(cov)
    diff = x[:, None, :] - centers[None, :, :]
    sol = np.linalg.solve(L, diff[..., None])[..., 0]
    maha = (sol**2).sum(axis=-1)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (maha + x.shape[1] * np.log(2.0 * np.pi) + logdet)


def smc_models(model_prior, priors, simulators, x_o_summary, cfg: SmcConfig,
               rng: np.random.Generator) -> SmcResult:
    """SMC-ABC for model comparison with the model index as a particle coordinate.

    Round 1 is plain rejection from the prior at the initial tolerance;
    later rounds resample the previous particles of the drawn model, perturb
    with a per-model Gaussian kernel, and reweight with the standard SMC-ABC
    importance formula. The per-round model posterior is the weighted share
    of accepted particles. Stops early (flagged) when the effective sample
    size drops below cfg.ess_min; models with no surviving particles die out.
    """
    model_prior = np.asarray(model_prior, dtype=float)
    n_models = model_prior.size
    rounds: list[SmcRound] = []
    epsilon = float(cfg.initial_epsilon)
    degenerate = False

    prev: SmcRound | None = None
    prev_covs: list | None = None
    for rnd in range(cfg.n_rounds):
        m_draw = rng.choice(n_models, size=cfg.draws_per_round, p=model_prior)
        thetas_draw = [np.zeros((0, priors[k].dim)) for k in range(n_models)]
        logw_parts: dict[int, np.ndarray] = {}
        for k in range(n_models):
            sel = np.flatnonzero(m_draw == k)
            if not sel.size:
                continue
            if prev is None:
                thetas = priors[k].sample(sel.size, rng)
                logw = np.zeros(sel.size)
            else:
                pk = prev.model_idx == k
                if not np.any(pk):
                    # model died out in a previous round
                    m_draw[sel] = -1
                    continue
                centers = prev.thetas[k]
                wk = prev.weights[pk]
                wk = wk / wk.sum()
                cov = prev_covs[k]
                idx = rng.choice(centers.shape[0], size=sel.size, p=wk)
                L = np.linalg.cholesky(cov)
                thetas = centers[idx] + rng.standard_normal((sel.size, cov.shape[0])) @ L.T
                # redraw proposals that fall outside the prior support
                for _ in range(100):
                    bad = ~np.isfinite(priors[k].log_pdf(thetas))
                    if not np.any(bad):
                        break
                    ridx = rng.choice(centers.shape[0], size=int(bad.sum()), p=wk)
                    thetas[bad] = centers[ridx] + rng.standard_normal((int(bad.sum()), cov.shape[0])) @ L.T
                bad = ~np.isfinite(priors[k].log_pdf(thetas))
                if np.any(bad):
                    keep = ~bad
                    m_draw[sel[bad]] = -1
                    sel = sel[keep]
                    thetas = thetas[keep]
                    if not sel.size:
                        continue
                log_kern = _gauss_kernel_logpdf(thetas, centers, cov) + np.log(wk)[None, :]
                mx = log_kern.max(axis=1, keepdims=True)
                log_mix = (mx + np.log(np.exp(log_kern - mx).sum(axis=1, keepdims=True)))[:, 0]
                logw = priors[k].log_pdf(thetas) - log_mix
            thetas_draw[k] = thetas
            logw_parts[k] = logw

        # simulate and accept
        model_idx_acc = []
        thetas_acc = [np.zeros((0, priors[k].dim)) for k in range(n_models)]
        logw_acc = []
        dists_acc = []
        for k in range(n_models):
            thetas = thetas_draw[k]
            if not thetas.shape[0]:
                continue
            dist = _distances(simulators[k](thetas, rng), x_o_summary)
            ok = dist <= epsilon
            thetas_acc[k] = thetas[ok]
            model_idx_acc.append(np.full(int(ok.sum()), k))
            logw_acc.append(logw_parts[k][ok])
            dists_acc.append(dist[ok])

        model_idx = np.concatenate(model_idx_acc) if model_idx_acc else np.zeros(0, dtype=int)
        logw = np.concatenate(logw_acc) if logw_acc else np.zeros(0)
        dists = np.concatenate(dists_acc) if dists_acc else np.zeros(0)
        if model_idx.size == 0:
            degenerate = True
            break
        logw = logw - logw.max()
        weights = np.exp(logw)
        weights /= weights.sum()
        probs = np.array([weights[model_idx == k].sum() for k in range(n_models)])
        ess = float(1.0 / np.sum(weights**2))
        rounds.append(SmcRound(epsilon, model_idx, thetas_acc, weights, probs, ess, model_idx.size))
        if ess < cfg.ess_min:
            degenerate = True
            break
        prev = rounds[-1]
        prev_covs = []
        for k in range(n_models):
            pk = prev.model_idx == k
            if np.any(pk):
                prev_covs.append(cfg.kernel_scale * _weighted_cov(prev.thetas[k], prev.weights[pk]))
            else:
                prev_covs.append(None)
        epsilon = float(np.median(dists))

    if not rounds:
        return SmcResult([], np.full(n_models, np.nan), True, np.ones(n_models, dtype=bool))
    final = rounds[-1]
    dead = np.array([not np.any(final.model_idx == k) for k in range(n_models)])
    return SmcResult(rounds, final.probs, degenerate, dead)
