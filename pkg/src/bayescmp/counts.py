"""Generative Poisson and negative-binomial count models.

Both models share Gamma hyperpriors. The negative-binomial model is sampled
as a per-count Poisson-Gamma mixture, which keeps a single code path for
integer and real-valued shape parameters. The comparison difficulty is
controlled through the NB shape hyperprior while keeping the expected sample
means of the two models equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .errors import InputError, ParameterDomainError

POISSON = 0
NB = 1
MODEL_NAMES = ("poisson", "nb")


@dataclass(frozen=True)
class GammaParams:
    """Shape/scale pair of a Gamma distribution."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and np.isfinite(self.shape)):
            raise ParameterDomainError(f"Gamma shape must be positive, got {self.shape}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ParameterDomainError(f"Gamma scale must be positive, got {self.scale}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def var(self) -> float:
        return self.shape * self.scale**2

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, -np.inf)
        pos = x > 0
        xp = x[pos]
        out[pos] = (
            -gammaln(self.shape)
            - self.shape * np.log(self.scale)
            + (self.shape - 1.0) * np.log(xp)
            - xp / self.scale
        )
        return out if out.ndim else float(out)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size=n)

    def ppf(self, q):
        return stats.gamma.ppf(q, a=self.shape, scale=self.scale)


def sample_gamma(p: GammaParams, rng: np.random.Generator) -> float:
    """Draw one Gamma(shape, scale) variate; mean is shape*scale."""
    return float(rng.gamma(p.shape, p.scale))


@dataclass(frozen=True)
class CountModelSpec:
    """Priors and sampling configuration for the Poisson-vs-NB comparison.

    ``model_prior`` is over (Poisson, NB). ``counts_per_sample`` is the number
    of counts per data point; the sample variance needs at least 2.
    """

    model_prior: tuple[float, float]
    poisson_rate_prior: GammaParams
    nb_shape_prior: GammaParams
    nb_scale_prior: GammaParams
    counts_per_sample: int = 100

    def __post_init__(self):
        p = np.asarray(self.model_prior, dtype=float)
        if p.shape != (2,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ParameterDomainError(f"model_prior must be 2 non-negative entries summing to 1, got {self.model_prior}")
        if self.counts_per_sample < 2:
            raise ParameterDomainError("counts_per_sample must be >= 2")


def simulate_poisson(lam: float, C: int, rng: np.random.Generator) -> np.ndarray:
    """C independent Poisson(lam) counts."""
    if not (lam >= 0 and np.isfinite(lam)):
        raise ParameterDomainError(f"Poisson rate must be non-negative, got {lam}")
    if C < 1:
        raise ParameterDomainError("C must be a positive integer")
    return rng.poisson(lam, size=C)


def simulate_nb(k: float, theta: float, C: int, rng: np.random.Generator) -> np.ndarray:
    """C negative-binomial counts via the Poisson-Gamma mixture.

    Each count draws its own rate from Gamma(k, theta) and then a Poisson
    count at that rate; the marginal is NB with r=k and p=theta/(1+theta).
    """
    if not (k > 0 and np.isfinite(k)):
        raise ParameterDomainError(f"NB shape must be positive, got {k}")
    if not (theta > 0 and np.isfinite(theta)):
        raise ParameterDomainError(f"NB scale must be positive, got {theta}")
    if C < 1:
        raise ParameterDomainError("C must be a positive integer")
    rates = rng.gamma(k, theta, size=C)
    return rng.poisson(rates)


def scale_difficulty(
    k2: float, theta2: float, k3: float, theta3: float, theta1: float
) -> tuple[float, float]:
    """Poisson shape and expected NB variance for given NB hyperparameters.

    Enforces the equal-expected-mean constraint k1*theta1 = k2*theta2*k3*theta3
    and returns (k1, expected NB variance). The variance uses the second
    moment of theta ~ Gamma(k3, theta3): E[theta^2 + theta].
    """
    for name, v in (("k2", k2), ("theta2", theta2), ("k3", k3), ("theta3", theta3), ("theta1", theta1)):
        if not (v > 0 and np.isfinite(v)):
            raise ParameterDomainError(f"{name} must be positive, got {v}")
    k1 = k2 * theta2 * k3 * theta3 / theta1
    e_theta_sq_plus_theta = k3 * (k3 + 1.0) * theta3**2 + k3 * theta3
    expected_nb_variance = k2 * theta2 * e_theta_sq_plus_theta
    return k1, expected_nb_variance


def make_scenario(
    name: str,
    model_prior: tuple[float, float] = (0.5, 0.5),
    counts_per_sample: int = 100,
    theta1: float = 1.0,
    theta2: float = 1.0,
    k3: float = 1.0,
    theta3: float = 1.0,
    k2: float | None = None,
) -> CountModelSpec:
    """Preset comparison scenarios: 'easy' (k2=20) and 'difficult' (k2=1).

    The remaining hyperparameters default to 1 (heuristic choice honoring the
    equal-mean constraint) and can be overridden; k2 may be set directly for
    custom difficulty.
    """
    presets = {"easy": 20.0, "difficult": 1.0}
    if k2 is None:
        if name not in presets:
            raise ParameterDomainError(f"unknown scenario {name!r}; expected one of {sorted(presets)} or explicit k2")
        k2 = presets[name]
    k1, _ = scale_difficulty(k2, theta2, k3, theta3, theta1)
    return CountModelSpec(
        model_prior=tuple(model_prior),
        poisson_rate_prior=GammaParams(k1, theta1),
        nb_shape_prior=GammaParams(k2, theta2),
        nb_scale_prior=GammaParams(k3, theta3),
        counts_per_sample=counts_per_sample,
    )


def generate_count_dataset(spec: CountModelSpec, N: int, rng: np.random.Generator):
    """Draw N labeled samples: model index, parameters, counts, summaries.

    Returns a columnar :class:`bayescmp.data.Dataset`. Per sample the model
    index comes from the model prior, parameters from the matching
    hyperprior(s), counts from the simulator, and the summary is
    (sample mean, sample variance).
    """
    from .data import Dataset
    from .features import count_summary_batch

    if N < 1:
        raise InputError("N must be >= 1")
    C = spec.counts_per_sample
    m = rng.choice(2, size=N, p=np.asarray(spec.model_prior, dtype=float))
    counts = np.empty((N, C), dtype=np.int64)
    params = np.zeros((N, 2), dtype=float)
    param_dim = np.where(m == POISSON, 1, 2).astype(np.int64)

    pois = np.flatnonzero(m == POISSON)
    if pois.size:
        lam = spec.poisson_rate_prior.sample(pois.size, rng)
        params[pois, 0] = lam
        counts[pois] = rng.poisson(lam[:, None], size=(pois.size, C))

    nb = np.flatnonzero(m == NB)
    if nb.size:
        k = spec.nb_shape_prior.sample(nb.size, rng)
        theta = spec.nb_scale_prior.sample(nb.size, rng)
        params[nb, 0] = k
        params[nb, 1] = theta
        rates = rng.gamma(k[:, None], theta[:, None], size=(nb.size, C))
        counts[nb] = rng.poisson(rates)

    summaries = count_summary_batch(counts)
    return Dataset(
        model_idx=m.astype(np.int64),
        params=params,
        param_dim=param_dim,
        summaries=summaries,
        raw=counts,
        meta={
            "kind": "counts",
            "n": int(N),
            "counts_per_sample": int(C),
            "model_prior": list(map(float, spec.model_prior)),
            "poisson_rate_prior": [spec.poisson_rate_prior.shape, spec.poisson_rate_prior.scale],
            "nb_shape_prior": [spec.nb_shape_prior.shape, spec.nb_shape_prior.scale],
            "nb_scale_prior": [spec.nb_scale_prior.shape, spec.nb_scale_prior.scale],
        },
    )
