"""Mixture-density networks trained by backpropagation with Adam.

A shared tanh feedforward trunk feeds one of two heads: a softmax head for
the posterior over model indices, and a mixture-of-Gaussians head for the
posterior over model parameters. The MoG head emits mixture logits, component
means, and the upper-triangular Cholesky factor U of each precision matrix
(diagonal through an exponential readout, so S^-1 = U^T U is always symmetric
positive definite).

Gradients are computed analytically; the exactness is enforced by
finite-difference checks in the test suite. Training is deterministic for a
fixed seed and configuration.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, InputError, MissingArtifactError, TrainingDivergenceError
from .features import ZScaler

_LOG_2PI = float(np.log(2.0 * np.pi))
_PROB_FLOOR = 1e-12


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(z: np.ndarray, axis=-1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _uniform_init(rng: np.random.Generator, n_out: int, n_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in))


class FeedforwardNet:
    """Fully connected trunk with tanh units in every layer."""

    def __init__(self, sizes, rng: np.random.Generator):
        sizes = list(int(s) for s in sizes)
        if len(sizes) < 2:
            raise ConfigError("network needs an input size and at least one hidden layer")
        self.sizes = sizes
        self.weights = [_uniform_init(rng, sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        self.biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray):
        """Trunk activation for a (B, n_in) batch; returns (y, cache)."""
        h = np.asarray(x, dtype=float)
        if h.ndim != 2 or h.shape[1] != self.n_in:
            raise InputError(f"expected input of shape (B, {self.n_in}), got {h.shape}")
        cache = [h]
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w.T + b)
            cache.append(h)
        return h, cache

    def backward(self, dy: np.ndarray, cache):
        """Weight/bias gradients given dL/dy; returns them in param order."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        g = dy
        for l in range(len(self.weights) - 1, -1, -1):
            gz = g * (1.0 - cache[l + 1] ** 2)
            grads_w[l] = gz.T @ cache[l]
            grads_b[l] = gz.sum(axis=0)
            g = gz @ self.weights[l]
        return grads_w, grads_b

    def param_list(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


class ClassifierHead:
    """Softmax readout over model indices."""

    def __init__(self, n_hidden: int, n_models: int, rng: np.random.Generator):
        self.n_models = int(n_models)
        self.W = _uniform_init(rng, n_models, n_hidden)
        self.b = np.zeros(n_models)

    def logits(self, y: np.ndarray) -> np.ndarray:
        return y @ self.W.T + self.b

    def param_list(self):
        return [self.W, self.b]


class MoGHead:
    """Mixture-of-Gaussians readout: logits, means and Cholesky factors.

    Readout weights start near zero so the initial mixture is approximately a
    standard normal in the z-scored parameter space.
    """

    def __init__(self, n_hidden: int, d: int, K: int, rng: np.random.Generator):
        if K < 1:
            raise ConfigError("K must be >= 1")
        self.d = int(d)
        self.K = int(K)
        self.iu = np.triu_indices(d, k=1)
        t = self.iu[0].size
        small = 0.01
        self.W_alpha = _uniform_init(rng, K, n_hidden, small)
        self.b_alpha = np.zeros(K)
        self.W_mean = _uniform_init(rng, K * d, n_hidden, small)
        self.b_mean = np.zeros(K * d)
        self.W_diag = _uniform_init(rng, K * d, n_hidden, small)
        self.b_diag = np.zeros(K * d)
        self.W_utri = _uniform_init(rng, K * t, n_hidden, small) if t else np.zeros((0, n_hidden))
        self.b_utri = np.zeros(K * t)

    def raw_outputs(self, y: np.ndarray):
        B = y.shape[0]
        alpha = _softmax(y @ self.W_alpha.T + self.b_alpha)
        means = (y @ self.W_mean.T + self.b_mean).reshape(B, self.K, self.d)
        a = (y @ self.W_diag.T + self.b_diag).reshape(B, self.K, self.d)
        t = self.iu[0].size
        if t:
            c = (y @ self.W_utri.T + self.b_utri).reshape(B, self.K, t)
        else:
            c = np.zeros((B, self.K, 0))
        return alpha, means, a, c

    def assemble_U(self, a: np.ndarray, c: np.ndarray) -> np.ndarray:
        B, K, d = a.shape
        U = np.zeros((B, K, d, d))
        idx = np.arange(d)
        U[:, :, idx, idx] = np.exp(a)
        if self.iu[0].size:
            U[:, :, self.iu[0], self.iu[1]] = c
        return U

    def param_list(self):
        return [self.W_alpha, self.b_alpha, self.W_mean, self.b_mean,
                self.W_diag, self.b_diag, self.W_utri, self.b_utri]


@dataclass(frozen=True)
class MoGPosterior:
    """Mixture of Gaussians with Cholesky-factored precisions.

    ``U[k]`` is upper triangular with positive diagonal; the component
    covariance is (U^T U)^-1.
    """

    weights: np.ndarray
    means: np.ndarray
    U: np.ndarray

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def component_covs(self) -> np.ndarray:
        covs = np.empty((self.K, self.d, self.d))
        eye = np.eye(self.d)
        for k in range(self.K):
            uinv = solve_triangular(self.U[k], eye, lower=False)
            covs[k] = uinv @ uinv.T
        return covs

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        covs = self.component_covs()
        total = np.zeros((self.d, self.d))
        for k in range(self.K):
            total += self.weights[k] * (covs[k] + np.outer(self.means[k], self.means[k]))
        return total - np.outer(mu, mu)

    def log_pdf(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        pts = np.atleast_2d(theta)
        if pts.shape[1] != self.d:
            raise InputError(f"theta must have dimension {self.d}")
        delta = pts[:, None, :] - self.means[None, :, :]
        v = np.einsum("kij,nkj->nki", self.U, delta)
        log_det_sqrt = np.log(np.diagonal(self.U, axis1=1, axis2=2)).sum(axis=1)
        log_n = -0.5 * self.d * _LOG_2PI + log_det_sqrt[None, :] - 0.5 * (v**2).sum(axis=2)
        with np.errstate(divide="ignore"):
            out = _logsumexp(np.log(self.weights)[None, :] + log_n, axis=1)
        return float(out[0]) if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.K, size=n, p=self.weights / self.weights.sum())
        z = rng.standard_normal((n, self.d))
        out = np.empty((n, self.d))
        for k in range(self.K):
            sel = ks == k
            if np.any(sel):
                out[sel] = self.means[k] + solve_triangular(self.U[k], z[sel].T, lower=False).T
        return out

    def marginal_params(self, j: int):
        """Mixture weights, means and stds of marginal dimension j."""
        covs = self.component_covs()
        return self.weights.copy(), self.means[:, j].copy(), np.sqrt(covs[:, j, j])


def forward_classifier(net: FeedforwardNet, head: ClassifierHead, s) -> np.ndarray:
    """Posterior probabilities over model indices for summaries s."""
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    y, _ = net.forward(np.atleast_2d(s))
    probs = _softmax(head.logits(y))
    return probs[0] if single else probs


def classifier_loss(probs, labels) -> float:
    """Mean negative log-probability of the true labels.

    Zero predicted probabilities are clamped at 1e-12 (with a warning), which
    caps the per-sample loss on confidently wrong predictions.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.asarray(labels, dtype=int).ravel()
    picked = probs[np.arange(labels.size), labels]
    if np.any(picked < _PROB_FLOOR):
        warnings.warn("clamped zero predicted probability in cross-entropy", RuntimeWarning)
        picked = np.clip(picked, _PROB_FLOOR, None)
    return float(-np.log(picked).mean())


def forward_mog(net: FeedforwardNet, head: MoGHead, s) -> MoGPosterior:
    """MoG posterior (in the network's training scale) for one summary s."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 1:
        raise InputError("forward_mog takes a single summary vector")
    alpha, means, U = forward_mog_batch(net, head, s[None, :])
    return MoGPosterior(weights=alpha[0], means=means[0], U=U[0])


def forward_mog_batch(net: FeedforwardNet, head: MoGHead, X: np.ndarray):
    """Batched MoG head outputs: (alpha, means, U) arrays."""
    y, _ = net.forward(X)
    alpha, means, a, c = head.raw_outputs(y)
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(means)) and np.all(np.isfinite(a)) and np.all(np.isfinite(c))):
        raise TrainingDivergenceError("MoG head produced non-finite outputs")
    return alpha, means, head.assemble_U(a, c)


def mog_log_density(q: MoGPosterior, theta) -> float | np.ndarray:
    """Log density of the mixture at theta (log-sum-exp over components)."""
    return q.log_pdf(theta)


def classifier_loss_and_grads(net: FeedforwardNet, head: ClassifierHead, X, labels):
    """Cross-entropy and its gradients w.r.t. every parameter."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels, dtype=int).ravel()
    B = X.shape[0]
    y, cache = net.forward(X)
    logits = head.logits(y)
    logp = logits - _logsumexp(logits, axis=1)[:, None]
    loss = float(-logp[np.arange(B), labels].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    dW = dlogits.T @ y
    db = dlogits.sum(axis=0)
    dy = dlogits @ head.W
    gw, gb = net.backward(dy, cache)
    grads = []
    for w, b in zip(gw, gb):
        grads.extend([w, b])
    grads.extend([dW, db])
    return loss, grads


def mog_loss_and_grads(net: FeedforwardNet, head: MoGHead, X, thetas):
    """Mean negative log mixture density and its parameter gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    B = X.shape[0]
    K, d = head.K, head.d
    y, cache = net.forward(X)
    alpha, means, a, c = head.raw_outputs(y)
    U = head.assemble_U(a, c)

    delta = thetas[:, None, :] - means
    v = np.einsum("bkij,bkj->bki", U, delta)
    log_n = -0.5 * d * _LOG_2PI + a.sum(axis=2) - 0.5 * (v**2).sum(axis=2)
    with np.errstate(divide="ignore"):
        ell = np.log(alpha) + log_n
    lse = _logsumexp(ell, axis=1)
    loss = float(-lse.mean())
    r = np.exp(ell - lse[:, None])

    dz_alpha = (alpha - r) / B
    ut_v = np.einsum("bkij,bki->bkj", U, v)
    dmean = -(r[:, :, None] * ut_v) / B
    u_diag = np.exp(a)
    da = r[:, :, None] * (v * u_diag * delta - 1.0) / B
    iu0, iu1 = head.iu
    dc = r[:, :, None] * (v[:, :, iu0] * delta[:, :, iu1]) / B

    dy = (
        dz_alpha @ head.W_alpha
        + dmean.reshape(B, K * d) @ head.W_mean
        + da.reshape(B, K * d) @ head.W_diag
        + dc.reshape(B, -1) @ head.W_utri
    )
    gw, gb = net.backward(dy, cache)
    grads = []
    for w, b in zip(gw, gb):
        grads.extend([w, b])
    grads.extend([
        dz_alpha.T @ y, dz_alpha.sum(axis=0),
        dmean.reshape(B, K * d).T @ y, dmean.reshape(B, K * d).sum(axis=0),
        da.reshape(B, K * d).T @ y, da.reshape(B, K * d).sum(axis=0),
        dc.reshape(B, -1).T @ y, dc.reshape(B, -1).sum(axis=0),
    ])
    return loss, grads


def loss_and_grads(net, head, X, targets):
    """Dispatch to the head-specific fused loss/gradient computation."""
    if isinstance(head, ClassifierHead):
        return classifier_loss_and_grads(net, head, X, targets)
    if isinstance(head, MoGHead):
        return mog_loss_and_grads(net, head, X, targets)
    raise ConfigError(f"unknown head type {type(head).__name__}")


@dataclass(frozen=True)
class TrainConfig:
    """Adam-based minibatch training settings."""

    learning_rate: float = 0.01
    batch_size: int | None = None
    epochs: int = 100
    n_components: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.n_components < 1:
            raise ConfigError("learning_rate, epochs and n_components must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def resolved_batch_size(self, n: int) -> int:
        return self.batch_size if self.batch_size is not None else max(1, n // 100)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "n_components": self.n_components,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }


class Adam:
    """Adam with bias correction; a zero gradient leaves parameters unchanged."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g**2
            p -= self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)


def train(net, head, inputs, targets, cfg: TrainConfig) -> np.ndarray:
    """Minibatch Adam over shuffled epochs; returns the per-epoch loss trace.

    The classifier head sees only model-index targets and the MoG head only
    parameter targets. Raises TrainingDivergenceError with diagnostics if a
    batch loss goes non-finite.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    n = inputs.shape[0]
    batch = cfg.resolved_batch_size(n)
    rng = np.random.default_rng(cfg.seed)
    params = net.param_list() + head.param_list()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    trace = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch):
            idx = perm[lo : lo + batch]
            loss, grads = loss_and_grads(net, head, inputs[idx], np.asarray(targets)[idx])
            if not np.isfinite(loss):
                norms = [float(np.linalg.norm(p)) for p in params]
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {lo // batch}; parameter norms {norms}"
                )
            opt.step(params, grads)
            losses.append(loss * idx.size)
        trace[epoch] = float(np.sum(losses) / n)
    return trace


def mog_to_original_scale(q: MoGPosterior, param_scaler: ZScaler) -> MoGPosterior:
    """Map a MoG fit in z-space back to the original parameter scale.

    Means are affinely mapped; each Cholesky factor is multiplied on the
    right by diag(1/std), which conjugates the precision by the inverse scale
    and stays upper triangular with a positive diagonal.
    """
    if q.d != param_scaler.means.shape[0]:
        raise InputError("scaler dimension does not match posterior dimension")
    means = q.means * param_scaler.stds + param_scaler.means
    U = q.U / param_scaler.stds[None, None, :]
    return MoGPosterior(weights=q.weights.copy(), means=means, U=U)


@dataclass
class TrainedModel:
    """A trained network bundled with its scalers and provenance.

    ``kind`` is "classifier" or "mog". Saving and loading reproduces forward
    outputs bitwise (all arrays are stored as float64).
    """

    kind: str
    net: FeedforwardNet
    head: ClassifierHead | MoGHead
    input_scaler: ZScaler
    param_scaler: ZScaler | None = None
    config: TrainConfig = field(default_factory=TrainConfig)
    info: dict = field(default_factory=dict)

    def predict_probs(self, summaries) -> np.ndarray:
        if self.kind != "classifier":
            raise InputError("predict_probs requires a classifier model")
        return forward_classifier(self.net, self.head, self.input_scaler.apply(summaries))

    def predict_posterior(self, summary, original_scale: bool = True) -> MoGPosterior:
        if self.kind != "mog":
            raise InputError("predict_posterior requires a mog model")
        q = forward_mog(self.net, self.head, self.input_scaler.apply(summary))
        if original_scale and self.param_scaler is not None:
            q = mog_to_original_scale(q, self.param_scaler)
        return q

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": 1,
            "kind": self.kind,
            "sizes": self.net.sizes,
            "config": self.config.to_dict(),
            "info": self.info,
            "has_param_scaler": self.param_scaler is not None,
        }
        arrays = {}
        for i, (w, b) in enumerate(zip(self.net.weights, self.net.biases)):
            arrays[f"net_w{i}"] = w
            arrays[f"net_b{i}"] = b
        if self.kind == "classifier":
            arrays["head_W"] = self.head.W
            arrays["head_b"] = self.head.b
            meta["n_models"] = self.head.n_models
        else:
            meta["K"] = self.head.K
            meta["d"] = self.head.d
            for name in ("W_alpha", "b_alpha", "W_mean", "b_mean", "W_diag", "b_diag", "W_utri", "b_utri"):
                arrays[f"head_{name}"] = getattr(self.head, name)
        arrays["meta_json"] = np.array([json.dumps(meta, sort_keys=True)])
        arrays["scaler_means"] = self.input_scaler.means
        arrays["scaler_stds"] = self.input_scaler.stds
        if self.param_scaler is not None:
            arrays["pscaler_means"] = self.param_scaler.means
            arrays["pscaler_stds"] = self.param_scaler.stds
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"network file not found: {path}")
        with np.load(path) as z:
            meta = json.loads(str(z["meta_json"][0]))
            rng = np.random.default_rng(0)
            net = FeedforwardNet(meta["sizes"], rng)
            for i in range(len(net.weights)):
                net.weights[i] = z[f"net_w{i}"]
                net.biases[i] = z[f"net_b{i}"]
            if meta["kind"] == "classifier":
                head = ClassifierHead(net.n_out, meta["n_models"], rng)
                head.W = z["head_W"]
                head.b = z["head_b"]
            else:
                head = MoGHead(net.n_out, meta["d"], meta["K"], rng)
                for name in ("W_alpha", "b_alpha", "W_mean", "b_mean", "W_diag", "b_diag", "W_utri", "b_utri"):
                    setattr(head, name, z[f"head_{name}"])
            input_scaler = ZScaler(means=z["scaler_means"], stds=z["scaler_stds"])
            param_scaler = None
            if meta["has_param_scaler"]:
                param_scaler = ZScaler(means=z["pscaler_means"], stds=z["pscaler_stds"])
            return cls(
                kind=meta["kind"],
                net=net,
                head=head,
                input_scaler=input_scaler,
                param_scaler=param_scaler,
                config=TrainConfig(**meta["config"]),
                info=meta.get("info", {}),
            )
