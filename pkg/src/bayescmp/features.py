"""Summary statistics and feature transforms.

Count data is summarized by (sample mean, Bessel-corrected sample variance).
Channel current traces are summarized by least-squares coefficients on a
per-protocol PCA basis (5 components each, 25 coefficients total). Features
and parameters are z-transformed before network training.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, MissingArtifactError


def count_summary(x) -> tuple[float, float]:
    """(mean, sample variance) of a count vector; needs at least 2 entries."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InputError("count_summary needs a 1-D vector of length >= 2")
    return float(x.mean()), float(x.var(ddof=1))


def count_summary_batch(counts: np.ndarray) -> np.ndarray:
    """Row-wise (mean, sample variance) for a (n, C) count matrix."""
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2 or counts.shape[1] < 2:
        raise InputError("count_summary_batch needs an (n, C>=2) matrix")
    return np.column_stack([counts.mean(axis=1), counts.var(axis=1, ddof=1)])


@dataclass(frozen=True)
class ZScaler:
    """Per-column standardization; constant columns are centered only."""

    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, columns: np.ndarray) -> "ZScaler":
        columns = np.atleast_2d(np.asarray(columns, dtype=float))
        if columns.shape[0] < 2:
            raise InputError("ZScaler.fit needs at least 2 rows")
        means = columns.mean(axis=0)
        stds = columns.std(axis=0)
        stds = np.where(stds > 0.0, stds, 1.0)
        return cls(means=means, stds=stds)

    @classmethod
    def identity(cls, d: int) -> "ZScaler":
        return cls(means=np.zeros(d), stds=np.ones(d))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=float) - self.means) / self.stds

    def invert(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.stds + self.means


# Protocol order defines the layout of the 25-entry summary vector.
PROTOCOL_ORDER = ("activation", "inactivation", "deactivation", "action_potentials", "ramps")


@dataclass(frozen=True)
class PcaBasis:
    """Per-protocol orthonormal basis with explained-variance fractions.

    ``components[name]`` has the basis vectors in columns (T x k); columns of
    rank-deficient corpora are zero-padded. ``means[name]`` is the corpus
    column mean subtracted before projection.
    """

    protocol_names: tuple[str, ...]
    components: dict
    means: dict
    explained: dict

    @property
    def n_components(self) -> int:
        return next(iter(self.components.values())).shape[1]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"protocol_names": np.array(list(self.protocol_names))}
        for name in self.protocol_names:
            arrays[f"components_{name}"] = self.components[name]
            arrays[f"means_{name}"] = self.means[name]
            arrays[f"explained_{name}"] = self.explained[name]
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "PcaBasis":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"PCA basis file not found: {path}")
        with np.load(path) as z:
            names = tuple(str(s) for s in z["protocol_names"])
            return cls(
                protocol_names=names,
                components={n: z[f"components_{n}"] for n in names},
                means={n: z[f"means_{n}"] for n in names},
                explained={n: z[f"explained_{n}"] for n in names},
            )


def build_pca_basis(corpus: dict, n_components: int = 5) -> PcaBasis:
    """Top principal directions of each protocol's mean-centered trace matrix.

    Uses the eigendecomposition of the Gram matrix since corpora have far
    fewer rows than columns. A corpus of rank < n_components yields
    zero-padded basis columns and a warning.
    """
    components, means, explained = {}, {}, {}
    for name, mat in corpus.items():
        mat = np.asarray(mat, dtype=float)
        n, t = mat.shape
        if n < n_components:
            raise InputError(f"protocol {name!r}: {n} corpus rows < {n_components} components")
        mu = mat.mean(axis=0)
        xc = mat - mu
        gram = xc @ xc.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        total = evals.sum()
        tol = evals[0] * 1e-12 if evals[0] > 0 else 0.0

        basis = np.zeros((t, n_components))
        frac = np.zeros(n_components)
        rank = 0
        for j in range(n_components):
            if evals[j] > tol:
                basis[:, j] = (xc.T @ evecs[:, j]) / np.sqrt(evals[j])
                frac[j] = evals[j] / total if total > 0 else 0.0
                rank += 1
        if rank < n_components:
            warnings.warn(
                f"protocol {name!r}: corpus rank {rank} < {n_components}; basis zero-padded",
                RuntimeWarning,
            )
        components[name] = basis
        means[name] = mu
        explained[name] = frac
    return PcaBasis(
        protocol_names=tuple(corpus.keys()), components=components, means=means, explained=explained
    )


def _lstsq_qr(basis: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients via QR; zero-padded columns get 0."""
    active = np.flatnonzero(np.any(basis != 0.0, axis=0))
    coef = np.zeros((basis.shape[1],) + y.shape[1:])
    if active.size:
        q, r = np.linalg.qr(basis[:, active])
        coef[active] = np.linalg.solve(r, q.T @ y)
    return coef


def project_traces(trace_sets, basis: PcaBasis) -> np.ndarray:
    """Least-squares coefficients of one simulation's traces on the basis.

    ``trace_sets`` maps protocol name to the concatenated sweep trace (or is
    an iterable of TraceSet objects). Returns the coefficients in
    ``basis.protocol_names`` order, 5 per protocol.
    """
    if not isinstance(trace_sets, dict):
        trace_sets = {ts.protocol_name: ts.concatenated() for ts in trace_sets}
    out = []
    for name in basis.protocol_names:
        if name not in trace_sets:
            raise InputError(f"missing traces for protocol {name!r}")
        y = np.asarray(trace_sets[name], dtype=float).ravel()
        b = basis.components[name]
        if y.shape[0] != b.shape[0]:
            raise InputError(
                f"protocol {name!r}: trace length {y.shape[0]} != basis rows {b.shape[0]}"
            )
        out.append(_lstsq_qr(b, y - basis.means[name]))
    return np.concatenate(out)


def project_traces_batch(trace_matrices: dict, basis: PcaBasis) -> np.ndarray:
    """Batched projection: per protocol an (n, T) matrix -> (n, 5k) summaries."""
    blocks = []
    for name in basis.protocol_names:
        mat = np.asarray(trace_matrices[name], dtype=float)
        b = basis.components[name]
        if mat.shape[1] != b.shape[0]:
            raise InputError(
                f"protocol {name!r}: trace length {mat.shape[1]} != basis rows {b.shape[0]}"
            )
        blocks.append(_lstsq_qr(b, (mat - basis.means[name]).T).T)
    return np.hstack(blocks)
