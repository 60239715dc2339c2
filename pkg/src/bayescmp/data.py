"""Columnar sample containers and their on-disk format.

A dataset is stored as a single ``.npz`` with one array per column (model
index, parameters padded to the maximum arity, raw data where kept, and
summaries) plus a JSON side-car ``<stem>.meta.json`` holding seed,
hyperparameters and scenario name. Channel datasets drop the raw traces and
keep only the 25 projected summaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, MissingArtifactError


@dataclass(frozen=True)
class LabeledSample:
    """One draw from the joint generative process."""

    model_index: int
    params: np.ndarray
    summary: np.ndarray
    raw: np.ndarray | None = None


@dataclass
class Dataset:
    """Column-oriented set of labeled samples.

    ``params`` is zero-padded to the maximum parameter arity; ``param_dim``
    records the true arity per row. ``raw`` holds the original data vectors
    (counts) or is None when raw data is not retained (channel traces).
    """

    model_idx: np.ndarray
    params: np.ndarray
    param_dim: np.ndarray
    summaries: np.ndarray
    raw: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.model_idx.shape[0]
        for name in ("params", "param_dim", "summaries"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise InputError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.raw is not None and self.raw.shape[0] != n:
            raise InputError(f"raw has {self.raw.shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return int(self.model_idx.shape[0])

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(
            model_index=int(self.model_idx[i]),
            params=self.params[i, : int(self.param_dim[i])].copy(),
            summary=self.summaries[i].copy(),
            raw=None if self.raw is None else self.raw[i].copy(),
        )

    def samples(self):
        for i in range(len(self)):
            yield self.sample(i)

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            model_idx=self.model_idx[mask],
            params=self.params[mask],
            param_dim=self.param_dim[mask],
            summaries=self.summaries[mask],
            raw=None if self.raw is None else self.raw[mask],
            meta=dict(self.meta),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = {
            "model_idx": self.model_idx,
            "params": self.params,
            "param_dim": self.param_dim,
            "summaries": self.summaries,
        }
        if self.raw is not None:
            cols["raw"] = self.raw
        np.savez(path, **cols)
        sidecar = path.with_suffix(".meta.json")
        sidecar.write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"dataset file not found: {path}")
        with np.load(path) as z:
            raw = z["raw"] if "raw" in z.files else None
            ds = cls(
                model_idx=z["model_idx"],
                params=z["params"],
                param_dim=z["param_dim"],
                summaries=z["summaries"],
                raw=raw,
            )
        sidecar = path.with_suffix(".meta.json")
        if sidecar.exists():
            ds.meta = json.loads(sidecar.read_text())
        return ds
