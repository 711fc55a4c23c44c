"""Latency graph assembly: JS-pruned road edges, propagation matrix, features."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, ShapeError, ValidationError
from .stats import EmpiricalPdf, js_divergence

UNOBSERVED = -1
MASK_NAMES = ("train", "val", "test")
DEFAULT_ETA = 0.25


@dataclass(frozen=True)
class LatencyGraph:
    adjacency: np.ndarray
    edge_weights: dict
    features: np.ndarray
    labels: np.ndarray
    masks: dict = field(default_factory=dict)
    norm_constant: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        n = a.shape[0]
        if a.shape != (n, n) or not np.array_equal(a, a.T) or a.diagonal().any():
            raise ValidationError("adjacency must be square, symmetric, zero-diagonal")
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ShapeError(f"features must have {n} rows, got shape {feats.shape}")
        labels = np.asarray(self.labels, dtype=int)
        if labels.shape != (n,):
            raise ShapeError(f"labels must have length {n}")
        masks = {}
        for name in MASK_NAMES:
            m = self.masks.get(name)
            masks[name] = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
            if masks[name].shape != (n,):
                raise ShapeError(f"mask {name!r} must have length {n}")
        if (masks["train"] & masks["val"]).any() or (masks["train"] & masks["test"]).any() \
                or (masks["val"] & masks["test"]).any():
            raise ValidationError("train/val/test masks must be disjoint")
        for name in ("train", "val"):
            if (labels[masks[name]] == UNOBSERVED).any():
                raise ValidationError(f"{name} mask selects unlabelled vertices")
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "masks", masks)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency))
        return list(zip(i.tolist(), j.tolist()))

    def with_labels(self, labels, masks=None, features=None) -> "LatencyGraph":
        changes = {"labels": labels}
        if masks is not None:
            changes["masks"] = masks
        if features is not None:
            changes["features"] = features
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "edges": [[i, j, float(self.edge_weights.get((i, j), 0.0))] for i, j in self.edges],
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "masks": {k: np.nonzero(v)[0].tolist() for k, v in self.masks.items()},
            "norm_constant": self.norm_constant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyGraph":
        n = int(d["n"])
        adj = np.zeros((n, n), dtype=bool)
        weights = {}
        for i, j, w in d.get("edges", []):
            i, j = int(i), int(j)
            adj[i, j] = adj[j, i] = True
            weights[(min(i, j), max(i, j))] = float(w)
        masks = {}
        for name, idx in d.get("masks", {}).items():
            m = np.zeros(n, dtype=bool)
            m[np.asarray(idx, dtype=int)] = True
            masks[name] = m
        feats = np.asarray(d["features"], dtype=float).reshape(n, -1)
        return cls(adj, weights, feats, np.asarray(d["labels"], dtype=int), masks,
                   float(d.get("norm_constant", 1.0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LatencyGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _as_relation(neighbors, n: int) -> np.ndarray:
    rel = np.asarray(neighbors)
    if rel.ndim == 2 and rel.shape == (n, n):
        rel = rel.astype(bool)
    else:
        pairs = rel.reshape(-1, 2).astype(int) if rel.size else np.zeros((0, 2), dtype=int)
        rel = np.zeros((n, n), dtype=bool)
        rel[pairs[:, 0], pairs[:, 1]] = True
    rel = rel | rel.T
    np.fill_diagonal(rel, False)
    return rel


def build_graph(
    pdfs: Sequence[EmpiricalPdf],
    neighbors,
    eta: float,
    features,
    labels=None,
    masks=None,
    norm_constant: float = 1.0,
) -> LatencyGraph:
    """Link road neighbours whose RTT distributions have JS divergence below ``eta``.

    ``neighbors`` is either an N x N boolean matrix or a sequence of (i, j) pairs.
    """
    n = len(pdfs)
    if eta < 0:
        raise ValueError("eta must be non-negative")
    edges0 = pdfs[0].bin_edges if n else None
    for v, p in enumerate(pdfs):
        if not np.array_equal(p.bin_edges, edges0):
            raise ShapeError(f"vertex {v} PDF uses different bins")
    rel = _as_relation(neighbors, n)
    adj = np.zeros((n, n), dtype=bool)
    weights = {}
    for i, j in zip(*np.nonzero(np.triu(rel))):
        w = js_divergence(pdfs[i], pdfs[j])
        if w < eta:
            adj[i, j] = adj[j, i] = True
            weights[(int(i), int(j))] = w
    if labels is None:
        labels = np.full(n, UNOBSERVED)
    return LatencyGraph(adj, weights, features, labels, masks or {}, norm_constant)


def renormalize(adjacency) -> np.ndarray:
    """D~^-1/2 (A + I) D~^-1/2 for a symmetric, zero-diagonal A."""
    a = np.asarray(adjacency, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("adjacency must be square")
    if not np.array_equal(a, a.T):
        raise ValidationError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ValidationError("adjacency must have a zero diagonal")
    a_tilde = a + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return d[:, None] * a_tilde * d[None, :]


def norm_constant(samples: Sequence[np.ndarray], q: float = 99.0) -> float:
    """99th-percentile RTT of the pooled corpus."""
    pooled = np.concatenate([np.asarray(s, dtype=float).ravel() for s in samples]) if len(samples) else np.array([])
    if pooled.size == 0:
        raise InsufficientDataError("empty corpus")
    return float(np.percentile(pooled, q))


def build_features(samples: Sequence[np.ndarray], f_dim: int, norm: float | None = None) -> np.ndarray:
    """Row i holds the first ``f_dim`` RTTs of vertex i divided by ``norm``."""
    if f_dim < 1:
        raise ValueError("f_dim must be >= 1")
    for v, s in enumerate(samples):
        if len(s) < f_dim:
            raise InsufficientDataError(f"vertex {v} has {len(s)} samples, needs {f_dim}")
    if norm is None:
        norm = norm_constant(samples)
    return np.array([np.asarray(s[:f_dim], dtype=float) for s in samples]).reshape(len(samples), f_dim) / norm
