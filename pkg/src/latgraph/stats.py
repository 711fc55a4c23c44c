"""Empirical RTT distributions, divergences and service-level classification.

All logarithms are natural, so divergences are in nats and JS lies in
[0, ln 2].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ShapeError, ValidationError

DEFAULT_BIN_EDGES = np.linspace(0.0, 500.0, 65)


@dataclass(frozen=True)
class EmpiricalPdf:
    bin_edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if edges.ndim != 1 or probs.ndim != 1 or edges.size != probs.size + 1:
            raise ShapeError(f"need len(bin_edges) == len(probs) + 1, got {edges.size}, {probs.size}")
        if np.any(np.diff(edges) <= 0):
            raise ValidationError("bin_edges must be strictly increasing")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValidationError("probs must be non-negative and sum to 1")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "probs", probs)

    def to_dict(self) -> dict:
        return {"bin_edges": self.bin_edges.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EmpiricalPdf":
        return cls(np.asarray(d["bin_edges"]), np.asarray(d["probs"]))


def build_empirical_pdf(samples, bin_edges=DEFAULT_BIN_EDGES) -> EmpiricalPdf:
    """Normalised histogram; values outside the edges land in the end bins."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise InsufficientDataError("cannot build a PDF from zero samples")
    edges = np.asarray(bin_edges, dtype=float)
    nb = edges.size - 1
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, nb - 1)
    counts = np.bincount(idx, minlength=nb)
    return EmpiricalPdf(edges, counts / x.size)


def _check_same_bins(p: EmpiricalPdf, q: EmpiricalPdf) -> None:
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise ShapeError("PDFs are defined over different bins")


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def kl_divergence(p: EmpiricalPdf, q: EmpiricalPdf) -> float:
    """KL(p || q) in nats; ``math.inf`` when p has mass where q has none."""
    _check_same_bins(p, q)
    return _kl(p.probs, q.probs)


def js_divergence(p: EmpiricalPdf, q: EmpiricalPdf) -> float:
    _check_same_bins(p, q)
    total = p.probs + q.probs
    js = 0.0
    # KL(x || m) with m = (p + q) / 2, written via log(p + q) so a tiny x cannot underflow m to 0
    for x in (p.probs, q.probs):
        s = x > 0
        js += 0.5 * float(np.sum(x[s] * (math.log(2.0) + np.log(x[s]) - np.log(total[s]))))
    return min(max(js, 0.0), math.log(2.0))


def confidence(pdf: EmpiricalPdf, tau_ms: float) -> float:
    """Pr(RTT <= tau), treating mass as uniform within each bin."""
    if not tau_ms > 0:
        raise ValueError("tau_ms must be positive")
    lo, hi = pdf.bin_edges[:-1], pdf.bin_edges[1:]
    frac = np.clip((tau_ms - lo) / (hi - lo), 0.0, 1.0)
    return float(min(np.dot(pdf.probs, frac), 1.0))


class ServiceLevel(enum.Enum):
    """Service levels, strictest first. ``NONE`` means level 3 is not met."""

    L1 = (100.0, 0.9999)
    L2 = (100.0, 0.99)
    L3 = (120.0, 0.99)
    NONE = (math.inf, 0.0)

    @property
    def tau_ms(self) -> float:
        return self.value[0]

    @property
    def epsilon(self) -> float:
        return self.value[1]

    @property
    def class_index(self) -> int:
        return _LEVEL_ORDER.index(self)

    @classmethod
    def from_index(cls, idx: int) -> "ServiceLevel":
        return _LEVEL_ORDER[idx]


_LEVEL_ORDER = [ServiceLevel.L1, ServiceLevel.L2, ServiceLevel.L3, ServiceLevel.NONE]


def classify_service_level(pdf: EmpiricalPdf) -> ServiceLevel:
    for level in _LEVEL_ORDER[:-1]:
        if confidence(pdf, level.tau_ms) >= level.epsilon:
            return level
    return ServiceLevel.NONE
