"""Synthetic RTT worlds and trace I/O.

A world is a rows x cols grid of subregions. Every vertex carries one
log-normal RTT distribution per latent class, and its latent class drifts
from slot to slot according to a shared Markov chain. Spatial structure
enters twice: the per-vertex log-median offsets are a blend of a smooth
field and white noise, and class transitions are sampled through a
Gaussian copula whose latent field is smooth over the grid, so neighbours
tend to move together while each vertex's marginal transitions follow the
chain exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, TraceParseError, ValidationError

PING_INTERVAL_MS = 500
CSV_HEADER = ["vertex_id", "slot", "timestamp_ms", "rtt_ms"]

# Log-space medians/spreads chosen so that class c's distribution meets
# service level c (class 3 meets none); see stats.classify_service_level.
_DEFAULT_MEDIANS_MS = (40.0, 60.0, 80.0, 130.0)
_DEFAULT_SIGMAS = (0.20, 0.17, 0.15, 0.25)

# RNG stream ids, mixed into the seed sequence.
_STREAM_PARAMS = 0
_STREAM_INIT = 1
_STREAM_DRIFT = 2
_STREAM_SAMPLES = 3


@dataclass(frozen=True, slots=True)
class LatencySample:
    vertex_id: int
    slot: int
    timestamp_ms: int
    rtt_ms: float
    lat: float | None = None
    lon: float | None = None


def default_drift_chain(k: int, stay: float = 0.9) -> np.ndarray:
    """Birth-death chain: stay with ``stay``, otherwise step to an adjacent class."""
    chain = np.zeros((k, k))
    for c in range(k):
        nbrs = [d for d in (c - 1, c + 1) if 0 <= d < k]
        chain[c, c] = stay
        for d in nbrs:
            chain[c, d] = (1.0 - stay) / len(nbrs)
    return chain


def default_dist_params(k: int) -> dict:
    if k == len(_DEFAULT_MEDIANS_MS):
        medians, sigmas = _DEFAULT_MEDIANS_MS, _DEFAULT_SIGMAS
    else:
        medians = tuple(40.0 + 30.0 * c for c in range(k))
        sigmas = (0.2,) * k
    return {"mu": [math.log(m) for m in medians], "sigma": list(sigmas), "jitter": 0.025}


@dataclass
class WorldConfig:
    rows: int
    cols: int
    k_classes: int = 4
    drift_chain: np.ndarray | None = None
    spatial_correlation: float = 0.8
    dist_params: dict | None = None
    seed: int = 0
    smoothing_steps: int = 10

    def __post_init__(self):
        if self.drift_chain is None:
            self.drift_chain = default_drift_chain(self.k_classes)
        self.drift_chain = np.asarray(self.drift_chain, dtype=float)
        if self.dist_params is None:
            self.dist_params = default_dist_params(self.k_classes)

    @property
    def n_vertices(self) -> int:
        return self.rows * self.cols

    def validate(self) -> None:
        k = self.k_classes
        if self.rows < 1 or self.cols < 1 or self.n_vertices < 2:
            raise ConfigError(f"need at least 2 vertices, got grid {self.rows}x{self.cols}")
        if k < 2:
            raise ConfigError(f"k_classes must be >= 2, got {k}")
        chain = self.drift_chain
        if chain.shape != (k, k):
            raise ConfigError(f"drift_chain must be {k}x{k}, got {chain.shape}")
        if np.any(chain < 0) or np.any(np.abs(chain.sum(axis=1) - 1.0) > 1e-12):
            raise ConfigError("drift_chain rows must be non-negative and sum to 1")
        if not 0.0 <= self.spatial_correlation <= 1.0:
            raise ConfigError("spatial_correlation must lie in [0, 1]")
        mu = self.dist_params.get("mu")
        sigma = self.dist_params.get("sigma")
        if mu is None or sigma is None or len(mu) != k or len(sigma) != k:
            raise ConfigError(f"dist_params needs 'mu' and 'sigma' lists of length {k}")
        if any(s <= 0 for s in sigma):
            raise ConfigError("dist_params sigma entries must be positive")
        if self.dist_params.get("jitter", 0.0) < 0:
            raise ConfigError("dist_params jitter must be non-negative")
        if self.smoothing_steps < 0:
            raise ConfigError("smoothing_steps must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_vertices": self.n_vertices,
            "grid": {"rows": self.rows, "cols": self.cols},
            "k_classes": self.k_classes,
            "drift_chain": self.drift_chain.tolist(),
            "spatial_correlation": self.spatial_correlation,
            "dist_params": dict(self.dist_params),
            "seed": self.seed,
            "smoothing_steps": self.smoothing_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        grid = d.get("grid")
        n = d.get("n_vertices")
        if grid is None:
            if n is None:
                raise ConfigError("world config needs 'grid' or 'n_vertices'")
            rows = max(r for r in range(1, int(math.isqrt(n)) + 1) if n % r == 0)
            grid = {"rows": rows, "cols": n // rows}
        try:
            rows, cols = int(grid["rows"]), int(grid["cols"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid spec: {grid!r}") from exc
        if n is not None and int(n) != rows * cols:
            raise ConfigError(f"n_vertices={n} does not match grid {rows}x{cols}")
        k = int(d.get("k_classes", 4))
        cfg = cls(
            rows=rows,
            cols=cols,
            k_classes=k,
            drift_chain=d.get("drift_chain"),
            spatial_correlation=float(d.get("spatial_correlation", 0.8)),
            dist_params=d.get("dist_params"),
            seed=int(d.get("seed", 0)),
            smoothing_steps=int(d.get("smoothing_steps", 10)),
        )
        return cfg


def grid_adjacency(rows: int, cols: int) -> np.ndarray:
    """Rook-neighbour relation on a row-major grid."""
    n = rows * cols
    adj = np.zeros((n, n), dtype=bool)
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                adj[i, i + 1] = adj[i + 1, i] = True
            if r + 1 < rows:
                adj[i, i + cols] = adj[i + cols, i] = True
    return adj


def smoothing_operator(adj: np.ndarray, steps: int) -> np.ndarray:
    """Linear map taking white noise to a smooth field with unit marginal variance.

    ``steps`` rounds of lazy neighbour averaging; rows are scaled to unit
    L2 norm so each output coordinate is exactly N(0, 1) for N(0, I) input.
    """
    n = adj.shape[0]
    deg = adj.sum(axis=1, keepdims=True)
    walk = 0.5 * np.eye(n) + 0.5 * np.where(deg > 0, adj / np.maximum(deg, 1), 0.0)
    walk[deg[:, 0] == 0, :] = np.eye(n)[deg[:, 0] == 0]
    op = np.linalg.matrix_power(walk, steps) if steps else np.eye(n)
    return op / np.linalg.norm(op, axis=1, keepdims=True)


def stationary_distribution(chain: np.ndarray, squarings: int = 64) -> np.ndarray:
    """Long-run distribution of the chain started from uniform.

    Iterates the lazy chain (I + P) / 2, which has the same stationary
    distributions but is aperiodic, by repeated squaring; this is well
    defined for periodic and reducible chains too.
    """
    k = chain.shape[0]
    power = 0.5 * (np.eye(k) + np.asarray(chain, dtype=float))
    for _ in range(squarings):
        power = power @ power
        power /= power.sum(axis=1, keepdims=True)
    p = np.full(k, 1.0 / k) @ power
    return p / p.sum()


def _rng(seed: int, stream: int, slot: int | None = None) -> np.random.Generator:
    key = [seed, stream] if slot is None else [seed, stream, slot]
    return np.random.default_rng(key)


@dataclass
class SimWorld:
    config: WorldConfig
    adjacency: np.ndarray
    offsets: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    _smoother: np.ndarray = field(repr=False)
    _classes: list = field(default_factory=list, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.config.n_vertices

    @property
    def k_classes(self) -> int:
        return self.config.k_classes

    @property
    def drift_chain(self) -> np.ndarray:
        return self.config.drift_chain

    def _copula_uniforms(self, rng: np.random.Generator) -> np.ndarray:
        rho = self.config.spatial_correlation
        n = self.n_vertices
        smooth = self._smoother @ rng.standard_normal(n)
        white = rng.standard_normal(n)
        return ndtr(math.sqrt(rho) * smooth + math.sqrt(1.0 - rho) * white)

    def _initial_classes(self) -> np.ndarray:
        pi = stationary_distribution(self.drift_chain)
        u = self._copula_uniforms(_rng(self.config.seed, _STREAM_INIT))
        return np.minimum(np.searchsorted(np.cumsum(pi), u, side="right"), self.k_classes - 1)

    def _step(self, classes: np.ndarray, slot: int) -> np.ndarray:
        cum = np.cumsum(self.drift_chain, axis=1)[classes]
        u = self._copula_uniforms(_rng(self.config.seed, _STREAM_DRIFT, slot))
        nxt = (u[:, None] >= cum).sum(axis=1)
        return np.minimum(nxt, self.k_classes - 1)

    def classes_at(self, slot: int) -> np.ndarray:
        """True latent class of every vertex at ``slot`` (a copy)."""
        if slot < 0:
            raise ValueError("slot must be non-negative")
        if not self._classes:
            self._classes.append(self._initial_classes())
        while len(self._classes) <= slot:
            t = len(self._classes)
            self._classes.append(self._step(self._classes[-1], t))
        return self._classes[slot].copy()

    def class_trajectory(self, n_slots: int) -> np.ndarray:
        if n_slots == 0:
            return np.zeros((0, self.n_vertices), dtype=int)
        self.classes_at(n_slots - 1)
        return np.array(self._classes[:n_slots])

    def sample_matrix(self, slot: int, samples_per_vertex: int) -> np.ndarray:
        """N x samples_per_vertex RTT draws (ms) for ``slot``."""
        if samples_per_vertex < 1:
            raise ValueError("samples_per_vertex must be >= 1")
        cls = self.classes_at(slot)
        idx = np.arange(self.n_vertices)
        mu = self.mu[idx, cls][:, None]
        sigma = self.sigma[idx, cls][:, None]
        z = _rng(self.config.seed, _STREAM_SAMPLES, slot).standard_normal(
            (self.n_vertices, samples_per_vertex)
        )
        return np.exp(mu + sigma * z)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "offsets": self.offsets.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
        }


def generate_world(config: WorldConfig) -> SimWorld:
    config.validate()
    adj = grid_adjacency(config.rows, config.cols)
    smoother = smoothing_operator(adj, config.smoothing_steps)
    n, rho = config.n_vertices, config.spatial_correlation
    rng = _rng(config.seed, _STREAM_PARAMS)
    smooth = smoother @ rng.standard_normal(n)
    white = rng.standard_normal(n)
    offsets = rho * smooth + (1.0 - rho) * white
    jitter = float(config.dist_params.get("jitter", 0.0))
    base_mu = np.asarray(config.dist_params["mu"], dtype=float)
    base_sigma = np.asarray(config.dist_params["sigma"], dtype=float)
    mu = base_mu[None, :] + jitter * np.clip(offsets, -2.0, 2.0)[:, None]
    sigma = np.broadcast_to(base_sigma, (n, config.k_classes)).copy()
    return SimWorld(config, adj, offsets, mu, sigma, smoother)


def world_from_dict(d: dict) -> SimWorld:
    """Rebuild a world from ``SimWorld.to_dict`` output or a bare config dict."""
    cfg = WorldConfig.from_dict(d.get("config", d))
    return generate_world(cfg)


def sample_slot(world: SimWorld, slot: int, samples_per_vertex: int) -> list[LatencySample]:
    rtts = world.sample_matrix(slot, samples_per_vertex)
    return [
        LatencySample(v, slot, k * PING_INTERVAL_MS, float(rtts[v, k]))
        for v in range(world.n_vertices)
        for k in range(samples_per_vertex)
    ]


def _parse_row(lineno: int, row: list[str]) -> LatencySample:
    if len(row) not in (4, 6):
        raise TraceParseError(lineno, f"expected 4 or 6 fields, got {len(row)}")
    try:
        vertex, slot, ts = int(row[0]), int(row[1]), int(row[2])
        rtt = float(row[3])
        lat = float(row[4]) if len(row) == 6 and row[4] != "" else None
        lon = float(row[5]) if len(row) == 6 and row[5] != "" else None
    except ValueError as exc:
        raise TraceParseError(lineno, str(exc)) from exc
    if not rtt > 0 or not math.isfinite(rtt):
        raise ValidationError(f"line {lineno}: rtt_ms must be positive, got {row[3]}")
    if vertex < 0 or slot < 0 or ts < 0:
        raise ValidationError(f"line {lineno}: vertex_id, slot and timestamp_ms must be >= 0")
    return LatencySample(vertex, slot, ts, rtt, lat, lon)


def ingest_csv(path: str | Path) -> list[LatencySample]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != CSV_HEADER:
            raise TraceParseError(1, f"header must start with {','.join(CSV_HEADER)}")
        return [_parse_row(reader.line_num, row) for row in reader if row]


def write_csv(path: str | Path, samples: Iterable[LatencySample]) -> None:
    samples = list(samples)
    geo = any(s.lat is not None or s.lon is not None for s in samples)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + (["lat", "lon"] if geo else []))
        for s in samples:
            row = [s.vertex_id, s.slot, s.timestamp_ms, repr(s.rtt_ms)]
            if geo:
                row += ["" if s.lat is None else repr(s.lat), "" if s.lon is None else repr(s.lon)]
            w.writerow(row)


def group_by_vertex(samples: Sequence[LatencySample], n_vertices: int | None = None) -> list[np.ndarray]:
    """Per-vertex RTT arrays in file order."""
    if n_vertices is None:
        n_vertices = 1 + max((s.vertex_id for s in samples), default=-1)
    buckets: list[list[float]] = [[] for _ in range(n_vertices)]
    for s in samples:
        if s.vertex_id >= n_vertices:
            raise ValidationError(f"vertex_id {s.vertex_id} out of range for N={n_vertices}")
        buckets[s.vertex_id].append(s.rtt_ms)
    return [np.asarray(b, dtype=float) for b in buckets]


def load_world_config(path: str | Path) -> WorldConfig:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return WorldConfig.from_dict(data.get("world", data))
