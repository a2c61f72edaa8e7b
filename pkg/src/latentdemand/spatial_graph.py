"""Station clustering and graph construction for the spatial model.

Stations are grouped into k regions with Lloyd's algorithm on raw
(lat, lon) degrees; region centroids become graph nodes. Edge weights
decay exponentially with the great-circle distance between centroids, and
the adjacency is symmetrically normalized with self-connections added.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

EARTH_RADIUS_KM = 6371.0


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometres (Earth radius 6371.0 km)."""
    p1 = math.radians(lat1)
    p2 = math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return EARTH_RADIUS_KM * 2.0 * math.asin(min(1.0, math.sqrt(a)))


def haversine_matrix(lats1, lons1, lats2, lons2) -> np.ndarray:
    """Pairwise great-circle distances (km) between two coordinate sets."""
    p1 = np.radians(np.asarray(lats1, dtype=float))[:, None]
    l1 = np.radians(np.asarray(lons1, dtype=float))[:, None]
    p2 = np.radians(np.asarray(lats2, dtype=float))[None, :]
    l2 = np.radians(np.asarray(lons2, dtype=float))[None, :]
    a = np.sin((p2 - p1) / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2.0) ** 2
    return EARTH_RADIUS_KM * 2.0 * np.arcsin(np.minimum(1.0, np.sqrt(a)))


@dataclass
class ClusterAssignment:
    """k-means result: centroids in (lat, lon) and a station -> cluster map."""

    k: int
    centroids: np.ndarray  # (k, 2) rows of (lat, lon)
    station_to_cluster: dict[str, int]
    inertia: float

    def labels_for(self, station_ids) -> np.ndarray:
        return np.array([self.station_to_cluster[s] for s in station_ids], dtype=int)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["station_id", "cluster"])
            for sid in sorted(self.station_to_cluster):
                w.writerow([sid, self.station_to_cluster[sid]])


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # Standard k-means++ seeding in degree space.
    n = points.shape[0]
    centroids = np.empty((k, 2), dtype=float)
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j:] = points[rng.integers(n, size=k - j)]
            break
        probs = d2 / total
        centroids[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int) -> tuple[np.ndarray, np.ndarray, float]:
    centroids = _kmeans_pp_init(points, k, rng)
    labels = np.full(len(points), -1, dtype=int)
    for _ in range(max_iters):
        d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        for j in range(k):
            members = points[new_labels == j]
            if len(members) == 0:
                # Re-seed to the globally worst-assigned point.
                worst = int(np.argmax(d2[np.arange(len(points)), new_labels]))
                centroids[j] = points[worst]
                new_labels[worst] = j
            else:
                centroids[j] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    # Recompute the means so each centroid is exactly its members' mean.
    for j in range(k):
        members = points[labels == j]
        if len(members):
            centroids[j] = members.mean(axis=0)
    inertia = float(np.sum((points - centroids[labels]) ** 2))
    return centroids, labels, inertia


def kmeans_cluster(stations, k: int, seed: int = 0, max_iters: int = 100,
                   n_init: int = 10) -> ClusterAssignment:
    """Lloyd iterations on (lat, lon) until the assignment stops changing.

    Runs n_init k-means++ starts (sub-seeded from `seed`) and keeps the
    lowest-inertia result; a single start lands in a noticeably bad local
    optimum often enough to matter. Empty clusters are re-seeded to the
    point farthest from its assigned centroid. Deterministic for a fixed
    seed.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    ids = [s.station_id for s in stations]
    points = np.array([[s.lat, s.lon] for s in stations], dtype=float)
    if len(stations) < k:
        raise ValidationError(f"need at least k={k} stations, got {len(stations)}")
    best = None
    for restart in range(max(1, n_init)):
        rng = np.random.default_rng([seed, restart])
        result = _lloyd(points, k, rng, max_iters)
        if best is None or result[2] < best[2]:
            best = result
    centroids, labels, inertia = best
    return ClusterAssignment(
        k=k,
        centroids=centroids.copy(),
        station_to_cluster={sid: int(lbl) for sid, lbl in zip(ids, labels)},
        inertia=inertia,
    )


@dataclass
class AdjacencyPair:
    """Raw kernel adjacency and its self-connected, symmetrically
    normalized counterpart used by the graph convolutions."""

    raw: np.ndarray         # (k, k), zero diagonal
    normalized: np.ndarray  # (k, k)

    def save_csv(self, path) -> None:
        np.savetxt(path, self.normalized, delimiter=",")


def build_adjacency(centroids, bandwidth_km: float = 1.0) -> AdjacencyPair:
    """Distance-kernel graph over centroids: weight exp(-d/bandwidth).

    The normalized matrix adds self-connections and rescales each side by
    the inverse square root of the degree, so its spectrum stays in [-1, 1].
    ``bandwidth_km`` defaults to 1.0, i.e. a plain exp(-d) kernel with d in
    kilometres; larger values keep sparse desk-scale graphs connected.
    """
    centroids = np.asarray(centroids, dtype=float).reshape(-1, 2)
    if centroids.shape[0] < 1:
        raise ValidationError("need at least one centroid")
    if bandwidth_km <= 0:
        raise ValidationError(f"bandwidth_km must be > 0, got {bandwidth_km}")
    dists = haversine_matrix(centroids[:, 0], centroids[:, 1], centroids[:, 0], centroids[:, 1])
    raw = np.exp(-dists / bandwidth_km)
    np.fill_diagonal(raw, 0.0)
    with_self = raw + np.eye(centroids.shape[0])
    inv_sqrt_deg = 1.0 / np.sqrt(with_self.sum(axis=1))
    normalized = with_self * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    return AdjacencyPair(raw=raw, normalized=normalized)
