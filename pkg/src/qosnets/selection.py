"""Choose ``n`` multipliers and assign them to (operating point, layer) pairs.

Each layer's column of normalized error stds, divided by the layer's tolerated
noise, is its preference vector: entries below one mark multipliers accurate
enough for that layer.  Vectors are scaled once per operating point,
compressed above one with ``1 + ln x``, and clustered with k-means into ``n``
groups; every group then uses the cheapest multiplier its centroid deems
accurate enough.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .am_models import AmLibrary
from .error_stats import ErrorMatrix

PLAN_FORMAT = "qosnets-plan/1"


@dataclass(frozen=True)
class PreferenceVector:
    values: np.ndarray
    layer: int
    op_point: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if (self.values < 0).any():
            raise ValueError("preference values must be non-negative")


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple[float, ...]

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales or min(scales) <= 0:
            raise ValueError("scale set must contain at least one positive scale")
        object.__setattr__(self, "scales", scales)

    def __len__(self):
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)


@dataclass
class ClusteringResult:
    centroids: np.ndarray  # (n, m')
    labels: np.ndarray  # cluster id per input point
    inertia: float
    n_iter: int = 0


def _as_sigma(a) -> np.ndarray:
    return np.asarray(getattr(a, "sigma", getattr(a, "sigma_e", a)), dtype=np.float64)


def discard_useless_ams(sigma_e, sigma_g, min_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Drop multipliers whose error std reaches the tolerance on every layer.

    With operating-point scaling, a multiplier can only become feasible at the
    smallest scale, so the test is ``min_scale * sigma_e >= sigma_g``.
    Returns the reduced (l, m') matrix and the surviving column indices.
    """
    se, sg = _as_sigma(sigma_e), _as_sigma(sigma_g)
    if se.ndim != 2 or se.shape[0] != sg.shape[0]:
        raise ValueError(f"error matrix {se.shape} does not match {sg.shape[0]} layers")
    if not min_scale > 0:
        raise ValueError("min_scale must be positive")
    keep = (min_scale * se < sg[:, None]).any(axis=0)
    keep[0] = True
    idx = np.flatnonzero(keep)
    return se[:, idx], idx


def preference_vectors(sigma_e_reduced, sigma_g) -> list[PreferenceVector]:
    se, sg = _as_sigma(sigma_e_reduced), _as_sigma(sigma_g)
    if (sg <= 0).any():
        raise ValueError("tolerated noise must be positive for every layer")
    return [PreferenceVector(se[k] / sg[k], layer=k) for k in range(se.shape[0])]


def reweight_values(x) -> np.ndarray:
    """Identity up to 1, ``1 + ln x`` above."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 1.0, x, 1.0 + np.log(np.maximum(x, 1.0)))


def reweight(v: PreferenceVector) -> PreferenceVector:
    return PreferenceVector(reweight_values(v.values), v.layer, v.op_point)


def expand_operating_points(C: list[PreferenceVector], S) -> list[PreferenceVector]:
    """One scaled-then-reweighted copy of every layer vector per operating point.

    Output order is operating-point major: all layers of op 0, then op 1, ...
    """
    S = S if isinstance(S, ScaleSet) else ScaleSet(tuple(S))
    return [PreferenceVector(reweight_values(s * v.values), v.layer, op)
            for op, s in enumerate(S) for v in C]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.square(points[:, None, :] - centroids[None, :, :]).sum(-1)


def _kmeans_pp(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(points)))]
    d2 = _sq_dists(points, points[centers]).min(1)
    for _ in range(1, n):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(len(points), p=d2 / total))
        else:
            nxt = int(rng.integers(len(points)))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[centers].copy()


def _repair_empty(labels: np.ndarray, d2: np.ndarray, n: int) -> np.ndarray:
    labels = labels.copy()
    for c in range(n):
        if (labels == c).any():
            continue
        counts = np.bincount(labels, minlength=n)
        dist = d2[np.arange(len(labels)), labels]
        movable = counts[labels] > 1
        far = np.flatnonzero(movable)[np.argmax(dist[movable])]
        labels[far] = c
    return labels


def _lloyd(pts: np.ndarray, n: int, rng: np.random.Generator, max_iter: int, tol: float):
    centroids = _kmeans_pp(pts, n, rng)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(pts, centroids)
        labels = _repair_empty(d2.argmin(1), d2, n)
        new = np.stack([pts[labels == c].mean(0) for c in range(n)])
        shift = np.sqrt(np.square(new - centroids).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(pts, centroids)
    labels = _repair_empty(d2.argmin(1), d2, n)
    inertia = float(d2[np.arange(len(pts)), labels].sum())
    return ClusteringResult(centroids, labels, inertia, it)


def kmeans(points, n: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
           n_init: int = 10) -> ClusteringResult:
    """Lloyd's algorithm with k-means++ seeding; Euclidean, deterministic per seed.

    Runs ``n_init`` seeded restarts from one RNG stream and keeps the lowest
    inertia (earliest run on ties).  A cluster that runs empty takes over the
    point farthest from its own centroid, among points whose cluster keeps at
    least one member.
    """
    pts = np.asarray([getattr(p, "values", p) for p in points], dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must form an (N, d) array")
    if n < 1 or n > len(pts):
        raise ValueError(f"cannot form {n} clusters from {len(pts)} points")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(pts, n, rng, max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def choose_am_per_centroid(centroids, surviving, library: AmLibrary) -> list[str]:
    """Cheapest multiplier with centroid entry < 1 (ties by name); else the most accurate."""
    surviving = np.asarray(surviving, dtype=np.int64)
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if centroids.shape[1] != len(surviving):
        raise ValueError("centroid dimension must equal the number of surviving multipliers")
    names = []
    for c in centroids:
        feasible = np.flatnonzero(c < 1.0)
        if feasible.size:
            best = min(feasible, key=lambda j: (library[surviving[j]].relative_power,
                                                library[surviving[j]].name))
        else:
            best = int(np.argmin(c))
        names.append(library[surviving[best]].name)
    return names


@dataclass
class OperatingPlan:
    cluster_ams: list[str]  # multiplier picked for each cluster
    assignment: dict[tuple[int, int], str]  # (op_point, layer) -> multiplier name
    scale_set: ScaleSet
    sigma_g: np.ndarray
    n: int
    n_layers: int
    relative_power: list[float] | None = None
    provenance: dict = field(default_factory=dict)
    matrices: dict = field(default_factory=dict)

    @property
    def ams(self) -> list[str]:
        """Distinct multipliers in use, in cluster order."""
        return list(dict.fromkeys(self.cluster_ams))

    @property
    def o(self) -> int:
        return len(self.scale_set)

    def layer_ams(self, op: int) -> list[str]:
        if not 0 <= op < self.o:
            raise IndexError(f"operating point {op} out of range (o={self.o})")
        return [self.assignment[(op, k)] for k in range(self.n_layers)]

    def to_json(self) -> str:
        doc = {
            "format": PLAN_FORMAT,
            "n": self.n,
            "n_layers": self.n_layers,
            "ams": self.ams,
            "cluster_ams": self.cluster_ams,
            "scale_set": list(self.scale_set.scales),
            "sigma_g": [float(v) for v in self.sigma_g],
            "assignment": [{"op": op, "layer": k, "am": self.assignment[(op, k)]}
                           for op in range(self.o) for k in range(self.n_layers)],
            "relative_power": self.relative_power,
            "provenance": self.provenance,
            "matrices": self.matrices,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "OperatingPlan":
        doc = json.loads(text)
        if doc.get("format") != PLAN_FORMAT:
            raise ValueError(f"not a complete operating plan (format={doc.get('format')!r})")
        assignment = {(int(r["op"]), int(r["layer"])): r["am"] for r in doc["assignment"]}
        return cls(doc["cluster_ams"], assignment, ScaleSet(tuple(doc["scale_set"])),
                   np.asarray(doc["sigma_g"], dtype=np.float64), int(doc["n"]), int(doc["n_layers"]),
                   doc.get("relative_power"), doc.get("provenance", {}), doc.get("matrices", {}))


def build_plan(clustering: ClusteringResult, vectors: list[PreferenceVector], chosen_ams: list[str],
               S, sigma_g, provenance: dict | None = None) -> OperatingPlan:
    S = S if isinstance(S, ScaleSet) else ScaleSet(tuple(S))
    assignment = {(v.op_point, v.layer): chosen_ams[int(c)] for v, c in zip(vectors, clustering.labels)}
    n_layers = 1 + max(v.layer for v in vectors)
    missing = [(op, k) for op in range(len(S)) for k in range(n_layers) if (op, k) not in assignment]
    if missing:
        raise ValueError(f"clustering left pairs unassigned: {missing}")
    return OperatingPlan(list(chosen_ams), assignment, S, _as_sigma(sigma_g).copy(),
                         len(chosen_ams), n_layers, provenance=dict(provenance or {}))


def _matrices_doc(sigma_e, library: AmLibrary, surviving) -> dict:
    doc = {"am_names": library.names, "surviving": [library.names[i] for i in surviving]}
    if isinstance(sigma_e, ErrorMatrix):
        doc["sigma_e"] = sigma_e.sigma_e.tolist()
        doc["mu_e"] = sigma_e.mu_e.tolist()
        doc["sample_count"] = sigma_e.sample_count
    else:
        doc["sigma_e"] = _as_sigma(sigma_e).tolist()
    return doc


def select(sigma_e, sigma_g, library: AmLibrary, S=(1.0,), n: int = 4, seed: int = 0,
           max_iter: int = 100, tol: float = 1e-6, n_init: int = 10) -> OperatingPlan:
    """Full selection: discard, normalize, scale per op point, reweight, cluster, pick."""
    S = S if isinstance(S, ScaleSet) else ScaleSet(tuple(S))
    reduced, surviving = discard_useless_ams(sigma_e, sigma_g, min(S))
    C = preference_vectors(reduced, sigma_g)
    vectors = expand_operating_points(C, S)
    clustering = kmeans(vectors, n, seed=seed, max_iter=max_iter, tol=tol, n_init=n_init)
    chosen = choose_am_per_centroid(clustering.centroids, surviving, library)
    prov = {"seed": seed, "n": n, "inertia": clustering.inertia, "iterations": clustering.n_iter}
    plan = build_plan(clustering, vectors, chosen, S, sigma_g, prov)
    plan.matrices = _matrices_doc(sigma_e, library, surviving)
    return plan


def select_single(sigma_e, sigma_g, library: AmLibrary, n: int = 4, seed: int = 0,
                  max_iter: int = 100, tol: float = 1e-6, n_init: int = 10) -> OperatingPlan:
    """Single-operating-point selection: cluster the reweighted layer vectors directly."""
    reduced, surviving = discard_useless_ams(sigma_e, sigma_g)
    C = [reweight(v) for v in preference_vectors(reduced, sigma_g)]
    clustering = kmeans(C, n, seed=seed, max_iter=max_iter, tol=tol, n_init=n_init)
    chosen = choose_am_per_centroid(clustering.centroids, surviving, library)
    prov = {"seed": seed, "n": n, "inertia": clustering.inertia, "iterations": clustering.n_iter}
    plan = build_plan(clustering, C, chosen, ScaleSet((1.0,)), sigma_g, prov)
    plan.matrices = _matrices_doc(sigma_e, library, surviving)
    return plan


def per_layer_choice(sigma_e, sigma_g, library: AmLibrary, S=(1.0,)) -> dict[tuple[int, int], str]:
    """Unconstrained matching: each (op point, layer) takes its own cheapest feasible multiplier."""
    S = S if isinstance(S, ScaleSet) else ScaleSet(tuple(S))
    reduced, surviving = discard_useless_ams(sigma_e, sigma_g, min(S))
    vectors = expand_operating_points(preference_vectors(reduced, sigma_g), S)
    picks = choose_am_per_centroid(np.stack([v.values for v in vectors]), surviving, library)
    return {(v.op_point, v.layer): name for v, name in zip(vectors, picks)}


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
