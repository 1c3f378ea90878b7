"""Equivalence buckets and encoding-space cluster quality."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import speclang as sl


def equivalence_buckets(n_objectives: int, n_buckets: int = 8, per_bucket: int = 200, seed: int = 0,
                        max_atoms: int = 5, draws: int = 200_000) -> list[list[sl.SpecAst]]:
    """Sample ``per_bucket`` distinct specifications from each of the ``n_buckets`` largest fingerprint classes.

    Classes are ranked by how many distinct strings ``draws`` generator calls
    produced for them; ties break on first appearance.
    """
    rng = np.random.default_rng(seed)
    probes = sl.canonical_probes(n_objectives)
    seen: set[str] = set()
    groups: dict[bytes, list[sl.SpecAst]] = defaultdict(list)
    for _ in range(draws):
        ast = sl.generate(rng, n_objectives, max_atoms)
        text = sl.render(ast)
        if text in seen:
            continue
        seen.add(text)
        groups[sl.fingerprint_key(ast, probes)].append(ast)
    ranked = sorted(groups.values(), key=len, reverse=True)[:n_buckets]
    if len(ranked) < n_buckets or len(ranked[-1]) < per_bucket:
        raise ValueError(f"fewer than {n_buckets} classes with {per_bucket} members after {draws} draws")
    out = []
    for members in ranked:
        pick = np.sort(rng.choice(len(members), size=per_bucket, replace=False))
        out.append([members[i] for i in pick])
    return out


def nearest_centroid_purity(encodings: np.ndarray, labels) -> float:
    """Fraction of rows whose nearest class centroid by cosine distance is their own class."""
    x = np.asarray(encodings, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    unit = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    centroids = np.stack([unit[labels == c].mean(axis=0) for c in classes])
    centroids /= np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
    predicted = classes[np.argmax(unit @ centroids.T, axis=1)]
    return float(np.mean(predicted == labels))
