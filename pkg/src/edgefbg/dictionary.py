"""Nearest-spectrum lookup baseline.

Stores (spectrum feature, marker shape) pairs and answers a query with the
shape of the stored spectrum closest in Euclidean distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .geometry import MarkerShape
from .optics import N_GRID

FEATURE_DIM = 3 * N_GRID


@dataclass(frozen=True)
class SpectrumDictionary:
    """Immutable brute-force nearest-neighbor table."""

    features: np.ndarray  # (N, 570)
    shapes: np.ndarray  # (N, 20, 3) mm

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float32)
        shapes = np.ascontiguousarray(self.shapes, dtype=np.float32)
        if features.ndim != 2 or features.shape[1] != FEATURE_DIM:
            raise InvalidInputError(f"features must be (N, {FEATURE_DIM})")
        if features.shape[0] == 0:
            raise InvalidInputError("dictionary must hold at least one entry")
        if shapes.shape[:1] != features.shape[:1] or shapes.shape[1:] != (20, 3):
            raise InvalidInputError("need one 20x3 shape per feature vector")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "shapes", shapes)
        # Cached squared norms make repeated queries a single matmul each.
        sq = np.einsum("ij,ij->i", features.astype(np.float64), features.astype(np.float64))
        object.__setattr__(self, "_sq_norms", sq)

    def __len__(self):
        return self.features.shape[0]


def build_dictionary(features: np.ndarray, shapes: np.ndarray) -> SpectrumDictionary:
    """Store entries in insertion order; duplicates are kept."""
    return SpectrumDictionary(features=np.asarray(features), shapes=np.asarray(shapes))


def dictionary_from_dataset(dataset) -> SpectrumDictionary:
    return build_dictionary(dataset.features(), dataset.shapes)


def query(dictionary: SpectrumDictionary, scans: np.ndarray) -> tuple[MarkerShape, float]:
    """Shape of the nearest stored spectrum; ties go to the lowest index."""
    q = np.asarray(scans, dtype=np.float32).reshape(-1)
    if q.size != FEATURE_DIM:
        raise InvalidInputError(f"query must have {FEATURE_DIM} elements")
    idx, dist = _nearest(dictionary, q[None, :])
    return MarkerShape(coords=dictionary.shapes[idx[0]].astype(float)), float(dist[0])


def query_batch(dictionary: SpectrumDictionary, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized lookup: (B, 570) queries -> (indices (B,), distances (B,))."""
    Q = np.asarray(queries, dtype=np.float32)
    if Q.ndim != 2 or Q.shape[1] != FEATURE_DIM:
        raise InvalidInputError(f"queries must be (B, {FEATURE_DIM})")
    return _nearest(dictionary, Q)


def _nearest(dictionary: SpectrumDictionary, Q: np.ndarray, chunk: int = 512):
    feats = dictionary.features
    sq = dictionary._sq_norms
    idx = np.empty(Q.shape[0], dtype=np.int64)
    dist = np.empty(Q.shape[0])
    for start in range(0, Q.shape[0], chunk):
        q = Q[start : start + chunk].astype(np.float64)
        # ||f - q||^2 = ||f||^2 - 2 f.q + ||q||^2; argmin ignores ||q||^2 but
        # the reported distance needs it.
        d2 = sq[None, :] - 2.0 * (q @ feats.T.astype(np.float64))
        best = np.argmin(d2, axis=1)  # first minimum wins ties
        idx[start : start + chunk] = best
        qn = np.einsum("ij,ij->i", q, q)
        dist[start : start + chunk] = np.sqrt(
            np.maximum(d2[np.arange(best.size), best] + qn, 0.0)
        )
    return idx, dist
