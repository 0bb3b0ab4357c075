"""Evaluation metrics, dataset splitting, similarity census, and the
sensing-plane resolution ablation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .geometry import (
    PlaneReading,
    estimate_curvature_torsion,
    integrate_frenet,
    parallel_transport_frames,
    reconstruct_from_plane_readings,
    resample_spline,
)


def tip_error(pred, truth) -> float:
    """Euclidean distance between the two tip markers, mm."""
    return float(np.linalg.norm(_coords(pred)[-1] - _coords(truth)[-1]))


def shape_rmse(pred, truth) -> float:
    """RMS of the 20 per-marker Euclidean distances, mm."""
    d = _coords(pred) - _coords(truth)
    return float(np.sqrt(np.mean(np.sum(d**2, axis=-1))))


def _coords(shape):
    coords = np.asarray(getattr(shape, "coords", shape), dtype=float)
    if coords.ndim != 2 or coords.shape[-1] != 3:
        raise InvalidInputError("marker shapes must be (n, 3)")
    return coords


def batch_tip_errors(pred, truth) -> np.ndarray:
    """(N, 20, 3) pairs -> per-sample tip errors (N,)."""
    return np.linalg.norm(np.asarray(pred)[:, -1] - np.asarray(truth)[:, -1], axis=-1)


def batch_shape_rmses(pred, truth) -> np.ndarray:
    d = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    return np.sqrt(np.mean(np.sum(d**2, axis=-1), axis=-1))


def summarize(errors) -> tuple[float, float, float]:
    """(median, IQR, mean) with linear quantile interpolation."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise InvalidInputError("cannot summarize an empty error list")
    q1, med, q3 = np.percentile(errors, [25.0, 50.0, 75.0])
    return float(med), float(q3 - q1), float(errors.mean())


@dataclass(frozen=True)
class ShapeErrorStats:
    """Per-sample errors plus their Table-style summaries."""

    tip_errors: np.ndarray
    rmses: np.ndarray

    @classmethod
    def from_predictions(cls, pred, truth):
        return cls(
            tip_errors=batch_tip_errors(pred, truth),
            rmses=batch_shape_rmses(pred, truth),
        )

    @property
    def tip_summary(self):
        return summarize(self.tip_errors)

    @property
    def rmse_summary(self):
        return summarize(self.rmses)


def precision_metric(tips, pose_ids) -> float:
    """Average over poses of the RMS tip scatter about each pose's mean."""
    tips = np.asarray(tips, dtype=float)
    pose_ids = np.asarray(pose_ids)
    if tips.ndim != 2 or tips.shape[1] != 3 or tips.shape[0] != pose_ids.shape[0]:
        raise InvalidInputError("need one 3D tip per pose id")
    scatters = []
    for pose in np.unique(pose_ids):
        group = tips[pose_ids == pose]
        if group.shape[0] < 2:
            raise InvalidInputError(f"pose {pose} has fewer than 2 repetitions")
        dev = group - group.mean(axis=0)
        scatters.append(np.sqrt(np.mean(np.sum(dev**2, axis=1))))
    return float(np.mean(scatters))


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise InvalidInputError("split fractions must be three values summing to 1")


def split_indices(n: int, spec: SplitSpec):
    """Seeded shuffle, then floor(f0 n) / floor(f1 n) / remainder slices."""
    if n < 10:
        raise InvalidInputError("need at least 10 samples to split")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(spec.fractions[0] * n)
    n_val = int(spec.fractions[1] * n)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def split_dataset(dataset, spec: SplitSpec):
    """(train, val, test) subsets of a generated dataset."""
    tr, va, te = split_indices(len(dataset), spec)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


def similarity_counts(
    query_shapes, reference_shapes, rmse_thresh: float = 5.0, chunk: int = 512
) -> np.ndarray:
    """Per query shape, how many reference shapes lie within the threshold.

    Marker RMSE between two shapes is the flat 60-dim Euclidean distance
    divided by sqrt(20), so the census reduces to chunked matrix products.
    """
    Q = np.asarray(query_shapes, dtype=np.float64).reshape(len(query_shapes), -1)
    R = np.asarray(reference_shapes, dtype=np.float64).reshape(len(reference_shapes), -1)
    if Q.size == 0 or R.size == 0:
        raise InvalidInputError("census inputs must be nonempty")
    thresh_sq = rmse_thresh**2 * 20.0
    r_sq = np.einsum("ij,ij->i", R, R)
    counts = np.empty(len(Q), dtype=np.int64)
    for start in range(0, len(Q), chunk):
        q = Q[start : start + chunk]
        d2 = (
            np.einsum("ij,ij->i", q, q)[:, None]
            - 2.0 * (q @ R.T)
            + r_sq[None, :]
        )
        counts[start : start + chunk] = np.count_nonzero(d2 <= thresh_sq, axis=1)
    return counts


def similarity_census(
    test_shapes,
    train_shapes,
    rmse_thresh: float = 5.0,
    count_thresh: int = 100,
) -> float:
    """Fraction of test shapes with enough similar training shapes."""
    counts = similarity_counts(test_shapes, train_shapes, rmse_thresh)
    return float(np.mean(counts >= count_thresh))


_ABLATION_RESOLUTION = 1e-4  # m, spline resampling step
_RECON_STEP = 2e-3  # m; piecewise-constant reconstruction is split-exact


def reconstruct_at_spacing(curve, spacing: float):
    """Sparse per-plane readings from a dense curve, then reconstruction."""
    length = curve.length
    positions = np.arange(spacing, length - 1e-12, spacing)
    lo, hi = 2 * curve.step, length - 2 * curve.step
    frames = parallel_transport_frames(curve)
    kappa, _, theta = estimate_curvature_torsion(
        curve, np.clip(positions, lo, hi), _frames=frames
    )
    readings = [
        PlaneReading(s=float(s), kappa=float(max(k, 0.0)), theta=float(t))
        for s, k, t in zip(positions, np.atleast_1d(kappa), np.atleast_1d(theta))
    ]
    return reconstruct_from_plane_readings(readings, length, _RECON_STEP)


def resolution_ablation(profiles, spacings, integration_step: float = 1e-3):
    """Median tip error (mm) per plane spacing over a ground-truth corpus."""
    spacings = list(spacings)
    errors = {d: [] for d in spacings}
    for profile in profiles:
        truth = integrate_frenet(profile, integration_step)
        dense = resample_spline(truth.points, _ABLATION_RESOLUTION)
        for d in spacings:
            recon = reconstruct_at_spacing(dense, d)
            errors[d].append(
                1000.0 * float(np.linalg.norm(recon.points[-1] - truth.points[-1]))
            )
    return {d: summarize(errs)[0] for d, errs in errors.items()}
