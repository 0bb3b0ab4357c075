"""Perturbation saliency for the spectral shape regressor.

Each of the 190 wavelength elements is nudged by a forward difference (the
same element in all three scans at once) and the resulting change in loss or
in predicted marker positions is recorded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .nn import Model, N_INPUT_CHANNELS, N_INPUT_LENGTH, smooth_l1

DEFAULT_SPACING = 0.1  # above the spectral noise level


@dataclass(frozen=True)
class SaliencyMap:
    """Loss change per perturbed wavelength element."""

    deltas: np.ndarray  # (190,)

    def __post_init__(self):
        deltas = np.asarray(self.deltas, dtype=float)
        if deltas.shape != (N_INPUT_LENGTH,):
            raise InvalidInputError(f"saliency map must have {N_INPUT_LENGTH} entries")
        if not np.all(np.isfinite(deltas)):
            raise InvalidInputError("non-finite saliency values")
        object.__setattr__(self, "deltas", deltas)

    def to_csv(self, path):
        np.savetxt(path, self.deltas[:, None], delimiter=",", fmt="%.9g")


@dataclass(frozen=True)
class MarkerSaliencyMap:
    """Per-marker displacement (mm) per perturbed wavelength element."""

    distances: np.ndarray  # (190, 20)

    def __post_init__(self):
        distances = np.asarray(self.distances, dtype=float)
        if distances.shape != (N_INPUT_LENGTH, 20):
            raise InvalidInputError("marker saliency map must be 190 x 20")
        if not np.all(np.isfinite(distances)) or np.any(distances < 0):
            raise InvalidInputError("marker displacements must be finite and non-negative")
        object.__setattr__(self, "distances", distances)

    def to_csv(self, path):
        np.savetxt(path, self.distances, delimiter=",", fmt="%.9g")


def _probe_batch(scans, h):
    """Original input plus one row per perturbed element: (191, 3, 190)."""
    x = np.asarray(scans, dtype=float)
    if x.shape != (N_INPUT_CHANNELS, N_INPUT_LENGTH):
        raise InvalidInputError(f"scans must be ({N_INPUT_CHANNELS}, {N_INPUT_LENGTH})")
    batch = np.repeat(x[None], N_INPUT_LENGTH + 1, axis=0)
    idx = np.arange(N_INPUT_LENGTH)
    batch[idx + 1, :, idx] += h
    return batch


def loss_saliency(
    model: Model, scans, target, h: float = DEFAULT_SPACING, beta: float = 4.04
) -> SaliencyMap:
    """Forward-difference loss change per element, probed in one batch."""
    target = np.asarray(target, dtype=float).reshape(-1)
    out = model.forward(_probe_batch(scans, h), train_mode=False)
    losses = np.array([smooth_l1(row, target, beta)[0] for row in out])
    return SaliencyMap(deltas=losses[1:] - losses[0])


def marker_saliency(model: Model, scans, h: float = DEFAULT_SPACING) -> MarkerSaliencyMap:
    """Euclidean displacement of each predicted marker per perturbed element."""
    out = model.forward(_probe_batch(scans, h), train_mode=False)
    markers = out.reshape(-1, 20, 3)
    return MarkerSaliencyMap(
        distances=np.linalg.norm(markers[1:] - markers[:1], axis=2)
    )
