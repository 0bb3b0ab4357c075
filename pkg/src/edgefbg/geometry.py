"""Intrinsic-coordinate curve machinery.

Curves are described by curvature magnitude kappa(s), bend direction
theta(s) measured in a fiber-fixed material frame, and twist rate tau(s).
Integration uses a rotation-minimizing (parallel transport) material frame:
with tau = 0 the frame never twists about the tangent, so the bend
direction stays well defined through straight segments.

Base frame convention: curves start at the origin with the tangent along
+x, the first material normal along +y, and the second along +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InvalidInputError, OutOfRangeError

# Below this curvature a curve is treated as locally straight: torsion and
# bend direction are numerically meaningless and reported as 0.
KAPPA_STRAIGHT_EPS = 1e-4

_RK4_SUBSTEP = 1e-3  # max RK4 step in meters


def _wrap_angle(theta):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(theta) + np.pi, 2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class CurvatureProfile:
    """Intrinsic shape: sampled (kappa, theta, tau) along arc length.

    ``interpolation`` selects how values between samples are obtained:
    ``"linear"`` interpolates, ``"piecewise-constant"`` holds each sample's
    value until the next sample position (right-continuous).
    """

    s: np.ndarray
    kappa: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    length: float
    interpolation: str = "linear"

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        kappa = np.asarray(self.kappa, dtype=float)
        theta = _wrap_angle(np.asarray(self.theta, dtype=float))
        tau = np.asarray(self.tau, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise InvalidInputError("profile needs at least one sample")
        if not (s.shape == kappa.shape == theta.shape == tau.shape):
            raise InvalidInputError("profile sample arrays must share one shape")
        for name, arr in (("s", s), ("kappa", kappa), ("theta", theta), ("tau", tau)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"non-finite values in profile {name}")
        if self.length <= 0 or not np.isfinite(self.length):
            raise InvalidInputError("profile length must be positive and finite")
        if np.any(np.diff(s) <= 0):
            raise InvalidInputError("sample positions must be strictly increasing")
        if s[0] < 0 or s[-1] > self.length + 1e-12:
            raise InvalidInputError("sample positions must lie in [0, length]")
        if np.any(kappa < 0):
            raise InvalidInputError("curvature must be non-negative")
        if self.interpolation not in ("linear", "piecewise-constant"):
            raise InvalidInputError(f"unknown interpolation {self.interpolation!r}")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "tau", tau)
        # Unwrapped copy so linear interpolation never jumps across +-pi.
        object.__setattr__(self, "_theta_unwrapped", np.unwrap(theta))

    def evaluate(self, s_query):
        """Return (kappa, theta, tau) at the query arc positions."""
        q = np.clip(np.asarray(s_query, dtype=float), 0.0, self.length)
        if self.interpolation == "piecewise-constant":
            idx = np.clip(np.searchsorted(self.s, q, side="right") - 1, 0, self.s.size - 1)
            return self.kappa[idx], self.theta[idx], self.tau[idx]
        kappa = np.interp(q, self.s, self.kappa)
        theta = _wrap_angle(np.interp(q, self.s, self._theta_unwrapped))
        tau = np.interp(q, self.s, self.tau)
        return kappa, theta, tau

    @classmethod
    def constant(cls, kappa, length, theta=0.0, tau=0.0):
        """Uniform-curvature profile (arc, helix, or straight line)."""
        return cls(
            s=np.array([0.0, length]),
            kappa=np.array([kappa, kappa], dtype=float),
            theta=np.array([theta, theta], dtype=float),
            tau=np.array([tau, tau], dtype=float),
            length=float(length),
        )


@dataclass(frozen=True)
class ArcLengthCurve:
    """3D centerline sampled at uniform arc-length spacing.

    ``frames[i]`` (when present) holds the material frame at point i as
    columns (tangent, normal, binormal), orthonormal.
    """

    step: float
    points: np.ndarray
    frames: np.ndarray | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 2:
            raise InvalidInputError("curve needs at least two 3D points")
        if not np.all(np.isfinite(points)):
            raise InvalidInputError("non-finite curve points")
        if self.step <= 0:
            raise InvalidInputError("step must be positive")
        object.__setattr__(self, "points", points)
        if self.frames is not None:
            frames = np.asarray(self.frames, dtype=float)
            if frames.shape != (points.shape[0], 3, 3):
                raise InvalidInputError("frames must be one 3x3 triad per point")
            object.__setattr__(self, "frames", frames)

    @property
    def length(self):
        return (self.points.shape[0] - 1) * self.step

    @property
    def s_grid(self):
        return np.arange(self.points.shape[0]) * self.step

    def point_at(self, s_query):
        """Linearly interpolated position at arbitrary arc positions."""
        q = np.clip(np.atleast_1d(np.asarray(s_query, dtype=float)), 0.0, self.length)
        grid = self.s_grid
        out = np.stack([np.interp(q, grid, self.points[:, k]) for k in range(3)], axis=-1)
        return out


@dataclass(frozen=True)
class MarkerShape:
    """Discrete marker coordinates in mm, relative to the base frame."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 2:
            raise InvalidInputError("marker shape needs at least two 3D points")
        if not np.all(np.isfinite(coords)):
            raise InvalidInputError("non-finite marker coordinates")
        object.__setattr__(self, "coords", coords)

    @property
    def n_markers(self):
        return self.coords.shape[0]

    @property
    def tip(self):
        return self.coords[-1]


@dataclass(frozen=True)
class PlaneReading:
    """Bend state measured at one sensing plane."""

    s: float
    kappa: float
    theta: float

    def __post_init__(self):
        if not (np.isfinite(self.s) and np.isfinite(self.kappa) and np.isfinite(self.theta)):
            raise InvalidInputError("non-finite plane reading")
        if self.kappa < 0:
            raise InvalidInputError("curvature must be non-negative")
        object.__setattr__(self, "theta", float(_wrap_angle(self.theta)))


def _darboux_matrix(kappa, theta, tau):
    """Skew generator of the material frame ODE R' = R K."""
    k1 = kappa * np.cos(theta)
    k2 = kappa * np.sin(theta)
    return np.array(
        [
            [0.0, -k1, -k2],
            [k1, 0.0, -tau],
            [k2, tau, 0.0],
        ]
    )


def _cross3(a, b):
    """Cross product of two 3-vectors without np.cross dispatch overhead."""
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _orthonormalize(R):
    """Gram-Schmidt re-orthonormalization of a near-rotation matrix."""
    t = R[:, 0] / np.linalg.norm(R[:, 0])
    n = R[:, 1] - np.dot(R[:, 1], t) * t
    n /= np.linalg.norm(n)
    out = np.empty((3, 3))
    out[:, 0] = t
    out[:, 1] = n
    out[:, 2] = _cross3(t, n)
    return out


def _rk4_advance(r, R, profile, a, b):
    """One RK4 step of the position/frame ODE over [a, b].

    Stage abscissae are nudged inward by a tiny epsilon so that
    piecewise-constant profiles are never sampled exactly at a breakpoint.
    """
    h = b - a
    eps = 1e-12
    sa = min(a + eps, b)
    sm = a + 0.5 * h
    sb = max(b - eps, a)

    def deriv(s_eval, r_, R_):
        kappa, theta, tau = profile.evaluate(s_eval)
        K = _darboux_matrix(float(kappa), float(theta), float(tau))
        return R_[:, 0].copy(), R_ @ K

    k1r, k1R = deriv(sa, r, R)
    k2r, k2R = deriv(sm, r + 0.5 * h * k1r, R + 0.5 * h * k1R)
    k3r, k3R = deriv(sm, r + 0.5 * h * k2r, R + 0.5 * h * k2R)
    k4r, k4R = deriv(sb, r + h * k3r, R + h * k3R)
    r_next = r + (h / 6.0) * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
    R_next = R + (h / 6.0) * (k1R + 2.0 * k2R + 2.0 * k3R + k4R)
    return r_next, _orthonormalize(R_next)


def integrate_frenet(profile: CurvatureProfile, step: float) -> ArcLengthCurve:
    """Integrate an intrinsic profile into a 3D centerline.

    Fixed-step 4th-order Runge-Kutta on the material frame ODE, with
    re-orthonormalization after every step. Output intervals are split at
    profile breakpoints so piecewise-constant segments integrate exactly
    (to RK4 order) regardless of where the jumps fall.
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    if step > profile.length / 10.0 + 1e-12:
        raise InvalidInputError("step must not exceed length/10")

    n_steps = int(np.floor(profile.length / step + 1e-9))
    # Linear profiles are continuous, so stage evaluation across knots is
    # already accurate; only piecewise-constant jumps require splitting.
    if profile.interpolation == "piecewise-constant":
        breaks = profile.s[(profile.s > 0) & (profile.s < profile.length)]
    else:
        breaks = np.empty(0)

    points = np.empty((n_steps + 1, 3))
    frames = np.empty((n_steps + 1, 3, 3))
    r = np.zeros(3)
    R = np.eye(3)
    points[0] = r
    frames[0] = R
    for i in range(n_steps):
        a, b = i * step, (i + 1) * step
        cuts = breaks[(breaks > a + 1e-12) & (breaks < b - 1e-12)]
        bounds = np.concatenate([[a], cuts, [b]])
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            n_sub = max(1, int(np.ceil((hi - lo) / _RK4_SUBSTEP)))
            sub = np.linspace(lo, hi, n_sub + 1)
            for sa, sb in zip(sub[:-1], sub[1:]):
                r, R = _rk4_advance(r, R, profile, sa, sb)
        points[i + 1] = r
        frames[i + 1] = R
    return ArcLengthCurve(step=step, points=points, frames=frames)


def integrate_many(kappa, theta, tau, length, step):
    """Batched RK4 integration of many smooth profiles at once.

    ``kappa``/``theta``/``tau`` are (B, 2*n+1) arrays sampled at half-step
    abscissae 0, step/2, step, ... over [0, length]; theta must be
    continuous (unwrapped). Returns points of shape (B, n+1, 3). Intended
    for bulk dataset generation where profiles are smooth (no breakpoint
    splitting is performed).
    """
    kappa = np.asarray(kappa, dtype=float)
    theta = np.asarray(theta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    B, m = kappa.shape
    n = (m - 1) // 2
    if m != 2 * n + 1:
        raise InvalidInputError("stage arrays must have odd sample count 2n+1")
    if abs(n * step - length) > 1e-9:
        raise InvalidInputError("stage sampling must cover length at half steps")

    k1 = kappa * np.cos(theta)
    k2 = kappa * np.sin(theta)

    def make_K(idx):
        K = np.zeros((B, 3, 3))
        K[:, 0, 1] = -k1[:, idx]
        K[:, 1, 0] = k1[:, idx]
        K[:, 0, 2] = -k2[:, idx]
        K[:, 2, 0] = k2[:, idx]
        K[:, 1, 2] = -tau[:, idx]
        K[:, 2, 1] = tau[:, idx]
        return K

    points = np.empty((B, n + 1, 3))
    r = np.zeros((B, 3))
    R = np.tile(np.eye(3), (B, 1, 1))
    points[:, 0] = r
    h = step
    for i in range(n):
        Ka, Km, Kb = make_K(2 * i), make_K(2 * i + 1), make_K(2 * i + 2)
        k1r = R[:, :, 0]
        k1R = R @ Ka
        R2 = R + 0.5 * h * k1R
        k2r = R2[:, :, 0]
        k2R = R2 @ Km
        R3 = R + 0.5 * h * k2R
        k3r = R3[:, :, 0]
        k3R = R3 @ Km
        R4 = R + h * k3R
        k4r = R4[:, :, 0]
        k4R = R4 @ Kb
        r = r + (h / 6.0) * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
        R = R + (h / 6.0) * (k1R + 2.0 * k2R + 2.0 * k3R + k4R)
        # Batched Gram-Schmidt.
        t = R[:, :, 0]
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
        nvec = R[:, :, 1] - np.sum(R[:, :, 1] * t, axis=1, keepdims=True) * t
        nvec = nvec / np.linalg.norm(nvec, axis=1, keepdims=True)
        b = np.cross(t, nvec)
        R = np.stack([t, nvec, b], axis=2)
        points[:, i + 1] = r
    return points


def resample_spline(points, resolution: float) -> ArcLengthCurve:
    """Cubic-spline interpolation re-parameterized to uniform arc length."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError("points must be an (N, 3) array")
    if points.shape[0] < 4:
        raise InvalidInputError("need at least 4 points for cubic interpolation")
    if resolution <= 0:
        raise InvalidInputError("resolution must be positive")
    chords = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if np.any(chords < 1e-12):
        raise InvalidInputError("duplicate consecutive points")

    u = np.concatenate([[0.0], np.cumsum(chords)])
    spline = CubicSpline(u, points, axis=0)
    # Dense speed quadrature to build the arc-length map s(u).
    n_dense = max(200 * points.shape[0], int(20 * u[-1] / resolution))
    u_dense = np.linspace(0.0, u[-1], n_dense)
    speed = np.linalg.norm(spline.derivative()(u_dense), axis=1)
    s_dense = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(u_dense))])
    total = s_dense[-1]
    # The quadrature slightly underestimates arc length; a step-scale
    # tolerance keeps the final sample when total is a whole number of steps.
    n_out = int(np.floor(total / resolution + 1e-6)) + 1
    s_targets = np.arange(n_out) * resolution
    u_targets = np.interp(s_targets, s_dense, u_dense)
    return ArcLengthCurve(step=resolution, points=spline(u_targets))


def parallel_transport_frames(curve: ArcLengthCurve) -> np.ndarray:
    """Rotation-minimizing frames along a curve via double reflection.

    The initial normal is +y projected orthogonal to the first tangent
    (falling back to +z when degenerate), matching the base frame
    convention of integrated curves.
    """
    pts = curve.points
    n = pts.shape[0]
    tangents = np.empty_like(pts)
    tangents[1:-1] = pts[2:] - pts[:-2]
    tangents[0] = pts[1] - pts[0]
    tangents[-1] = pts[-1] - pts[-2]
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)

    normals = np.empty_like(pts)
    t0 = tangents[0]
    ref = np.array([0.0, 1.0, 0.0])
    m = ref - np.dot(ref, t0) * t0
    if np.linalg.norm(m) < 1e-9:
        ref = np.array([0.0, 0.0, 1.0])
        m = ref - np.dot(ref, t0) * t0
    m /= np.linalg.norm(m)
    normals[0] = m
    for i in range(n - 1):
        # Double reflection (Wang et al.): reflect in the chord bisector,
        # then in the tangent bisector.
        v1 = pts[i + 1] - pts[i]
        c1 = np.dot(v1, v1)
        if c1 < 1e-24:
            normals[i + 1] = normals[i]
            continue
        rL = normals[i] - (2.0 / c1) * np.dot(v1, normals[i]) * v1
        tL = tangents[i] - (2.0 / c1) * np.dot(v1, tangents[i]) * v1
        v2 = tangents[i + 1] - tL
        c2 = np.dot(v2, v2)
        if c2 < 1e-24:
            m_next = rL
        else:
            m_next = rL - (2.0 / c2) * np.dot(v2, rL) * v2
        m_next -= np.dot(m_next, tangents[i + 1]) * tangents[i + 1]
        m_next /= np.linalg.norm(m_next)
        normals[i + 1] = m_next
    frames = np.empty((n, 3, 3))
    frames[:, :, 0] = tangents
    frames[:, :, 1] = normals
    frames[:, :, 2] = np.cross(tangents, normals)
    return frames


def estimate_curvature_torsion(curve: ArcLengthCurve, s_query, _frames=None):
    """Finite-difference curvature, torsion, and bend direction at s_query.

    Curvature comes from the second arc-length derivative, torsion from the
    standard triple-product formula, and theta from the principal normal
    expressed in the transported material frame. Scalar queries return
    scalars; array queries return arrays.
    """
    scalar = np.isscalar(s_query) or np.ndim(s_query) == 0
    q = np.atleast_1d(np.asarray(s_query, dtype=float))
    h = curve.step
    n = curve.points.shape[0]
    lo, hi = 2 * h, curve.length - 2 * h
    if np.any(q < lo - 1e-12) or np.any(q > hi + 1e-12):
        raise OutOfRangeError("query requires two grid steps of margin on each side")
    idx = np.clip(np.rint(q / h).astype(int), 2, n - 3)

    p = curve.points
    d1 = (p[idx + 1] - p[idx - 1]) / (2 * h)
    d2 = (p[idx + 1] - 2 * p[idx] + p[idx - 1]) / h**2
    d3 = (p[idx + 2] - 2 * p[idx + 1] + 2 * p[idx - 1] - p[idx - 2]) / (2 * h**3)

    cross = np.cross(d1, d2)
    cross_norm = np.linalg.norm(cross, axis=1)
    speed = np.linalg.norm(d1, axis=1)
    kappa = cross_norm / speed**3

    frames = _frames if _frames is not None else parallel_transport_frames(curve)
    m1 = frames[idx, :, 1]
    m2 = frames[idx, :, 2]
    # Curvature vector component orthogonal to the tangent.
    t = d1 / speed[:, None]
    d2_perp = d2 - np.sum(d2 * t, axis=1, keepdims=True) * t
    theta = np.arctan2(np.sum(d2_perp * m2, axis=1), np.sum(d2_perp * m1, axis=1))

    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(
            cross_norm > 1e-12,
            np.einsum("ij,ij->i", cross, d3) / np.maximum(cross_norm**2, 1e-300),
            0.0,
        )
    straight = kappa < KAPPA_STRAIGHT_EPS
    tau = np.where(straight, 0.0, tau)
    theta = np.where(straight, 0.0, theta)
    if scalar:
        return float(kappa[0]), float(tau[0]), float(theta[0])
    return kappa, tau, theta


def reconstruct_from_plane_readings(readings, length: float, step: float) -> ArcLengthCurve:
    """Piecewise-constant shape reconstruction from per-plane bend readings.

    Each reading governs the segment between the midpoints to its
    neighboring planes (first from s=0, last to s=length); twist enters
    only through the per-segment bend directions.
    """
    if not readings:
        raise InvalidInputError("need at least one plane reading")
    s_vals = np.array([r.s for r in readings], dtype=float)
    if np.any(np.diff(s_vals) <= 0):
        raise InvalidInputError("readings must be sorted by arc position")
    if s_vals[-1] >= length:
        raise InvalidInputError("all reading positions must lie inside the length")

    mids = 0.5 * (s_vals[:-1] + s_vals[1:])
    seg_starts = np.concatenate([[0.0], mids])
    profile = CurvatureProfile(
        s=seg_starts,
        kappa=np.array([r.kappa for r in readings], dtype=float),
        theta=np.array([r.theta for r in readings], dtype=float),
        tau=np.zeros(len(readings)),
        length=length,
        interpolation="piecewise-constant",
    )
    return integrate_frenet(profile, step)


def markers_from_curve(curve: ArcLengthCurve, n: int = 20) -> MarkerShape:
    """Markers at uniform arc spacing along the curve, in mm."""
    if n < 2:
        raise InvalidInputError("need at least two markers")
    s_targets = np.linspace(0.0, curve.length, n)
    coords = curve.point_at(s_targets) * 1000.0
    return MarkerShape(coords=coords - coords[0])
