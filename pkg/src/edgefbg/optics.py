"""Physics-based forward model for bent-fiber edge-FBG spectra.

Maps an intrinsic fiber shape to the reflected sensor spectrum. Each
confounding effect (bend-loss ripple, polarization-dependent loss,
cladding-mode dips, exit-face interference tail) can be switched on and
off individually so experiments can isolate what each one contributes.

Also hosts the shape/scenario generators and bulk dataset generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError
from .geometry import (
    ArcLengthCurve,
    CurvatureProfile,
    MarkerShape,
    integrate_frenet,
    integrate_many,
    markers_from_curve,
)

N_PLANES = 5
N_FBGS = 15
N_GRID = 190
N_MARKERS = 20

_FOUR_LN2 = 4.0 * np.log(2.0)
_INTEGRAL_DS = 1e-3  # quadrature grid for curvature integrals, m
_CURVE_STEP = 1e-3  # centerline integration step for sample shapes, m


@dataclass(frozen=True)
class FbgDescriptor:
    """One eccentric grating: where it sits and how it reflects."""

    plane_index: int
    lambda_bragg: float  # nm
    phi: float  # angular position in the fiber cross-section, rad
    r_offset: float  # radial offset from the fiber axis, um
    peak_fwhm: float  # nm
    base_amplitude: float

    def __post_init__(self):
        if not 813.0 <= self.lambda_bragg <= 869.0:
            raise InvalidInputError("Bragg wavelength outside [813, 869] nm")
        if self.r_offset <= 0 or self.peak_fwhm <= 0:
            raise InvalidInputError("offset and FWHM must be positive")
        if not 0.0 < self.base_amplitude <= 1.0:
            raise InvalidInputError("base amplitude must be in (0, 1]")


@dataclass(frozen=True)
class SensorLayout:
    """Grating positions, wavelengths, and the spectrometer grid."""

    length: float  # m
    plane_positions: np.ndarray  # (5,) m
    fbgs: tuple[FbgDescriptor, ...]
    grid: np.ndarray  # (190,) nm

    def __post_init__(self):
        planes = np.asarray(self.plane_positions, dtype=float)
        grid = np.asarray(self.grid, dtype=float)
        if planes.shape != (N_PLANES,):
            raise InvalidInputError(f"need exactly {N_PLANES} sensing planes")
        if len(self.fbgs) != N_FBGS:
            raise InvalidInputError(f"need exactly {N_FBGS} FBGs")
        if grid.shape != (N_GRID,) or not np.allclose(
            grid, np.linspace(grid[0], grid[-1], N_GRID)
        ):
            raise InvalidInputError(f"grid must be {N_GRID} uniform samples")
        lambdas = [f.lambda_bragg for f in self.fbgs]
        if len(set(lambdas)) != N_FBGS:
            raise InvalidInputError("Bragg wavelengths must be distinct")
        if min(lambdas) <= grid[0] or max(lambdas) >= grid[-1]:
            raise InvalidInputError("Bragg wavelengths must lie inside the grid span")
        for p in range(N_PLANES):
            phis = sorted(f.phi for f in self.fbgs if f.plane_index == p)
            if len(phis) != 3:
                raise InvalidInputError("each plane needs exactly 3 FBGs")
            gaps = np.diff(phis)
            if not np.allclose(sorted(gaps), [np.pi / 2, np.pi / 2], atol=1e-9):
                raise InvalidInputError("per-plane FBG angles must be 90 deg apart")
        object.__setattr__(self, "plane_positions", planes)
        object.__setattr__(self, "grid", grid)


def default_layout() -> SensorLayout:
    """The 30 cm five-plane sensor with 15 gratings at 813..869 nm."""
    planes = np.array([0.05, 0.10, 0.15, 0.20, 0.25])
    # Per plane: top (90 deg), left (180 deg), right (0 deg).
    phis = [np.pi / 2, np.pi, 0.0]
    fbgs = tuple(
        FbgDescriptor(
            plane_index=k // 3,
            lambda_bragg=813.0 + 4.0 * k,
            phi=phis[k % 3],
            r_offset=2.0,
            peak_fwhm=1.0,
            base_amplitude=0.9,
        )
        for k in range(N_FBGS)
    )
    return SensorLayout(
        length=0.30,
        plane_positions=planes,
        fbgs=fbgs,
        grid=np.linspace(800.0, 890.0, N_GRID),
    )


@dataclass(frozen=True)
class BendLossConfig:
    enabled: bool = True
    base: float = 0.005  # m; attenuation per integrated kappa^2
    lambda_short: float = 3.0  # nm, coating-air ripple period
    lambda_long: float = 25.0  # nm, cladding-coating ripple period
    m_short: float = 0.05
    m_long: float = 0.10
    # Ripple phases follow the in-plane components of the integrated
    # curvature vector, so the spectral fingerprint carries direction.
    phase_short: tuple[float, float] = (0.9, 0.6)
    phase_long: tuple[float, float] = (0.5, -0.8)

    def __post_init__(self):
        if not self.lambda_short < self.lambda_long:
            raise InvalidInputError("short ripple period must be below the long one")
        if not (0 <= self.m_short < 1 and 0 <= self.m_long < 1):
            raise InvalidInputError("modulation depths must be in [0, 1)")


@dataclass(frozen=True)
class PdlConfig:
    enabled: bool = True
    depth: float = 0.05
    period: float = 18.0  # nm
    birefringence_gain: float = 0.1  # phase per integrated kappa^2, m

    def __post_init__(self):
        if not 0 <= self.depth < 1:
            raise InvalidInputError("PDL depth must be in [0, 1)")


@dataclass(frozen=True)
class CladdingConfig:
    enabled: bool = True
    dip_depth: float = 0.1
    dip_offset: float = 1.5  # nm below the Bragg peak
    curvature_gain: float = 0.05  # m; dip amplitude saturates at 1/gain

    def __post_init__(self):
        if not 0 <= self.dip_depth < 1:
            raise InvalidInputError("cladding dip depth must be in [0, 1)")


@dataclass(frozen=True)
class FresnelConfig:
    enabled: bool = True
    ripple: float = 0.02
    tail_length: float = 5.0e4  # nm, round-trip optical length of the tail
    bend_mod_gain: float = 0.02  # amplitude term per integrated tail kappa^2
    phase_gain: tuple[float, float] = (2.5, 1.8)  # per tail curvature components


@dataclass(frozen=True)
class EffectsConfig:
    """Switchable effect stack of the forward model."""

    mode_field_gain: float = 4000.0  # dimensionless; gain * r_offset = m
    bragg_shift_on: bool = True
    photoelastic: float = 0.22
    bendloss: BendLossConfig = field(default_factory=BendLossConfig)
    pdl: PdlConfig = field(default_factory=PdlConfig)
    cladding: CladdingConfig = field(default_factory=CladdingConfig)
    fresnel_tail: FresnelConfig = field(default_factory=FresnelConfig)
    noise_sigma: float = 0.005
    background: float = 0.02

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise InvalidInputError("noise sigma must be non-negative")

    @classmethod
    def all_off(cls, noise_sigma: float = 0.0) -> "EffectsConfig":
        """Pure cosine-law spectra: no confounders, no Bragg shift."""
        return cls(
            bragg_shift_on=False,
            bendloss=BendLossConfig(enabled=False),
            pdl=PdlConfig(enabled=False),
            cladding=CladdingConfig(enabled=False),
            fresnel_tail=FresnelConfig(enabled=False),
            noise_sigma=noise_sigma,
        )


@dataclass(frozen=True)
class ShapeSamplerConfig:
    """Random smooth-shape distribution in the sensor's curvature range."""

    kappa_range: tuple[float, float] = (0.58, 33.5)
    n_modes: int = 6
    trajectory_correlation: float = 0.99
    theta_scale: float = 1.5  # rad, bend-direction field amplitude
    kappa_sharpness: float = 1.2
    kappa_bias: float = -1.0  # shifts the curvature distribution downward
    # 0 = plain AR(1) walk; towards 1, walk speed is modulated by a slow
    # dwell process so the trajectory alternates between holding a pose
    # and sweeping to a new one (mimics manual manipulation).
    dwell_modulation: float = 0.0

    def __post_init__(self):
        lo, hi = self.kappa_range
        if not (0 < lo < hi):
            raise InvalidInputError("kappa range must be positive with min < max")
        if not 0 <= self.trajectory_correlation < 1:
            raise InvalidInputError("retention factor must be in [0, 1)")
        if self.n_modes < 1:
            raise InvalidInputError("need at least one basis mode")

    @property
    def n_coeffs(self):
        return 2 * (1 + 2 * self.n_modes)


@dataclass(frozen=True)
class SimSample:
    """Three consecutive scans of one shape plus its ground truth."""

    scans: np.ndarray  # (3, 190)
    shape: MarkerShape
    profile: CurvatureProfile
    scenario_tag: str
    seed: int

    def __post_init__(self):
        scans = np.asarray(self.scans, dtype=float)
        if scans.shape != (3, N_GRID):
            raise InvalidInputError("a sample holds exactly three scans")
        object.__setattr__(self, "scans", scans)


def _basis_matrix(n_modes: int, s: np.ndarray, length: float) -> np.ndarray:
    """Rows: 1, cos(j pi s/L), sin(j pi s/L) with mildly decaying weights."""
    rows = [np.ones_like(s)]
    for j in range(1, n_modes + 1):
        w = 1.0 / (1.0 + 0.5 * j)
        rows.append(w * np.cos(j * np.pi * s / length))
        rows.append(w * np.sin(j * np.pi * s / length))
    basis = np.array(rows)
    # Normalize so unit-variance coefficients give a unit-variance field.
    scale = np.sqrt(1.0 + sum((1.0 / (1.0 + 0.5 * j)) ** 2 for j in range(1, n_modes + 1)))
    return basis / scale


def _fields_from_coeffs(z: np.ndarray, cfg: ShapeSamplerConfig, s: np.ndarray, length: float):
    """Coefficient vectors (B, d) -> kappa and theta fields (B, len(s))."""
    d_field = 1 + 2 * cfg.n_modes
    basis = _basis_matrix(cfg.n_modes, s, length)
    g = z[:, :d_field] @ basis
    t = z[:, d_field:] @ basis
    lo, hi = cfg.kappa_range
    kappa = lo + (hi - lo) / (1.0 + np.exp(-(cfg.kappa_sharpness * g + cfg.kappa_bias)))
    theta = cfg.theta_scale * t
    return kappa, theta


def profile_from_coeffs(
    z: np.ndarray, cfg: ShapeSamplerConfig, length: float = 0.30
) -> CurvatureProfile:
    """Build the smooth intrinsic profile encoded by one coefficient vector."""
    s = np.linspace(0.0, length, 601)
    kappa, theta = _fields_from_coeffs(z[None, :], cfg, s, length)
    return CurvatureProfile(
        s=s, kappa=kappa[0], theta=theta[0], tau=np.zeros_like(s), length=length
    )


def sample_random_shape(
    cfg: ShapeSamplerConfig, rng: np.random.Generator, length: float = 0.30
) -> CurvatureProfile:
    """Draw one random smooth shape; twist enters only through theta(s)."""
    z = rng.standard_normal(cfg.n_coeffs)
    return profile_from_coeffs(z, cfg, length)


def _trajectory_coeffs(
    cfg: ShapeSamplerConfig, steps: int, rng: np.random.Generator
) -> np.ndarray:
    """AR(1) coefficient walk; marginals stay standard normal at every step."""
    if steps < 1:
        raise InvalidInputError("need at least one trajectory step")
    d = cfg.n_coeffs
    rho = cfg.trajectory_correlation
    out = np.empty((steps, d))
    z = rng.standard_normal(d)
    out[0] = z
    if rho == 0.0:
        for t in range(1, steps):
            out[t] = rng.standard_normal(d)
        return out
    u = rng.standard_normal()
    rho_u = 0.995
    w = cfg.dwell_modulation
    # Per-step decorrelation shrinks quadratically as the retention factor
    # approaches 1, so consecutive shapes stay within the few-mm similarity
    # scale at high retention while retention 0 remains fully independent.
    decor = (1.0 - rho) ** 2 * (0.15 + 0.85 * (1.0 - rho))
    for t in range(1, steps):
        u = rho_u * u + np.sqrt(1 - rho_u**2) * rng.standard_normal()
        m = (1.0 - w) + w * min(u**4 / 3.0, 10.0)
        rho_t = min(max(1.0 - decor * m, 0.0), 1.0 - 1e-12)
        z = rho_t * z + np.sqrt(1.0 - rho_t**2) * rng.standard_normal(d)
        out[t] = z
    return out


def sample_trajectory(
    cfg: ShapeSamplerConfig, steps: int, rng: np.random.Generator, length: float = 0.30
) -> list[CurvatureProfile]:
    """Continuous-movement sequence of shapes (first-order walk)."""
    coeffs = _trajectory_coeffs(cfg, steps, rng)
    return [profile_from_coeffs(z, cfg, length) for z in coeffs]


_TEMPLATE_RAMP = 5e-3  # m, cosine ramp width at each end of a template bend


def template_shape(
    segment: tuple[float, float],
    bend_radius: float,
    layout: SensorLayout,
    theta: float = 0.0,
) -> CurvatureProfile:
    """Localized constant-radius bend with smooth ramps, straight elsewhere."""
    a, b = segment
    if not 0 <= a < b <= layout.length:
        raise InvalidInputError("segment must lie inside the sensor")
    if b - a < 2 * _TEMPLATE_RAMP:
        raise InvalidInputError("segment shorter than the ramp width")
    kappa0 = 0.0 if np.isinf(bend_radius) else 1.0 / bend_radius
    s = np.linspace(0.0, layout.length, 601)
    kappa = np.zeros_like(s)
    rise = (s >= a) & (s < a + _TEMPLATE_RAMP)
    flat = (s >= a + _TEMPLATE_RAMP) & (s <= b - _TEMPLATE_RAMP)
    fall = (s > b - _TEMPLATE_RAMP) & (s <= b)
    kappa[rise] = 0.5 * (1 - np.cos(np.pi * (s[rise] - a) / _TEMPLATE_RAMP))
    kappa[flat] = 1.0
    kappa[fall] = 0.5 * (1 - np.cos(np.pi * (b - s[fall]) / _TEMPLATE_RAMP))
    kappa *= kappa0
    return CurvatureProfile(
        s=s,
        kappa=kappa,
        theta=np.full_like(s, theta),
        tau=np.zeros_like(s),
        length=layout.length,
    )


def _curvature_integrals(profile: CurvatureProfile, layout: SensorLayout):
    """Cumulative integrals of kappa^2 and the curvature vector components."""
    s = np.arange(0.0, layout.length + 0.5 * _INTEGRAL_DS, _INTEGRAL_DS)
    kappa, theta, _ = profile.evaluate(s)
    k2 = kappa**2
    kc = kappa * np.cos(theta)
    ks = kappa * np.sin(theta)

    def cum(y):
        out = np.empty_like(y)
        out[0] = 0.0
        np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(s), out=out[1:])
        return out

    B, C, S = cum(k2), cum(kc), cum(ks)
    at_planes = lambda arr: np.interp(layout.plane_positions, s, arr)
    s_last = layout.plane_positions[-1]
    tail = lambda arr: arr[-1] - np.interp(s_last, s, arr)
    return (
        at_planes(B),
        at_planes(C),
        at_planes(S),
        (tail(B), tail(C), tail(S)),
    )


def _spectrum_batch(
    plane_kappa,
    plane_theta,
    B_planes,
    C_planes,
    S_planes,
    tail_B,
    tail_C,
    tail_S,
    layout: SensorLayout,
    effects: EffectsConfig,
):
    """Noise-free unnormalized spectra for a batch of shapes.

    All plane/integral arrays have leading batch dimension N; returns
    (N, 190).
    """
    grid = layout.grid[None, :]
    N = plane_kappa.shape[0]
    out = np.full((N, N_GRID), effects.background)
    r_m = None
    for fbg in layout.fbgs:
        p = fbg.plane_index
        r_m = fbg.r_offset * 1e-6
        proj = plane_kappa[:, p] * np.cos(plane_theta[:, p] - fbg.phi)  # kappa cos(dphi)
        amp = np.clip(
            fbg.base_amplitude * (1.0 - effects.mode_field_gain * r_m * proj), 0.05, 1.0
        )
        if effects.bragg_shift_on:
            lam_c = fbg.lambda_bragg * (1.0 - (1.0 - effects.photoelastic) * r_m * proj)
        else:
            lam_c = np.full(N, fbg.lambda_bragg)
        w2 = fbg.peak_fwhm**2
        peak = np.exp(-_FOUR_LN2 * (grid - lam_c[:, None]) ** 2 / w2)
        cl = effects.cladding
        if cl.enabled:
            dip_amp = cl.dip_depth * np.minimum(1.0, cl.curvature_gain * plane_kappa[:, p])
            peak -= dip_amp[:, None] * np.exp(
                -_FOUR_LN2 * (grid - (lam_c[:, None] - cl.dip_offset)) ** 2 / w2
            )
        peak *= amp[:, None]
        bl = effects.bendloss
        if bl.enabled:
            phi_s = bl.phase_short[0] * C_planes[:, p] + bl.phase_short[1] * S_planes[:, p]
            phi_l = bl.phase_long[0] * C_planes[:, p] + bl.phase_long[1] * S_planes[:, p]
            ripple = (
                1.0
                + bl.m_short * np.sin(2 * np.pi * grid / bl.lambda_short + phi_s[:, None])
                + bl.m_long * np.sin(2 * np.pi * grid / bl.lambda_long + phi_l[:, None])
            )
            t_up = np.exp(-0.5 * bl.base * B_planes[:, p, None] * ripple)
            peak *= t_up**2
        out += peak
    fr = effects.fresnel_tail
    if fr.enabled:
        phase = (
            4 * np.pi * fr.tail_length / grid
            + fr.phase_gain[0] * tail_C[:, None]
            + fr.phase_gain[1] * tail_S[:, None]
        )
        out += fr.ripple * (1.0 + fr.bend_mod_gain * tail_B[:, None]) * np.cos(phase)
    pdl = effects.pdl
    if pdl.enabled:
        last = B_planes[:, -1, None]
        out *= 1.0 + pdl.depth * np.sin(
            2 * np.pi * grid / pdl.period + pdl.birefringence_gain * last
        )
    return out


def simulate_scan(
    profile: CurvatureProfile,
    layout: SensorLayout,
    effects: EffectsConfig,
    rng: np.random.Generator,
    normalized: bool = True,
) -> np.ndarray:
    """One reflected spectrum (190,) for the given shape."""
    if profile.length < layout.length - 1e-12:
        raise InvalidInputError("profile must cover the full sensor length")
    kappa, theta, _ = profile.evaluate(layout.plane_positions)
    B, C, S, (tB, tC, tS) = _curvature_integrals(profile, layout)
    raw = _spectrum_batch(
        kappa[None, :],
        theta[None, :],
        B[None, :],
        C[None, :],
        S[None, :],
        np.array([tB]),
        np.array([tC]),
        np.array([tS]),
        layout,
        effects,
    )[0]
    if effects.noise_sigma > 0:
        raw = raw + rng.normal(0.0, effects.noise_sigma, N_GRID)
    raw = np.maximum(raw, 0.0)
    if normalized:
        raw = raw / raw.max()
    return raw


def shape_markers(profile: CurvatureProfile, n: int = N_MARKERS) -> MarkerShape:
    """Ground-truth marker coordinates for a profile."""
    return markers_from_curve(integrate_frenet(profile, _CURVE_STEP), n)


def simulate_sample(
    profile: CurvatureProfile,
    layout: SensorLayout,
    effects: EffectsConfig,
    rng: np.random.Generator,
    scenario_tag: str = "random",
    seed: int = 0,
) -> SimSample:
    """Three consecutive scans (independent noise) plus the true shape."""
    scans = np.stack([simulate_scan(profile, layout, effects, rng) for _ in range(3)])
    return SimSample(
        scans=scans,
        shape=shape_markers(profile),
        profile=profile,
        scenario_tag=scenario_tag,
        seed=seed,
    )


@dataclass
class Dataset:
    """Column-oriented sample store used by training and evaluation."""

    kind: str
    seed: int
    spectra: np.ndarray  # (N, 3, 190) float32
    shapes: np.ndarray  # (N, 20, 3) float32, mm
    plane_kappa: np.ndarray  # (N, 5) float32
    plane_theta: np.ndarray  # (N, 5) float32
    sample_seeds: np.ndarray  # (N,) uint64
    pose_ids: np.ndarray  # (N,) int32; -1 when not a repeated pose
    layout: SensorLayout
    effects: EffectsConfig
    sampler: ShapeSamplerConfig

    def __len__(self):
        return self.spectra.shape[0]

    def features(self) -> np.ndarray:
        """Concatenated 3x190 scans as flat 570-vectors."""
        return self.spectra.reshape(len(self), -1)

    def targets(self) -> np.ndarray:
        """Marker coordinates flattened to 60-vectors, mm."""
        return self.shapes.reshape(len(self), -1)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            kind=self.kind,
            seed=self.seed,
            spectra=self.spectra[index],
            shapes=self.shapes[index],
            plane_kappa=self.plane_kappa[index],
            plane_theta=self.plane_theta[index],
            sample_seeds=self.sample_seeds[index],
            pose_ids=self.pose_ids[index],
            layout=self.layout,
            effects=self.effects,
            sampler=self.sampler,
        )

    @staticmethod
    def concatenate(parts: list["Dataset"]) -> "Dataset":
        first = parts[0]
        return Dataset(
            kind=first.kind,
            seed=first.seed,
            spectra=np.concatenate([p.spectra for p in parts]),
            shapes=np.concatenate([p.shapes for p in parts]),
            plane_kappa=np.concatenate([p.plane_kappa for p in parts]),
            plane_theta=np.concatenate([p.plane_theta for p in parts]),
            sample_seeds=np.concatenate([p.sample_seeds for p in parts]),
            pose_ids=np.concatenate([p.pose_ids for p in parts]),
            layout=first.layout,
            effects=first.effects,
            sampler=first.sampler,
        )


def _markers_from_points(points: np.ndarray, step: float, n: int = N_MARKERS):
    """Batched uniform-arc marker extraction, (B, n, 3) in mm."""
    B, m, _ = points.shape
    length = (m - 1) * step
    s_targets = np.linspace(0.0, length, n)
    pos = s_targets / step
    i0 = np.minimum(pos.astype(int), m - 2)
    frac = (pos - i0)[None, :, None]
    coords = points[:, i0, :] * (1 - frac) + points[:, i0 + 1, :] * frac
    return (coords - coords[:, :1, :]) * 1000.0


def _bulk_from_fields(kappa_half, theta_half, layout, effects, sampler, seeds, kind, seed):
    """Spectra + ground truth for field arrays sampled at half-step abscissae."""
    N = kappa_half.shape[0]
    n_steps = (kappa_half.shape[1] - 1) // 2
    step = layout.length / n_steps
    s_half = np.linspace(0.0, layout.length, 2 * n_steps + 1)

    points = integrate_many(kappa_half, theta_half, np.zeros_like(kappa_half), layout.length, step)
    shapes = _markers_from_points(points, step)

    plane_kappa = np.stack(
        [np.interp(layout.plane_positions, s_half, k) for k in kappa_half]
    )
    plane_theta_raw = np.stack(
        [np.interp(layout.plane_positions, s_half, t) for t in theta_half]
    )
    plane_theta = np.mod(plane_theta_raw + np.pi, 2 * np.pi) - np.pi

    k2 = kappa_half**2
    kc = kappa_half * np.cos(theta_half)
    ks = kappa_half * np.sin(theta_half)
    dh = np.diff(s_half)

    def cum(y):
        out = np.zeros_like(y)
        np.cumsum(0.5 * (y[:, 1:] + y[:, :-1]) * dh, axis=1, out=out[:, 1:])
        return out

    B, C, S = cum(k2), cum(kc), cum(ks)
    planes_of = lambda arr: np.stack(
        [np.interp(layout.plane_positions, s_half, row) for row in arr]
    )
    Bp, Cp, Sp = planes_of(B), planes_of(C), planes_of(S)
    s_last = layout.plane_positions[-1]
    tail_of = lambda arr: arr[:, -1] - np.stack(
        [np.interp(s_last, s_half, row) for row in arr]
    )
    tB, tC, tS = tail_of(B), tail_of(C), tail_of(S)

    raw = _spectrum_batch(plane_kappa, plane_theta, Bp, Cp, Sp, tB, tC, tS, layout, effects)
    spectra = np.empty((N, 3, N_GRID), dtype=np.float32)
    for i in range(N):
        rng_i = np.random.default_rng(int(seeds[i]))
        for j in range(3):
            scan = raw[i]
            if effects.noise_sigma > 0:
                scan = scan + rng_i.normal(0.0, effects.noise_sigma, N_GRID)
            scan = np.maximum(scan, 0.0)
            spectra[i, j] = (scan / scan.max()).astype(np.float32)
    return spectra, shapes.astype(np.float32), plane_kappa.astype(np.float32), plane_theta.astype(
        np.float32
    )


_TEMPLATE_REPS = 2
_TEMPLATE_MEASUREMENTS = 40


def template_segments(layout: SensorLayout):
    """The four template bends: middle 30 mm between planes 2-3, 3-4, 4-5,
    and a 30 mm segment starting 10 mm after the last plane."""
    p = layout.plane_positions
    segs = []
    for i in (1, 2, 3):
        mid = 0.5 * (p[i] + p[i + 1])
        segs.append((mid - 0.015, mid + 0.015))
    segs.append((p[-1] + 0.01, p[-1] + 0.04))
    return segs


TEMPLATE_BEND_RADIUS = 0.05  # m


def generate_dataset(
    kind: str,
    count: int,
    layout: SensorLayout,
    effects: EffectsConfig,
    cfg: ShapeSamplerConfig,
    seed: int,
    chunk: int = 2048,
) -> Dataset:
    """Deterministic bulk sample generation.

    Per-sample randomness derives from seed XOR index, so the result is
    independent of chunking and may be generated in parallel. The template
    kind ignores ``count`` and always emits 4 segments x 2 repetitions x
    40 measurements = 320 samples.
    """
    if kind not in ("random", "trajectory", "template"):
        raise InvalidInputError(f"unknown dataset kind {kind!r}")
    if count < 1:
        raise InvalidInputError("count must be at least 1")

    n_steps = int(round(layout.length / _CURVE_STEP))
    s_half = np.linspace(0.0, layout.length, 2 * n_steps + 1)

    if kind == "template":
        segs = template_segments(layout)
        kappas, thetas, seeds, poses = [], [], [], []
        pose = 0
        for seg in segs:
            prof = template_shape(seg, TEMPLATE_BEND_RADIUS, layout)
            k, th, _ = prof.evaluate(s_half)
            for _rep in range(_TEMPLATE_REPS):
                for _m in range(_TEMPLATE_MEASUREMENTS):
                    kappas.append(k)
                    thetas.append(th)
                    poses.append(pose)
                pose += 1
        kappa_half = np.array(kappas)
        theta_half = np.array(thetas)
        seeds = np.array([seed ^ i for i in range(kappa_half.shape[0])], dtype=np.uint64)
        pose_ids = np.array(poses, dtype=np.int32)
    else:
        d = cfg.n_coeffs
        if kind == "random":
            z = np.stack(
                [np.random.default_rng(seed ^ i).standard_normal(d) for i in range(count)]
            )
        else:
            z = _trajectory_coeffs(cfg, count, np.random.default_rng(seed))
        kappa_half, theta_half = _fields_from_coeffs(z, cfg, s_half, layout.length)
        seeds = np.array([seed ^ i for i in range(count)], dtype=np.uint64)
        pose_ids = np.full(count, -1, dtype=np.int32)

    parts = []
    N = kappa_half.shape[0]
    for start in range(0, N, chunk):
        sl = slice(start, min(start + chunk, N))
        spectra, shapes, pk, pt = _bulk_from_fields(
            kappa_half[sl], theta_half[sl], layout, effects, cfg, seeds[sl], kind, seed
        )
        parts.append(
            Dataset(
                kind=kind,
                seed=seed,
                spectra=spectra,
                shapes=shapes,
                plane_kappa=pk,
                plane_theta=pt,
                sample_seeds=seeds[sl],
                pose_ids=pose_ids[sl],
                layout=layout,
                effects=effects,
                sampler=cfg,
            )
        )
    return Dataset.concatenate(parts)
