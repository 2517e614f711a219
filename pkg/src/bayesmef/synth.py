"""Synthetic diffraction data: weak phase targets and censored exposure stacks.

Random numbers come from a counter-based hash keyed by
``(seed, stream, measurement, pixel)``; every pixel of every measurement can
be regenerated on its own, independent of image size or evaluation order.
Uniforms are turned into Poisson and Normal variates by inverse CDF.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import ndtri
from scipy.stats import poisson

from .stack import ExposureStack

__all__ = [
    "PhaseTarget",
    "SimulationParams",
    "SyntheticScene",
    "counter_uniform",
    "flux_jitter",
    "spokes_target",
    "flat_target",
    "disk_probe",
    "diffraction_intensity",
    "make_scene",
    "sample_stack",
    "sample_dark_frames",
]

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)

STREAM_BACKGROUND = 1
STREAM_COUNTS = 2
STREAM_DARK = 3
STREAM_FLUX = 4


def _mix64(z):
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _MUL1
    z ^= z >> np.uint64(27)
    z *= _MUL2
    z ^= z >> np.uint64(31)
    return z


def counter_uniform(seed, stream, measurement, pixels):
    """Uniform(0, 1) variates, one per entry of ``pixels`` (flat indices).

    A pure function of its integer arguments: no state, no ordering effects.
    Values lie strictly inside (0, 1).
    """
    with np.errstate(over="ignore"):
        pix = np.asarray(pixels, dtype=np.uint64)
        key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        key = _mix64(key + _GOLDEN)
        key = _mix64(key ^ (np.uint64(int(stream)) * _GOLDEN + np.uint64(int(measurement))))
        h = _mix64(key + (pix + np.uint64(1)) * _GOLDEN)
        h = _mix64(h ^ key)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def flux_jitter(n_measurements, seed, low=0.5, high=2.0, reference_index=None):
    """Log-uniform multiplicative flux errors in ``[low, high]``, one per measurement.

    Models illumination power drifting between acquisitions. The reference
    measurement (if given) gets exactly 1 so that it fixes the common unit.
    """
    if not 0 < low <= high:
        raise ValueError("need 0 < low <= high")
    u = counter_uniform(seed, STREAM_FLUX, 0, np.arange(n_measurements))
    factors = np.exp(np.log(low) + u * (np.log(high) - np.log(low)))
    if reference_index is not None:
        factors[reference_index] = 1.0
    return factors


@dataclass
class PhaseTarget:
    phase: np.ndarray
    rho: float
    pattern: str = "spokes"

    @property
    def size(self):
        return self.phase.shape[0]


@dataclass
class SimulationParams:
    """Acquisition protocol. Defaults: three flux levels, six repeats each."""

    flux_factors: tuple = (1.0, 8.0, 64.0)
    repeats: int = 6
    background_mean: float = 100.0
    background_variance: float = 0.8
    censor_threshold: int = 2**11
    peak_counts: float = 2.0**7
    seed: int = 0
    # acquisition times reported to the fusion; None means equal to flux_factors
    times: Union[tuple, None] = None

    def validate(self):
        if len(self.flux_factors) < 1 or any(c <= 0 for c in self.flux_factors):
            raise ValueError("flux factors must be positive")
        if self.times is not None:
            if len(self.times) != self.n_measurements or any(t <= 0 for t in self.times):
                raise ValueError("times must hold one positive value per measurement")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.censor_threshold < 1:
            raise ValueError("censor threshold must be >= 1")
        if self.background_variance < 0:
            raise ValueError("background variance must be nonnegative")
        if self.peak_counts < 0:
            raise ValueError("peak counts must be nonnegative")

    @property
    def n_measurements(self):
        return len(self.flux_factors) * self.repeats

    def measurement_flux(self):
        """Flux factor of every measurement, grouped by level."""
        return np.repeat(np.asarray(self.flux_factors, dtype=float), self.repeats)

    def measurement_times(self):
        if self.times is None:
            return self.measurement_flux()
        return np.asarray(self.times, dtype=float)


@dataclass
class SyntheticScene:
    ground_truth_intensity: np.ndarray
    target: PhaseTarget
    params: SimulationParams
    backgrounds: np.ndarray = field(repr=False)


def spokes_target(size, num_spokes, rho):
    """Binary spoke (Siemens star) phase pattern with ``num_spokes`` raised sectors.

    The pattern alternates ``2 * num_spokes`` equal sectors around the grid
    center ``(size // 2, size // 2)``; raised sectors carry phase ``rho``. An
    even spoke count makes the pattern point symmetric about the center.
    """
    if size < 8:
        raise ValueError("size must be >= 8")
    if num_spokes < 2 or num_spokes % 2:
        raise ValueError("num_spokes must be even and >= 2")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    y, x = np.mgrid[:size, :size] - size // 2
    theta = np.mod(np.arctan2(y, x), 2.0 * np.pi)
    # integer sector index; boundary pixels snap consistently under rotation by pi
    sector = np.floor(np.round(theta * num_spokes / np.pi, 9)).astype(int)
    phase = np.where(sector % 2 == 0, float(rho), 0.0)
    return PhaseTarget(phase=phase, rho=float(rho), pattern="spokes")


def flat_target(size, rho=0.0):
    return PhaseTarget(phase=np.full((size, size), float(rho)), rho=float(rho), pattern="flat")


def disk_probe(size, diameter=None, taper=None):
    """Real circular aperture with a raised-cosine edge, centered like the target."""
    diameter = size / 2 if diameter is None else diameter
    taper = 2.0 if taper is None else taper
    y, x = np.mgrid[:size, :size] - size // 2
    r = np.hypot(x, y)
    r0 = diameter / 2 - taper / 2
    edge = np.clip((r - r0) / taper, 0.0, 1.0)
    return (0.5 * (1.0 + np.cos(np.pi * edge))).astype(complex)


def diffraction_intensity(target, probe, peak=None):
    """Far-field intensity ``|F[exp(i phase) * probe]|^2`` with zero frequency centered.

    Uses the unitary DFT, so before scaling the total intensity equals the
    exit-wave energy. ``peak`` rescales the pattern so its maximum is ``peak``.
    """
    probe = np.asarray(probe)
    if probe.shape != target.phase.shape:
        raise ValueError(f"probe shape {probe.shape} != target shape {target.phase.shape}")
    exit_wave = np.exp(1j * target.phase) * probe
    far = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(exit_wave), norm="ortho"))
    intensity = np.abs(far) ** 2
    if peak is not None:
        top = intensity.max()
        intensity = intensity * (peak / top) if top > 0 else intensity
    return intensity


def make_scene(size=128, rho=1.0, params=None, num_spokes=16, probe=None):
    """Ground truth and per-measurement backgrounds for one scan position."""
    params = SimulationParams() if params is None else params
    params.validate()
    target = spokes_target(size, num_spokes, rho)
    probe = disk_probe(size) if probe is None else probe
    # same illumination for every rho: the unscattered beam peaks at peak_counts
    beam_peak = diffraction_intensity(flat_target(size), probe).max()
    truth = diffraction_intensity(target, probe) * (params.peak_counts / beam_peak)
    pixels = np.arange(size * size)
    sd = np.sqrt(params.background_variance)
    bgs = np.empty((params.n_measurements, size, size))
    for i in range(params.n_measurements):
        u = counter_uniform(params.seed, STREAM_BACKGROUND, i, pixels)
        draw = params.background_mean + sd * ndtri(u)
        bgs[i] = np.maximum(draw, 0.0).reshape(size, size)
    return SyntheticScene(truth, target, params, bgs)


def _poisson_draw(seed, stream, measurement, rate):
    rate = np.asarray(rate, dtype=float)
    u = counter_uniform(seed, stream, measurement, np.arange(rate.size))
    return poisson.ppf(u, rate.ravel()).reshape(rate.shape).astype(np.int64)


def sample_stack(scene, dark_frames=None):
    """Draw censored counts for every measurement of ``scene``.

    With ``dark_frames=None`` the stack carries the exact simulated
    backgrounds; with an integer J it carries the mean of J simulated dark
    frames per measurement instead.
    """
    p = scene.params
    flux = p.measurement_flux()
    shape = scene.ground_truth_intensity.shape
    counts = np.empty((p.n_measurements,) + shape, dtype=np.int64)
    for i, c in enumerate(flux):
        rate = c * scene.ground_truth_intensity + scene.backgrounds[i]
        counts[i] = np.minimum(_poisson_draw(p.seed, STREAM_COUNTS, i, rate), p.censor_threshold)
    if dark_frames is None:
        background = scene.backgrounds.copy()
    else:
        background = np.stack(
            [sample_dark_frames(scene, i, dark_frames).mean(axis=0) for i in range(p.n_measurements)]
        )
    return ExposureStack(counts, p.measurement_times(), background, int(p.censor_threshold))


def sample_dark_frames(scene, measurement, n_frames):
    """J signal-free frames ``~ Poisson(b_i)`` for one measurement, shape (J, H, W)."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    p = scene.params
    b = scene.backgrounds[measurement]
    n = b.size
    frames = np.empty((n_frames,) + b.shape, dtype=np.int64)
    for j in range(n_frames):
        # dark frame j of measurement i gets its own counter block
        u = counter_uniform(p.seed, STREAM_DARK, measurement * 1_000_003 + j, np.arange(n))
        frames[j] = poisson.ppf(u, b.ravel()).reshape(b.shape)
    return frames
