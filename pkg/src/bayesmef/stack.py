"""Exposure stack container and input validation helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["StackError", "ExposureStack", "check_stack", "saturation_mask", "mean_dark_frames"]


class StackError(ValueError):
    """Malformed exposure data (shapes, ranges, thresholds)."""


@dataclass(frozen=True, eq=False)
class ExposureStack:
    """K count images of one scene recorded with different exposures.

    Attributes
    ----------
    counts : ndarray, shape (K, H, W)
        Observed counts, clipped by the detector at ``n_max``. Integer in
        practice; real values are tolerated so that noiseless test inputs can
        be injected.
    times : ndarray, shape (K,)
        Acquisition times, strictly positive.
    background : ndarray, shape (K, H, W)
        Mean dark-frame rate per measurement and pixel.
    n_max : int
        Censoring threshold. A pixel reading exactly ``n_max`` is saturated.
    """

    counts: np.ndarray
    times: np.ndarray
    background: np.ndarray
    n_max: int

    @classmethod
    def from_arrays(cls, counts, times, background=0.0, n_max=None):
        """Build a validated stack, broadcasting ``background``.

        ``background`` may be a scalar, one scalar per measurement, or full
        images. ``n_max`` defaults to the largest count in the data.
        """
        counts = np.asarray(counts)
        if counts.ndim == 2:
            counts = counts[None]
        if counts.ndim != 3:
            raise StackError(f"counts must have shape (K, H, W), got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.number):
            raise StackError("counts must be numeric")
        times = np.atleast_1d(np.asarray(times, dtype=float))
        bg = np.asarray(background, dtype=float)
        if bg.ndim == 1:
            bg = bg[:, None, None]
        try:
            bg = np.broadcast_to(bg, counts.shape).astype(float)
        except ValueError:
            raise StackError(
                f"background of shape {np.shape(background)} does not match counts {counts.shape}"
            ) from None
        if n_max is None:
            n_max = int(np.max(counts)) if counts.size else 1
        return check_stack(cls(counts, times, bg, int(n_max)))

    @property
    def n_measurements(self):
        return self.counts.shape[0]

    @property
    def shape(self):
        return self.counts.shape[1:]

    def subset(self, indices):
        """Stack restricted to the given measurement indices."""
        idx = np.asarray(indices)
        return ExposureStack(self.counts[idx], self.times[idx], self.background[idx], self.n_max)


def check_stack(stack):
    """Validate an :class:`ExposureStack` and return it unchanged.

    Raises :class:`StackError` on the first violated invariant.
    """
    if not isinstance(stack, ExposureStack):
        raise TypeError(f"expected ExposureStack, got {type(stack).__name__}")
    counts, times, bg = stack.counts, stack.times, stack.background
    if counts.ndim != 3 or counts.shape[0] < 1 or min(counts.shape[1:]) < 1:
        raise StackError(f"counts must have shape (K>=1, H>=1, W>=1), got {counts.shape}")
    k = counts.shape[0]
    if times.shape != (k,):
        raise StackError(f"expected {k} acquisition times, got {times.shape}")
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise StackError("acquisition times must be finite and positive")
    if bg.shape != counts.shape:
        raise StackError(f"background shape {bg.shape} != counts shape {counts.shape}")
    if not np.all(np.isfinite(bg)) or np.any(bg < 0):
        raise StackError("background must be finite and nonnegative")
    if stack.n_max < 1:
        raise StackError("n_max must be a positive integer")
    if not np.all(np.isfinite(counts)):
        raise StackError("counts contain non-finite values")
    bad = (counts < 0) | (counts > stack.n_max)
    if bad.any():
        i, r, c = np.argwhere(bad)[0]
        raise StackError(
            f"count {counts[i, r, c]} at measurement {i}, pixel ({r}, {c}) "
            f"outside [0, {stack.n_max}]"
        )
    return stack


def saturation_mask(stack):
    """Binary weights, True where a pixel is below the censoring threshold."""
    return stack.counts < stack.n_max


def mean_dark_frames(frames):
    """Pixel-wise mean of J repeated dark frames."""
    frames = [np.asarray(f, dtype=float) for f in frames]
    if not frames:
        raise StackError("at least one dark frame is required")
    shape = frames[0].shape
    for j, f in enumerate(frames):
        if f.shape != shape:
            raise StackError(f"dark frame {j} has shape {f.shape}, expected {shape}")
    return np.mean(np.stack(frames), axis=0)
