"""
Detector-array bookkeeping and far-field coherence of thermal sources.

Positions are continuous lengths in metres. Pixel indices are 1-based and
only enter through DetectorArray.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

PIXEL_PITCH_M = 5.3e-6
WAVELENGTH_M = 633e-9
DISC_RADIUS_M = 100e-6
SLIT_WIDTH_M = 200e-6
# Puts the first J1 zero of a 100 um disc at a separation of 182 pixels.
SOURCE_DISTANCE_M = 0.25

# Below this |u| the kernels switch to their Taylor series.
TAYLOR_CUTOFF = 1e-4


class SourceKind(str, Enum):
    CIRCULAR_DISC = "disc"
    SLIT = "slit"


@dataclass(frozen=True)
class DetectorArray:
    """One-dimensional pixel array in the detection plane."""

    pixel_count: int
    pixel_pitch: float = PIXEL_PITCH_M
    wavelength: float = WAVELENGTH_M

    def __post_init__(self):
        if int(self.pixel_count) != self.pixel_count or self.pixel_count < 2:
            raise ValueError(f"pixel_count must be an integer >= 2, got {self.pixel_count}")
        if not self.pixel_pitch > 0:
            raise ValueError(f"pixel_pitch must be positive, got {self.pixel_pitch}")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength

    @property
    def pixel_indices(self) -> np.ndarray:
        return np.arange(1, self.pixel_count + 1)

    def positions(self, indices=None) -> np.ndarray:
        """Physical positions of the given 1-based pixel indices (all pixels by default)."""
        if indices is None:
            indices = self.pixel_indices
        indices = np.asarray(indices)
        if np.any(indices < 1) or np.any(indices > self.pixel_count):
            raise IndexError(f"pixel index outside 1..{self.pixel_count}")
        return (indices - 1) * self.pixel_pitch


@dataclass(frozen=True)
class SourceGeometry:
    """
    Parametric source model.

    `dimension` is the disc radius or the slit width. `angular_diameter`, when
    given, replaces the value derived from dimension and distance; curve plots
    use it to work directly in angle.
    """

    kind: SourceKind = SourceKind.CIRCULAR_DISC
    dimension: float = DISC_RADIUS_M
    distance: float = SOURCE_DISTANCE_M
    angular_diameter_override: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        if not self.dimension > 0:
            raise ValueError(f"source dimension must be positive, got {self.dimension}")
        if not self.distance > 0:
            raise ValueError(f"source distance must be positive, got {self.distance}")
        if self.angular_diameter_override is not None and not self.angular_diameter_override > 0:
            raise ValueError("angular diameter override must be positive")

    @property
    def angular_diameter(self) -> float:
        """Small-angle angular size: 2a/L for the disc, a/L for the slit."""
        if self.angular_diameter_override is not None:
            return self.angular_diameter_override
        if self.kind is SourceKind.SLIT:
            return self.dimension / self.distance
        return 2.0 * self.dimension / self.distance

    @property
    def exact_angular_diameter(self) -> float:
        if self.kind is SourceKind.SLIT:
            return 2.0 * np.arctan(self.dimension / (2.0 * self.distance))
        return 2.0 * np.arctan(self.dimension / self.distance)

    def with_dimension(self, dimension: float) -> "SourceGeometry":
        return replace(self, dimension=float(dimension))


def physical_position(index: int, array: DetectorArray) -> float:
    """
    Map a 1-based pixel index to its position, pixel 1 sitting at the origin.

    Raises:
        IndexError: if index is outside 1..M
    """
    if not 1 <= index <= array.pixel_count:
        raise IndexError(f"pixel index {index} outside 1..{array.pixel_count}")
    return (index - 1) * array.pixel_pitch


def kernel_argument(x1, x2, source: SourceGeometry, array: DetectorArray):
    """u = theta * k * |x1 - x2| / 2."""
    separation = np.abs(np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float))
    return 0.5 * source.angular_diameter * array.wavenumber * separation


def airy_kernel(u):
    """2 J1(u) / u with the u -> 0 limit."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < TAYLOR_CUTOFF
    u2 = u * u
    safe = np.where(small, 1.0, u)
    series = 1.0 - u2 / 8.0 + u2 * u2 / 192.0 - u2 * u2 * u2 / 9216.0
    return np.where(small, series, 2.0 * special.j1(safe) / safe)


def sinc_kernel(u):
    """sin(u) / u with the u -> 0 limit."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < TAYLOR_CUTOFF
    u2 = u * u
    safe = np.where(small, 1.0, u)
    series = 1.0 - u2 / 6.0 + u2 * u2 / 120.0 - u2 * u2 * u2 / 5040.0
    return np.where(small, series, np.sin(safe) / safe)


KERNELS = {
    SourceKind.CIRCULAR_DISC: airy_kernel,
    SourceKind.SLIT: sinc_kernel,
}


def coherence(x1, x2, source: SourceGeometry, array: DetectorArray):
    """
    Far-field complex degree of coherence between two positions.

    Both supported geometries give a real kernel of u = theta k |x1 - x2| / 2.
    Broadcasts over array inputs; returns a float for scalar inputs.
    """
    value = KERNELS[source.kind](kernel_argument(x1, x2, source, array))
    return value.item() if value.ndim == 0 else value


def coherence_matrix(positions, source: SourceGeometry, array: DetectorArray) -> np.ndarray:
    """Symmetric matrix of pairwise coherences with a unit diagonal."""
    positions = np.atleast_1d(np.asarray(positions, dtype=float))
    if positions.size == 0:
        raise ValueError("coherence_matrix needs at least one position")
    gamma = np.asarray(coherence(positions[:, None], positions[None, :], source, array))
    gamma = 0.5 * (gamma + gamma.T)
    np.fill_diagonal(gamma, 1.0)
    return gamma


def kernel_zeros(kind: SourceKind, count: int = 2) -> np.ndarray:
    """First `count` positive zeros of the geometry kernel in u."""
    if SourceKind(kind) is SourceKind.SLIT:
        return np.pi * np.arange(1, count + 1)
    return special.jn_zeros(1, count)


def coherence_zero_separations(source: SourceGeometry, array: DetectorArray, count: int = 2) -> np.ndarray:
    """Pixel separations (fractional) at which the coherence vanishes."""
    u = kernel_zeros(source.kind, count)
    return 2.0 * u / (source.angular_diameter * array.wavenumber * array.pixel_pitch)
