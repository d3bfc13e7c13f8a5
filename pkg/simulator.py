"""
Synthetic detector frames of thermal light and measured sample correlations.

Every block of frames draws from its own counter-based Philox stream keyed by
(master seed, trial, stream, block), so a frame set is reproducible from its
seed and independent of how blocks are scheduled.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from geometry import DetectorArray, SourceGeometry, coherence_matrix
from noise import NoiseModel
from statistics_utils import DetectionScheme, ReferenceScheme

logger = logging.getLogger(__name__)

FRAME_BLOCK = 4096
FIELD_STREAM = 0
NOISE_STREAM = 1
# Eigenvalues of the field covariance below this fraction of <I> are dropped.
FIELD_RANK_TOL = 1e-12
# Negative eigenvalues beyond this fraction of the largest one mean an invalid coherence matrix.
NEGATIVE_EIGEN_TOL = 1e-8


class FieldFactorizationError(np.linalg.LinAlgError):
    """Field covariance is not positive semidefinite."""


@dataclass
class FrameSet:
    """N x M intensities, frame-major, with the seed and settings that produced them."""

    frames: np.ndarray
    seed: int
    trial: int = 0
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be a 2-D array, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite intensities")
        if np.any(self.frames < 0):
            raise ValueError("frames contain negative intensities")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def pixel_count(self) -> int:
        return self.frames.shape[1]


def frame_rng(seed: int, trial: int, stream: int, block: int) -> np.random.Generator:
    """Philox generator for one block of frames."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(trial), int(stream), int(block)))
    return np.random.Generator(np.random.Philox(sequence))


def frame_blocks(frame_count: int, block_size: int = FRAME_BLOCK):
    """Yield (block index, start, stop) covering frame_count frames."""
    for block, start in enumerate(range(0, frame_count, block_size)):
        yield block, start, min(start + block_size, frame_count)


def field_factor(source: SourceGeometry, array: DetectorArray, mean_intensity: float) -> np.ndarray:
    """
    Factor F with F F^T = (<I>/2) Gamma over all pixels.

    Uses the symmetric eigendecomposition, keeping only the numerically
    positive part of the spectrum, so near-duplicate pixels do not break it.
    """
    if not mean_intensity > 0:
        raise ValueError(f"mean intensity must be positive, got {mean_intensity}")
    gamma = coherence_matrix(array.positions(), source, array)
    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * mean_intensity * gamma)
    if eigenvalues[0] < -NEGATIVE_EIGEN_TOL * eigenvalues[-1]:
        raise FieldFactorizationError(
            f"coherence matrix has eigenvalue {eigenvalues[0]:.3g}; not a valid covariance"
        )
    keep = eigenvalues > FIELD_RANK_TOL * mean_intensity
    logger.debug("field factor rank %d of %d", keep.sum(), keep.size)
    return eigenvectors[:, keep] * np.sqrt(eigenvalues[keep])


def frameset_metadata(source: SourceGeometry, array: DetectorArray, mean_intensity: float,
                      noise: Optional[NoiseModel] = None) -> Dict[str, str]:
    metadata = {
        "SOURCE_KIND": source.kind.value,
        "SOURCE_DIMENSION_UM": repr(source.dimension * 1e6),
        "SOURCE_DISTANCE_M": repr(source.distance),
        "PIXEL_COUNT": str(array.pixel_count),
        "PIXEL_PITCH_UM": repr(array.pixel_pitch * 1e6),
        "WAVELENGTH_NM": repr(array.wavelength * 1e9),
        "MEAN_INTENSITY": repr(float(mean_intensity)),
    }
    if source.angular_diameter_override is not None:
        metadata["ANGULAR_DIAMETER_RAD"] = repr(source.angular_diameter_override)
    if noise is not None:
        metadata["NOISE_NU"] = repr(noise.nu)
        metadata["NOISE_SIGMA"] = repr(noise.sigma)
    return metadata


def _field_block(factor: np.ndarray, seed: int, trial: int, block: int, count: int) -> np.ndarray:
    rng = frame_rng(seed, trial, FIELD_STREAM, block)
    normals = rng.standard_normal((2, count, factor.shape[1]))
    real = normals[0] @ factor.T
    imag = normals[1] @ factor.T
    return real * real + imag * imag


def _noise_block(noise: NoiseModel, seed: int, trial: int, block: int, shape) -> np.ndarray:
    if noise.sigma == 0:
        return np.full(shape, noise.nu)
    rng = frame_rng(seed, trial, NOISE_STREAM, block)
    return np.maximum(rng.normal(noise.nu, noise.sigma, size=shape), 0.0)


def sample_thermal_fields(source: SourceGeometry, array: DetectorArray, mean_intensity: float,
                          frame_count: int, seed: int, trial: int = 0) -> FrameSet:
    """
    Draw N frames of ideal thermal intensities |a + ib|^2.

    a and b are independent real Gaussian vectors with covariance
    (<I>/2) Gamma, drawn as F z for standard normal z.
    """
    if int(frame_count) != frame_count or frame_count < 1:
        raise ValueError(f"frame count must be a positive integer, got {frame_count}")
    factor = field_factor(source, array, mean_intensity)
    frames = np.empty((frame_count, array.pixel_count))
    for block, start, stop in frame_blocks(frame_count):
        frames[start:stop] = _field_block(factor, seed, trial, block, stop - start)
    return FrameSet(frames, seed, trial, frameset_metadata(source, array, mean_intensity))


def apply_detector_noise(frameset: FrameSet, noise: NoiseModel, seed: Optional[int] = None) -> FrameSet:
    """Multiply every intensity by an independent efficiency draw, clamped at zero."""
    seed = frameset.seed if seed is None else seed
    noisy = np.empty_like(frameset.frames)
    for block, start, stop in frame_blocks(frameset.frame_count):
        eta = _noise_block(noise, seed, frameset.trial, block, (stop - start, frameset.pixel_count))
        noisy[start:stop] = eta * frameset.frames[start:stop]
    metadata = dict(frameset.metadata, NOISE_NU=repr(noise.nu), NOISE_SIGMA=repr(noise.sigma))
    return FrameSet(noisy, frameset.seed, frameset.trial, metadata)


def reference_product(frames: np.ndarray, scheme: DetectionScheme) -> np.ndarray:
    """Per-frame product I_k(s_2) ... I_k(s_n) over the expanded reference list."""
    product = np.ones(frames.shape[0])
    for pixel in scheme.expanded_references:
        product = product * frames[:, pixel - 1]
    return product


def _reference_weights(frames: np.ndarray, scheme: DetectionScheme) -> np.ndarray:
    if scheme.scheme is ReferenceScheme.REPEATED:
        return frames[:, scheme.reference_pixels[0] - 1] ** (scheme.order - 1)
    return reference_product(frames, scheme)


def sample_correlation(frameset: FrameSet, scheme: DetectionScheme) -> np.ndarray:
    """
    Measured correlation (1/N) sum_k I_k(x_i) I_k(s_2) ... I_k(s_n) for every
    scanning pixel.
    """
    frames = frameset.frames
    for pixel in scheme.reference_pixels + scheme.scan_pixels:
        if not 1 <= pixel <= frameset.pixel_count:
            raise IndexError(f"pixel index {pixel} outside 1..{frameset.pixel_count}")
    scan = np.asarray(scheme.scan_pixels) - 1
    weights = _reference_weights(frames, scheme)
    return frames[:, scan].T @ weights / frameset.frame_count


def stream_correlations(source: SourceGeometry, array: DetectorArray, mean_intensity: float,
                        noise: NoiseModel, frame_count: int, schemes: Iterable[DetectionScheme],
                        seed: int, trial: int = 0) -> Dict[DetectionScheme, np.ndarray]:
    """
    Measured correlations for several schemes from one simulated data set.

    Frames are generated and noised block by block with the same keys as
    sample_thermal_fields and apply_detector_noise, then discarded; only the
    running sums are kept.
    """
    schemes = list(schemes)
    factor = field_factor(source, array, mean_intensity)
    sums = {scheme: np.zeros(len(scheme.scan_pixels)) for scheme in schemes}
    for block, start, stop in frame_blocks(frame_count):
        count = stop - start
        frames = _field_block(factor, seed, trial, block, count)
        frames *= _noise_block(noise, seed, trial, block, frames.shape)
        for scheme in schemes:
            scan = np.asarray(scheme.scan_pixels) - 1
            sums[scheme] += frames[:, scan].T @ _reference_weights(frames, scheme)
    return {scheme: total / frame_count for scheme, total in sums.items()}
