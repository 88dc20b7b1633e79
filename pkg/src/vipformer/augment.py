"""Random point-cloud transformations used to build the two contrastive views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

UP_AXIS = 2  # z is up for every generated shape


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_axis: str = "up"
    rotation_range: tuple = (0.0, 2.0 * np.pi)
    translation_range: tuple = (-0.2, 0.2)
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    scale_range: tuple = (0.8, 1.2)
    image_flip: bool = False

    def validate(self):
        if self.rotation_axis not in ("up", "arbitrary"):
            raise ParameterError(f"rotation_axis must be 'up' or 'arbitrary', got {self.rotation_axis!r}")
        for name in ("rotation_range", "translation_range", "scale_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ParameterError(f"{name} lower bound {lo} exceeds upper bound {hi}")
        if self.scale_range[0] <= 0:
            raise ParameterError("scale_range bounds must be positive")
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ParameterError("jitter_sigma and jitter_clip must be non-negative")
        return self

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(rotation_range=(0.0, 0.0), translation_range=(0.0, 0.0),
                   jitter_sigma=0.0, jitter_clip=0.0, scale_range=(1.0, 1.0))


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    t = 1.0 - c
    return np.array([
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ])


def apply_augmentation(points: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    """Scale, rotate, translate, then add clipped Gaussian jitter.

    Each stage draws from its own substream of ``rng``.
    """
    spec.validate()
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ParameterError(f"points must be [N, 3], got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ParameterError("points contain non-finite values")
    dtype = points.dtype
    out = points.astype(np.float64)

    scale = rng.substream("scale").uniform(*spec.scale_range)
    out = out * scale

    rot = rng.substream("rotate")
    angle = rot.uniform(*spec.rotation_range)
    if spec.rotation_axis == "up":
        axis = np.zeros(3)
        axis[UP_AXIS] = 1.0
    else:
        axis = rot.normal(size=3)
        axis /= np.linalg.norm(axis)
    out = out @ rotation_matrix(axis, angle).T

    shift = rng.substream("translate").uniform(*spec.translation_range, size=3)
    out = out + shift

    noise = rng.substream("jitter").normal(0.0, 1.0, size=out.shape) * spec.jitter_sigma
    out = out + np.clip(noise, -spec.jitter_clip, spec.jitter_clip)
    return out.astype(dtype, copy=False)


def two_views(points: np.ndarray, spec: AugmentationSpec, rng):
    return (apply_augmentation(points, spec, rng.substream("view", 1)),
            apply_augmentation(points, spec, rng.substream("view", 2)))


def augment_image(image: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    """Optional horizontal flip; images are otherwise passed through untouched."""
    if spec.image_flip and rng.substream("flip").random() < 0.5:
        return image[:, ::-1, :].copy()
    return image
