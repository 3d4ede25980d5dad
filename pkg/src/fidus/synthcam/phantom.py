"""Analytic imaging phantoms and a synthetic ultrasound slicer.

A phantom is a set of constant-intensity solids (spheres, axis-aligned
ellipsoids) on a uniform background. Slicing evaluates the phantom exactly at
each pixel's 3D position, so reconstructed volumes can be scored against
closed-form ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fidus.geometry import RigidTransform
from fidus.recon import UsFrame


@dataclass(frozen=True)
class SphereSpec:
    """Solid sphere: center mm, radius mm, 8-bit intensity."""

    center: tuple
    radius: float
    intensity: int = 200

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not 0 <= self.intensity <= 255:
            raise ValueError("intensity must fit 8 bits")

    def contains(self, points: np.ndarray) -> np.ndarray:
        delta = points - np.asarray(self.center, dtype=float)
        return np.einsum("...i,...i", delta, delta) <= self.radius ** 2


@dataclass(frozen=True)
class EllipsoidSpec:
    """Solid axis-aligned ellipsoid: center mm, semi-axes mm, intensity."""

    center: tuple
    semi_axes: tuple
    intensity: int = 200

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError("semi_axes must be positive")
        if not 0 <= self.intensity <= 255:
            raise ValueError("intensity must fit 8 bits")

    def contains(self, points: np.ndarray) -> np.ndarray:
        delta = ((points - np.asarray(self.center, dtype=float))
                 / np.asarray(self.semi_axes, dtype=float))
        return np.einsum("...i,...i", delta, delta) <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    """Shapes on a uniform background; later shapes overwrite earlier ones."""

    spheres: tuple = ()
    ellipsoids: tuple = ()
    background: int = 0

    def __post_init__(self):
        if not 0 <= self.background <= 255:
            raise ValueError("background must fit 8 bits")

    @property
    def shapes(self) -> tuple:
        return tuple(self.spheres) + tuple(self.ellipsoids)

    def bounding_box(self) -> tuple:
        """(lo, hi) corners of the box holding every shape, mm."""
        if not self.shapes:
            raise ValueError("phantom has no shapes")
        los, his = [], []
        for shape in self.shapes:
            center = np.asarray(shape.center, dtype=float)
            extent = (np.full(3, shape.radius)
                      if isinstance(shape, SphereSpec)
                      else np.asarray(shape.semi_axes, dtype=float))
            los.append(center - extent)
            his.append(center + extent)
        return np.min(los, axis=0), np.max(his, axis=0)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Exact intensity of the phantom at each 3D point."""
        out = np.full(points.shape[:-1], self.background, dtype=np.uint8)
        for shape in self.shapes:
            out[shape.contains(points)] = shape.intensity
        return out


def synth_us_slice(phantom: PhantomSpec, slice_pose: RigidTransform,
                   width: int, height: int, pixel_spacing,
                   timestamp: float = 0.0) -> UsFrame:
    """Image the phantom on a planar slice.

    slice_pose maps image-plane coordinates (x * p_w, y * p_h, 0) mm into
    the phantom's frame; each pixel takes the phantom's exact intensity at
    its mapped 3D position. A plane that misses every shape comes back as
    pure background.
    """
    p_w, p_h = pixel_spacing
    xs = np.arange(width) * p_w
    ys = np.arange(height) * p_h
    gx, gy = np.meshgrid(xs, ys)
    plane = np.stack([gx, gy, np.zeros_like(gx)], axis=-1)
    points = slice_pose.apply(plane.reshape(-1, 3)).reshape(height, width, 3)
    return UsFrame(width=width, height=height,
                   pixel_spacing=(float(p_w), float(p_h)),
                   intensities=phantom.sample(points), timestamp=timestamp)
