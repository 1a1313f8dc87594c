"""Geometry of the sphere S^{d-1}(radius): sampling, retraction, tangent maps.

Data points and RBF particle positions live on the sphere of radius
sqrt(d).  Constrained dynamics is realized as tangent projection of the
drift followed by retraction of the updated point, so nothing here ever
computes a Lagrange multiplier explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream, generator_for


class InvalidDimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


# Relative half-width of the band around the target radius inside which a
# vector is returned unchanged.  One retraction lands within a few ulps of
# the radius, so a second retraction is a bit-for-bit no-op.
_RETRACT_GATE = 1e-14


@dataclass(frozen=True)
class SpherePoint:
    """A point constrained to |coords|_2 = radius (relative tol 1e-12)."""

    coords: np.ndarray
    radius: float
    d: int = field(init=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 1 or coords.size < 1:
            raise InvalidDimensionError("coords must be a 1-d vector of length >= 1")
        if not (self.radius > 0.0):
            raise DegenerateVectorError(f"radius must be positive, got {self.radius}")
        nrm = float(np.linalg.norm(coords))
        if abs(nrm - self.radius) > 1e-12 * self.radius:
            raise DegenerateVectorError(
                f"|coords| = {nrm!r} is off the sphere of radius {self.radius!r}"
            )
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "d", coords.size)


def sample_sphere_rows(d: int, size: int, rng) -> np.ndarray:
    """(size, d) array of i.i.d. uniform points on S^{d-1}(sqrt(d)).

    Normalized Gaussian vectors scaled by sqrt(d); rows with underflowing
    norm are redrawn.
    """
    if d < 1:
        raise InvalidDimensionError(f"d must be >= 1, got {d}")
    gen = generator_for(rng)
    X = gen.standard_normal((size, d))
    nrm = np.linalg.norm(X, axis=1)
    while np.any(nrm < 1e-12):
        bad = nrm < 1e-12
        X[bad] = gen.standard_normal((int(bad.sum()), d))
        nrm = np.linalg.norm(X, axis=1)
    # divide directly (not reciprocal-multiply) so d=1 gives exactly +-1
    return X * np.sqrt(d) / nrm[:, None]


def sample_sphere(d: int, rng: RngStream | np.random.Generator) -> SpherePoint:
    """One uniform point on S^{d-1}(sqrt(d))."""
    row = sample_sphere_rows(d, 1, rng)[0]
    return SpherePoint(row, float(np.sqrt(d)))


def retract_rows(Z: np.ndarray, radius: float) -> np.ndarray:
    """Rescale each row of Z onto the sphere of the given radius.

    Rows already within _RETRACT_GATE (relative) of the radius pass through
    bit-for-bit, which makes the retraction exactly idempotent.
    """
    if not (radius > 0.0):
        raise DegenerateVectorError(f"radius must be positive, got {radius}")
    Z = np.asarray(Z, dtype=np.float64)
    nrm = np.linalg.norm(Z, axis=-1)
    if np.any(nrm == 0.0):
        raise DegenerateVectorError("cannot retract a zero vector onto the sphere")
    scale = np.where(np.abs(nrm - radius) <= _RETRACT_GATE * radius, 1.0, radius / nrm)
    return Z * scale[..., None]


def retract_to_sphere(v: np.ndarray, radius: float) -> SpherePoint:
    """Retract a single ambient vector onto S^{d-1}(radius)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidDimensionError("retract_to_sphere expects a 1-d vector")
    return SpherePoint(retract_rows(v[None, :], radius)[0], radius)


def tangent_project_rows(V: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Project each row of V onto the tangent space of the sphere at the
    matching row of Z: v - (v.z / |z|^2) z."""
    V = np.asarray(V, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    zz = np.sum(Z * Z, axis=-1)
    if np.any(zz == 0.0):
        raise DegenerateVectorError("tangent projection at the origin is undefined")
    coef = np.sum(V * Z, axis=-1) / zz
    return V - coef[..., None] * Z


def tangent_project(v: np.ndarray, z: SpherePoint | np.ndarray) -> np.ndarray:
    """Tangent projection of one ambient vector at one sphere point."""
    zc = z.coords if isinstance(z, SpherePoint) else np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != zc.shape:
        raise InvalidDimensionError(f"shape mismatch: v {v.shape} vs z {zc.shape}")
    return tangent_project_rows(v[None, :], zc[None, :])[0]
