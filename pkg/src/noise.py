"""Fractal value noise for the procedural pure-smoke generator."""

import numpy as np


def _fade(t: np.ndarray) -> np.ndarray:
    """Quintic fade 6t^5 - 15t^4 + 10t^3."""
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(height: int, width: int, cells: float, rng: np.random.Generator) -> np.ndarray:
    """
    Smoothly interpolated lattice noise.

    Args:
        height: Output rows
        width: Output columns
        cells: Lattice cells spanning the image (larger = finer detail)
        rng: Source of the lattice values

    Returns:
        (height, width) float64 array in [0, 1]
    """
    cells = max(cells, 1.0)
    span = int(np.ceil(cells)) + 2
    lattice = rng.random((span, span))

    ys = np.arange(height) * (cells / height)
    xs = np.arange(width) * (cells / width)
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    ty = _fade(ys - yi)[:, None]
    tx = _fade(xs - xi)[None, :]

    v00 = lattice[np.ix_(yi, xi)]
    v01 = lattice[np.ix_(yi, xi + 1)]
    v10 = lattice[np.ix_(yi + 1, xi)]
    v11 = lattice[np.ix_(yi + 1, xi + 1)]

    top = v00 + tx * (v01 - v00)
    bottom = v10 + tx * (v11 - v10)
    return top + ty * (bottom - top)


def fbm(
    height: int,
    width: int,
    *,
    octaves: int,
    base_frequency: float,
    lacunarity: float,
    gain: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Octave-summed value noise, normalized by the total amplitude.

    Each octave multiplies frequency by `lacunarity` and amplitude by `gain`;
    dividing by the amplitude sum keeps the field in [0, 1].
    """
    total = np.zeros((height, width))
    amplitude, frequency, weight = 1.0, base_frequency, 0.0
    for _ in range(octaves):
        total += amplitude * value_noise(height, width, frequency, rng)
        weight += amplitude
        amplitude *= gain
        frequency *= lacunarity
    return np.clip(total / weight, 0.0, 1.0)


def radial_plume(height: int, width: int, center: tuple[float, float], radius: float) -> np.ndarray:
    """Smooth falloff (1 - (r/R)^2)^2 around a normalized (x, y) center; zero beyond R."""
    ys = (np.arange(height) + 0.5) / height - center[1]
    xs = (np.arange(width) + 0.5) / width - center[0]
    r2 = (ys[:, None] ** 2 + xs[None, :] ** 2) / radius**2
    return np.clip(1.0 - r2, 0.0, 1.0) ** 2
