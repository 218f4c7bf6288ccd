"""Spherical harmonics, direction grids and radial terms.

Conventions used throughout the package:

* real-valued spherical harmonics with orthonormal (N3D) normalization,
* ACN channel ordering, ``acn = n**2 + n + m``,
* azimuth measured counter-clockwise from +x (front) towards +y (left),
  inclination measured from +z (up),
* frequency responses follow the DSP sign convention ``exp(+j omega t)``,
  i.e. a delay of ``tau`` seconds is ``exp(-j omega tau)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "Direction",
    "SphericalGrid",
    "ShIndex",
    "acn",
    "acn_to_nm",
    "sh_indices",
    "num_sh",
    "order_of_channels",
    "eval_real_sh",
    "uniform_grid",
    "exact_weights",
    "radial_term",
    "directions_to_vectors",
    "vectors_to_directions",
    "n3d_to_sn3d",
]

MAX_SH_ORDER = 8


@dataclass(frozen=True)
class Direction:
    """A direction on the unit sphere (radians)."""

    azimuth: float
    inclination: float

    def __post_init__(self):
        if not (np.isfinite(self.azimuth) and np.isfinite(self.inclination)):
            raise ValueError("direction angles must be finite")
        object.__setattr__(self, "azimuth", float(np.mod(self.azimuth, 2 * np.pi)))
        if not 0.0 <= self.inclination <= np.pi:
            raise ValueError(f"inclination {self.inclination} outside [0, pi]")

    def to_vector(self) -> np.ndarray:
        return directions_to_vectors(np.array([self.azimuth]), np.array([self.inclination]))[0]


@dataclass(frozen=True)
class ShIndex:
    order: int
    degree: int

    def __post_init__(self):
        if self.order < 0 or abs(self.degree) > self.order:
            raise ValueError(f"invalid SH index (n={self.order}, m={self.degree})")

    @property
    def acn(self) -> int:
        return acn(self.order, self.degree)


def acn(n: int, m: int) -> int:
    return n * n + n + m


def acn_to_nm(index: int) -> tuple[int, int]:
    n = int(np.floor(np.sqrt(index)))
    return n, index - n * n - n


def num_sh(max_order: int) -> int:
    return (max_order + 1) ** 2


def sh_indices(max_order: int) -> list[ShIndex]:
    return [ShIndex(n, m) for n in range(max_order + 1) for m in range(-n, n + 1)]


def order_of_channels(num_channels: int) -> np.ndarray:
    """SH order ``n`` of every ACN channel; the channel count must be a square."""
    order = int(round(np.sqrt(num_channels))) - 1
    if num_sh(order) != num_channels:
        raise ValueError(f"{num_channels} channels is not a complete SH set")
    return np.array([acn_to_nm(i)[0] for i in range(num_channels)])


@dataclass
class SphericalGrid:
    """Directions with quadrature weights summing to 4 pi."""

    azimuth: np.ndarray
    inclination: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.azimuth = np.mod(np.atleast_1d(np.asarray(self.azimuth, dtype=float)), 2 * np.pi)
        self.inclination = np.atleast_1d(np.asarray(self.inclination, dtype=float))
        if self.azimuth.shape != self.inclination.shape or self.azimuth.ndim != 1:
            raise ValueError("azimuth and inclination must be 1-D arrays of equal length")
        if len(self.azimuth) == 0:
            raise ValueError("grid must contain at least one direction")
        if self.weights is None:
            self.weights = np.full(len(self.azimuth), 4 * np.pi / len(self.azimuth))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != self.azimuth.shape or np.any(self.weights <= 0):
            raise ValueError("weights must be positive, one per direction")

    def __len__(self) -> int:
        return len(self.azimuth)

    @property
    def directions(self) -> list[Direction]:
        return [Direction(a, i) for a, i in zip(self.azimuth, self.inclination)]

    def vectors(self) -> np.ndarray:
        return directions_to_vectors(self.azimuth, self.inclination)

    def nearest(self, vectors: np.ndarray) -> np.ndarray:
        """Index of the grid direction closest to each row of ``vectors``."""
        v = np.atleast_2d(vectors)
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        return np.argmax(v @ self.vectors().T, axis=-1)


def directions_to_vectors(azimuth, inclination) -> np.ndarray:
    azimuth = np.asarray(azimuth, dtype=float)
    inclination = np.asarray(inclination, dtype=float)
    s = np.sin(inclination)
    return np.stack([s * np.cos(azimuth), s * np.sin(azimuth), np.cos(inclination)], axis=-1)


def vectors_to_directions(vectors) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(vectors, dtype=float)
    r = np.linalg.norm(v, axis=-1)
    incl = np.arccos(np.clip(v[..., 2] / r, -1.0, 1.0))
    az = np.mod(np.arctan2(v[..., 1], v[..., 0]), 2 * np.pi)
    return az, incl


def eval_real_sh(max_order: int, azimuth, inclination=None) -> np.ndarray:
    """Real orthonormal SHs in ACN order.

    Parameters
    ----------
    max_order : int
        Maximum order ``N`` (0..8).
    azimuth, inclination : array_like, shape (D,)
        Directions in radians. A :class:`SphericalGrid` or a list of
        :class:`Direction` may be passed as ``azimuth`` with ``inclination``
        left as None.

    Returns
    -------
    Y : ndarray, shape ((N+1)**2, D)
    """
    if inclination is None:
        if isinstance(azimuth, SphericalGrid):
            azimuth, inclination = azimuth.azimuth, azimuth.inclination
        else:
            dirs = list(azimuth)
            azimuth = np.array([d.azimuth for d in dirs])
            inclination = np.array([d.inclination for d in dirs])
    if not 0 <= max_order <= MAX_SH_ORDER:
        raise ValueError(f"max_order must be in [0, {MAX_SH_ORDER}]")
    az = np.atleast_1d(np.asarray(azimuth, dtype=float))
    incl = np.atleast_1d(np.asarray(inclination, dtype=float))
    if az.size == 0:
        raise ValueError("no directions given")
    if not (np.all(np.isfinite(az)) and np.all(np.isfinite(incl))):
        raise ValueError("direction angles must be finite")

    Y = np.empty((num_sh(max_order), az.size))
    for n in range(max_order + 1):
        for m in range(0, n + 1):
            # scipy includes the Condon-Shortley phase; (-1)**m removes it
            y = special.sph_harm_y(n, m, incl, az)
            if m == 0:
                Y[acn(n, 0)] = y.real
            else:
                Y[acn(n, m)] = np.sqrt(2) * (-1) ** m * y.real
                Y[acn(n, -m)] = np.sqrt(2) * (-1) ** m * y.imag
    return Y


def n3d_to_sn3d(max_order: int) -> np.ndarray:
    """Per-channel gains converting N3D signals to SN3D."""
    orders = order_of_channels(num_sh(max_order))
    return 1.0 / np.sqrt(2 * orders + 1)


def uniform_grid(count: int, exact_order: int | None = None) -> SphericalGrid:
    """Fibonacci spiral with equal weights ``4 pi / count``.

    With ``exact_order`` set, the equal weights receive the smallest
    correction that makes the quadrature exact for every SH up to that
    order; this integrates products of SHs up to ``exact_order // 2``
    to machine precision.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    i = np.arange(count)
    z = 1.0 - (2 * i + 1) / count
    golden = np.pi * (3.0 - np.sqrt(5.0))
    grid = SphericalGrid(np.mod(i * golden, 2 * np.pi), np.arccos(z))
    if exact_order is not None:
        grid.weights = exact_weights(grid, exact_order)
    return grid


def exact_weights(grid: SphericalGrid, order: int) -> np.ndarray:
    """Minimum-norm weight correction so that ``sum w Y_nm = sqrt(4 pi) delta_n0``."""
    Y = eval_real_sh(order, grid)
    if np.linalg.matrix_rank(Y) < Y.shape[0]:
        raise ValueError(f"grid of {len(grid)} points cannot integrate order {order} exactly")
    target = np.zeros(Y.shape[0])
    target[0] = np.sqrt(4 * np.pi)
    w = grid.weights + np.linalg.lstsq(Y, target - Y @ grid.weights, rcond=None)[0]
    if np.any(w <= 0):
        raise ValueError("exact quadrature weights are not all positive")
    return w


def _spherical_h2(n, x, derivative=False):
    return special.spherical_jn(n, x, derivative) - 1j * special.spherical_yn(n, x, derivative)


def radial_term(n, freq, radius, speed_of_sound=343.0, model="open"):
    """Radial term ``b_n`` of an open or rigid sphere evaluated on its surface.

    ``open``:  4 pi j^n j_n(kr)
    ``rigid``: 4 pi j^n (j_n(kr) - j_n'(kr) / h_n'(kr) h_n(kr))

    The Hankel function is of the second kind, which pairs with the
    ``exp(+j omega t)`` convention so that the scattered wave is causal.
    Broadcasts over ``n`` and ``freq``.
    """
    n = np.asarray(n)
    freq = np.asarray(freq, dtype=float)
    if np.any(n < 0):
        raise ValueError("order must be non-negative")
    if np.any(freq < 0) or radius <= 0:
        raise ValueError("frequency must be >= 0 and radius > 0")
    kr = 2 * np.pi * freq * radius / speed_of_sound
    n, kr = np.broadcast_arrays(n, kr)
    jn = special.spherical_jn(n, kr)
    if model == "open":
        b = jn.astype(complex)
    elif model == "rigid":
        b = np.where(n == 0, 1.0, 0.0).astype(complex)
        pos = kr > 0
        if np.any(pos):
            nn, x = n[pos], kr[pos]
            b[pos] = jn[pos] - special.spherical_jn(nn, x, True) / _spherical_h2(nn, x, True) * _spherical_h2(nn, x)
    else:
        raise ValueError(f"unknown sphere model {model!r}")
    return 4 * np.pi * (1j ** n) * b
