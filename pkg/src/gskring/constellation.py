"""Constellations and ring arithmetic for the algebraic group-key protocol.

Three alphabets are involved:

* the *source* constellation ``A = A_I + i A_I`` that every node quantizes its
  channel estimate onto,
* the regular square QAM ``Abar`` with odd-integer axis
  ``{-M+1, -M+3, ..., M-1}`` used for transmission, and
* the Gaussian-integer ring ``Z_M[i]`` with ``M = 2**(m/2)``.

Points of ``A`` are identified with their per-component ranks in the ordered
level list, so the composite map ``A -> Z_M[i]`` is simply "rank of the real
part + i * rank of the imaginary part".  Most vectorised code in the package
works directly on rank arrays; the scalar helpers below exist for clarity and
for exhaustive checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

__all__ = [
    "SourceConstellation",
    "RegularQam",
    "RingElement",
    "design_uniform_constellation",
    "nearest_neighbour_constellation",
    "quantize_phi",
    "quantize_ranks",
    "map_psi",
    "map_psi_inverse",
    "map_affine_phi",
    "map_affine_phi_inverse",
    "ring_add",
    "ring_sub",
    "theta_map",
    "theta_inverse",
]


def _check_m(m):
    if int(m) != m or m < 2 or m % 2:
        raise ValueError(f"m must be an even integer >= 2, got {m!r}")
    return int(m)


@dataclass(frozen=True)
class SourceConstellation:
    """Per-component quantization alphabet ``A_I`` with its decision cells.

    Attributes
    ----------
    m : int
        Even exponent; the complex constellation has ``2**m`` points and each
        axis ``2**(m/2)`` levels.
    levels : ndarray, shape (M,)
        Strictly increasing representative levels (``A_I = A_Q``).
    boundaries : ndarray, shape (M - 1,)
        Decision thresholds.  A value exactly on a threshold belongs to the
        lower cell.
    std : float
        Per-component standard deviation the constellation was designed for.
    """

    m: int
    levels: np.ndarray
    boundaries: np.ndarray
    std: float

    def __post_init__(self):
        _check_m(self.m)
        levels = np.asarray(self.levels, dtype=float)
        bounds = np.asarray(self.boundaries, dtype=float)
        if levels.shape != (self.size,) or bounds.shape != (self.size - 1,):
            raise ValueError("levels/boundaries do not match 2**(m/2)")
        if np.any(np.diff(levels) <= 0) or np.any(np.diff(bounds) <= 0):
            raise ValueError("levels and boundaries must be strictly increasing")
        if np.any(levels[:-1] >= bounds) or np.any(levels[1:] <= bounds):
            raise ValueError("each level must lie strictly inside its cell")
        levels.setflags(write=False)
        bounds.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "boundaries", bounds)

    @property
    def size(self):
        """Number of levels per axis, ``2**(m/2)``."""
        return 2 ** (self.m // 2)

    @property
    def points(self):
        """All ``2**m`` complex points, row-major in (real rank, imag rank)."""
        return (self.levels[:, None] + 1j * self.levels[None, :]).ravel()

    @property
    def mean_energy(self):
        """Average ``|a|**2`` under the uniform prior on the points."""
        return 2.0 * float(np.mean(self.levels**2))

    def to_dict(self):
        return {
            "m": self.m,
            "levels": self.levels.tolist(),
            "boundaries": self.boundaries.tolist(),
            "std": self.std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["m"]), np.asarray(d["levels"]), np.asarray(d["boundaries"]), float(d["std"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RegularQam:
    """Regular square ``2**m``-QAM with axis ``{-M+1, ..., M-1}`` (step 2)."""

    m: int

    def __post_init__(self):
        _check_m(self.m)

    @property
    def size(self):
        return 2 ** (self.m // 2)

    @property
    def axis(self):
        M = self.size
        return np.arange(-M + 1, M, 2, dtype=float)

    @property
    def points(self):
        a = self.axis
        return (a[:, None] + 1j * a[None, :]).ravel()

    @property
    def mean_energy(self):
        """``E_avg = 2 (M**2 - 1) / 3`` for the square QAM."""
        M = self.size
        return 2.0 * (M * M - 1) / 3.0


@dataclass(frozen=True)
class RingElement:
    """Element ``re + i im`` of ``Z_modulus[i]``."""

    re: int
    im: int
    modulus: int

    def __post_init__(self):
        if self.modulus < 1:
            raise ValueError("modulus must be positive")
        if not (0 <= self.re < self.modulus and 0 <= self.im < self.modulus):
            raise ValueError(f"components out of range for modulus {self.modulus}: {self.re}, {self.im}")

    def __add__(self, other):
        return ring_add(self, other)

    def __sub__(self, other):
        return ring_sub(self, other)

    def __complex__(self):
        return complex(self.re, self.im)


def _gaussian_cells(M, std):
    k = np.arange(1, M)
    z = special.ndtri(k / M)
    edges = np.concatenate(([-np.inf], z, [np.inf]))
    # centroid of a standard normal restricted to (lo, hi]:
    # (pdf(lo) - pdf(hi)) / (cdf(hi) - cdf(lo)), each cell has mass 1/M
    pdf = np.exp(-0.5 * edges**2) / np.sqrt(2 * np.pi)
    pdf[~np.isfinite(edges)] = 0.0
    centroids = (pdf[:-1] - pdf[1:]) * M
    return std * z, std * centroids


def design_uniform_constellation(m, marginal_std):
    """Build the constellation whose quantizer output is uniform.

    Decision thresholds are the ``k / M`` quantiles of ``N(0, marginal_std**2)``
    and each level is the conditional mean of that Gaussian over its cell.

    Parameters
    ----------
    m : int
        Even exponent, ``m >= 2``.
    marginal_std : float
        Standard deviation of one real component of the quantizer input,
        e.g. ``sqrt((1 + gamma) / 2)`` for a unit-variance channel estimate.

    Returns
    -------
    SourceConstellation
    """
    m = _check_m(m)
    if not marginal_std > 0:
        raise ValueError("marginal_std must be positive")
    bounds, levels = _gaussian_cells(2 ** (m // 2), float(marginal_std))
    return SourceConstellation(m, levels, bounds, float(marginal_std))


def nearest_neighbour_constellation(m, scale=None):
    """Regular QAM levels with minimum-distance decision cells.

    With ``scale=None`` the square QAM is normalised to unit average energy.
    """
    m = _check_m(m)
    qam = RegularQam(m)
    if scale is None:
        scale = 1.0 / np.sqrt(qam.mean_energy)
    levels = qam.axis * scale
    bounds = 0.5 * (levels[:-1] + levels[1:])
    return SourceConstellation(m, levels, bounds, float(np.sqrt(qam.mean_energy / 2.0) * scale))


def quantize_ranks(x, A):
    """Cell index in ``0..M-1`` of each real value (ties go to the lower cell)."""
    return np.searchsorted(A.boundaries, x, side="left")


def quantize_phi(beta, A):
    """Quantize complex input(s) onto the points of ``A``, per component."""
    beta = np.asarray(beta)
    out = A.levels[quantize_ranks(beta.real, A)] + 1j * A.levels[quantize_ranks(beta.imag, A)]
    return out if out.ndim else complex(out)


def _rank_in(values, axis, what):
    values = np.asarray(values, dtype=float)
    idx = np.searchsorted(axis, values)
    idx_c = np.clip(idx, 0, len(axis) - 1)
    lower = np.clip(idx - 1, 0, len(axis) - 1)
    pick = np.where(np.abs(axis[lower] - values) < np.abs(axis[idx_c] - values), lower, idx_c)
    if not np.allclose(axis[pick], values, rtol=1e-12, atol=1e-12):
        raise ValueError(f"value not in {what}")
    return pick


def map_psi(nu, A):
    """Rank-preserving bijection from points of ``A`` onto the regular QAM."""
    nu = np.asarray(nu)
    axis = RegularQam(A.m).axis
    out = axis[_rank_in(nu.real, A.levels, "A_I")] + 1j * axis[_rank_in(nu.imag, A.levels, "A_I")]
    return out if out.ndim else complex(out)


def map_psi_inverse(alpha, A):
    alpha = np.asarray(alpha)
    axis = RegularQam(A.m).axis
    out = A.levels[_rank_in(alpha.real, axis, "QAM axis")] + 1j * A.levels[_rank_in(alpha.imag, axis, "QAM axis")]
    return out if out.ndim else complex(out)


def map_affine_phi(alpha, m):
    """``(alpha + (M-1)(1+i)) / 2`` as a ring element of ``Z_M[i]``."""
    M = 2 ** (_check_m(m) // 2)
    alpha = complex(alpha)
    re = (alpha.real + M - 1) / 2
    im = (alpha.imag + M - 1) / 2
    if re != int(re) or im != int(im) or not (0 <= re < M and 0 <= im < M):
        raise ValueError(f"{alpha} is not a point of the {2**m}-QAM")
    return RingElement(int(re), int(im), M)


def map_affine_phi_inverse(x, m):
    """``2 x - (M-1)(1+i)``, back onto the regular QAM."""
    M = 2 ** (_check_m(m) // 2)
    if x.modulus != M:
        raise ValueError("modulus does not match m")
    return complex(2 * x.re - (M - 1), 2 * x.im - (M - 1))


def _same_modulus(x, y):
    if x.modulus != y.modulus:
        raise ValueError(f"modulus mismatch: {x.modulus} vs {y.modulus}")
    return x.modulus


def ring_add(x, y):
    n = _same_modulus(x, y)
    return RingElement((x.re + y.re) % n, (x.im + y.im) % n, n)


def ring_sub(x, y):
    n = _same_modulus(x, y)
    return RingElement((x.re - y.re) % n, (x.im - y.im) % n, n)


def theta_map(nu, A):
    """Composite ``A -> Z_M[i]``: the rank-preserving map then the affine map."""
    return map_affine_phi(map_psi(nu, A), A.m)


def theta_inverse(x, A):
    return map_psi_inverse(map_affine_phi_inverse(x, A.m), A)
