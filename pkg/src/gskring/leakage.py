"""Empirical leakage of the phase-4 broadcast.

The plug-in mutual-information estimator is biased upwards by roughly
``(|X| - 1)(|Y| - 1) / (2 N ln 2)`` bits, so "zero leakage" is tested as
``MI <= bias_bound + 3 * jackknife_se`` rather than ``MI == 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constellation import (
    RegularQam,
    RingElement,
    map_affine_phi,
    ring_sub,
    theta_inverse,
    theta_map,
)

__all__ = [
    "DiscreteJointCounts",
    "tally",
    "tally_arrays",
    "entropy_bits",
    "conditional_entropy_bits",
    "mutual_information_bits",
    "bias_bound_bits",
    "jackknife_se_bits",
    "leakage_report",
    "eve_symbols",
    "theorem1_exact_check",
    "clamped_sub",
    "GSK_BINS",
]

GSK_BINS = 64


@dataclass(frozen=True)
class DiscreteJointCounts:
    """Joint frequency table; ``counts[i, j]`` counts ``(alphabet_x[i], alphabet_y[j])``."""

    alphabet_x: tuple
    alphabet_y: tuple
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (len(self.alphabet_x), len(self.alphabet_y)):
            raise ValueError("counts shape does not match alphabets")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.alphabet_x != other.alphabet_x or self.alphabet_y != other.alphabet_y:
            raise ValueError("cannot merge tallies over different alphabets")
        return DiscreteJointCounts(self.alphabet_x, self.alphabet_y, self.counts + other.counts)


def tally(pairs, alphabet_x=None, alphabet_y=None):
    """Exact frequency grid of a sequence of ``(x, y)`` symbol pairs."""
    pairs = list(pairs)
    if alphabet_x is None:
        alphabet_x = sorted({p[0] for p in pairs})
    if alphabet_y is None:
        alphabet_y = sorted({p[1] for p in pairs})
    ix = {s: i for i, s in enumerate(alphabet_x)}
    iy = {s: i for i, s in enumerate(alphabet_y)}
    counts = np.zeros((len(alphabet_x), len(alphabet_y)), dtype=np.int64)
    for x, y in pairs:
        counts[ix[x], iy[y]] += 1
    return DiscreteJointCounts(tuple(alphabet_x), tuple(alphabet_y), counts)


def tally_arrays(x, y, nx, ny):
    """Fast tally of integer-coded symbols ``x in range(nx)``, ``y in range(ny)``."""
    x = np.asarray(x, dtype=np.int64).ravel()
    y = np.asarray(y, dtype=np.int64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    flat = np.bincount(x * ny + y, minlength=nx * ny)
    return DiscreteJointCounts(tuple(range(nx)), tuple(range(ny)), flat.reshape(nx, ny))


def _xlogx(n):
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    pos = n > 0
    out[pos] = n[pos] * np.log2(n[pos])
    return out


def entropy_bits(counts):
    """Plug-in entropy of a frequency vector (any shape), ``0 log 0 = 0``."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n <= 0:
        raise ValueError("empty counts")
    return float(np.log2(n) - _xlogx(counts).sum() / n)


def _require(j):
    if j.total <= 0:
        raise ValueError("empty counts")


def conditional_entropy_bits(j):
    """Plug-in ``H(X | Y) = sum_y p(y) H(X | Y = y)`` in bits."""
    _require(j)
    return entropy_bits(j.counts) - entropy_bits(j.counts.sum(axis=0))


def mutual_information_bits(j):
    """Plug-in ``I(X; Y) = H(X) - H(X | Y)`` in bits."""
    _require(j)
    return entropy_bits(j.counts.sum(axis=1)) - conditional_entropy_bits(j)


def bias_bound_bits(j):
    """Miller-Madow style bias of the plug-in MI under independence."""
    _require(j)
    kx, ky = len(j.alphabet_x), len(j.alphabet_y)
    return (kx - 1) * (ky - 1) / (2.0 * j.total * np.log(2.0))


def jackknife_se_bits(j):
    """Exact delete-one jackknife standard error of the plug-in MI.

    Deleting one sample only changes the cell it came from, so the ``N``
    leave-one-out estimates take one value per occupied cell.
    """
    _require(j)
    c = j.counts.astype(float)
    N = c.sum()
    if N < 2:
        return 0.0
    nx, ny = c.sum(axis=1), c.sum(axis=0)
    sx, sy, sxy = _xlogx(nx).sum(), _xlogx(ny).sum(), _xlogx(c).sum()
    ii, jj = np.nonzero(c)
    n_cell, n_x, n_y = c[ii, jj], nx[ii], ny[jj]
    sx_l = sx - _xlogx(n_x) + _xlogx(n_x - 1)
    sy_l = sy - _xlogx(n_y) + _xlogx(n_y - 1)
    sxy_l = sxy - _xlogx(n_cell) + _xlogx(n_cell - 1)
    loo = np.log2(N - 1) - (sx_l + sy_l - sxy_l) / (N - 1)
    mean = np.sum(n_cell * loo) / N
    var = (N - 1) / N * np.sum(n_cell * (loo - mean) ** 2)
    return float(np.sqrt(var))


def leakage_report(j, protocol="", m=None, snr_db=None):
    """Summary dict matching the leakage-report JSON document."""
    mi = mutual_information_bits(j)
    bias = bias_bound_bits(j)
    se = jackknife_se_bits(j)
    return {
        "protocol": protocol,
        "m": m,
        "snr_db": snr_db,
        "samples": j.total,
        "H_marginal": entropy_bits(j.counts.sum(axis=1)),
        "H_conditional": conditional_entropy_bits(j),
        "MI": mi,
        "bias_bound": float(bias),
        "jackknife_se": float(se),
        "threshold": float(bias + 3.0 * se),
    }


def _complex_ranks(z, boundaries):
    return np.searchsorted(boundaries, z.real, side="left"), np.searchsorted(boundaries, z.imag, side="left")


def eve_symbols(triple, A_csr, A_sum=None, bins=GSK_BINS):
    """Integer-code the CSR at node 1 and the eavesdropper's phase-4 observation.

    Returns ``(x, y, nx, ny)`` ready for :func:`tally_arrays`.  The CSR is
    quantized onto ``A_csr``; the observation is the QAM rank pair
    (A-SQGSK), the point of ``A_sum`` (AQGSK) or a ``bins x bins`` uniform
    histogram cell spanning +-5 std of the sum (unquantized GSK).
    """
    M = A_csr.size
    xr, xi = _complex_ranks(triple.node1[triple.valid], A_csr.boundaries)
    x = xr * M + xi
    obs = triple.phase4[triple.valid]
    if triple.protocol == "asqgsk":
        yr = np.rint((obs.real + M - 1) / 2).astype(int)
        yi = np.rint((obs.imag + M - 1) / 2).astype(int)
        return x, yr * M + yi, M * M, M * M
    if triple.protocol == "aqgsk":
        if A_sum is None:
            raise ValueError("AQGSK needs the sum constellation")
        Ms = A_sum.size
        yr, yi = _complex_ranks(obs, A_sum.boundaries)
        return x, yr * Ms + yi, M * M, Ms * Ms
    gamma = float(triple.params.get("gamma", 0.0))
    span = 5.0 * np.sqrt(1.0 + gamma)
    edges = np.linspace(-span, span, bins + 1)[1:-1]
    yr, yi = _complex_ranks(obs, edges)
    return x, yr * bins + yi, M * M, bins * bins


def clamped_sub(x, y):
    """Ordinary integer subtraction clamped into range (not a group operation)."""
    n = x.modulus
    return RingElement(min(max(x.re - y.re, 0), n - 1), min(max(x.im - y.im, 0), n - 1), n)


def theorem1_exact_check(A, subtract=ring_sub):
    """True iff ``b -> Theta^-1(phi(c) - Theta(b))`` permutes ``A`` for every QAM point ``c``.

    This is the step that makes the broadcast independent of the node-1 CSR:
    for a fixed broadcast symbol every CSR value is paired with a distinct
    value of the other (identically distributed) quantized channel.
    """
    pts = [complex(p) for p in A.points]
    ring_of = [theta_map(p, A) for p in pts]
    n = len(pts)
    for c in RegularQam(A.m).points:
        pc = map_affine_phi(complex(c), A.m)
        images = set()
        for rb in ring_of:
            images.add(theta_inverse(subtract(pc, rb), A))
        if len(images) != n:
            return False
    return True
