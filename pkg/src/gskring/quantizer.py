"""Guard-band multi-level quantizers matched to a two-dimensional joint law.

A quantizer with ``K = 2**b`` cells ``(lo_j, hi_j]`` maps a real sample to a
cell index ``0..K-1`` or to the erasure symbol :data:`ERASURE` when it falls in
a guard band between cells.  Given the joint law ``P(y_B, y_C)`` of two
nodes' samples, :func:`em_em` places and sizes the guard bands so that the
symbols both nodes keep are uniform (``b`` bits of entropy) while the mass of
kept-but-different pairs stays below ``eta``.

Every design block works on a discrete grid: the sorted union of the two
supports.  Cell edges sit at midpoints between adjacent grid points and a
step moves an edge by ``step`` grid points.  For an exact pmf over a finite
alphabet this is the only meaningful resolution; for a histogram the grid is
the set of bin centres.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import special

__all__ = [
    "ERASURE",
    "InfeasibleDesignError",
    "MultiLevelQuantizer",
    "JointDistribution",
    "DesignReport",
    "QuantizerMetrics",
    "bivariate_gaussian",
    "csr_gaussian_pair",
    "evaluate",
    "cell_index",
    "rectangle_masses",
    "metrics",
    "consensus_probability",
    "mismatch_mass",
    "symbol_error_rate",
    "conditional_entropy",
    "excursion_metrics",
    "init_block",
    "error_block",
    "entropy_block",
    "refining_block",
    "em_em",
    "search_eta_star",
    "design_for_target",
    "default_eta_grid",
    "baseline_uniform",
    "baseline_max_lloyd",
    "baseline_marginal_maxent",
    "lloyd_max",
]

ERASURE = -1
MAX_ITERATIONS = 200
ANNEAL = 0.7  # per-alternation shrink factor of the error-block target
ENTROPY_TOL = 0.01  # fraction of b accepted as entropy gap before refining
_EPS = 1e-14


class InfeasibleDesignError(RuntimeError):
    """A design block could not meet its target without collapsing a cell."""


def _entropy(p):
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _git_hash(text):
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass(frozen=True)
class MultiLevelQuantizer:
    """``2**b`` half-open cells ``(lower[j], upper[j]]`` with representatives.

    ``lower[0] = -inf`` and ``upper[-1] = +inf``; the interval
    ``(upper[j], lower[j+1]]`` is the guard band between cells ``j`` and
    ``j + 1``.
    """

    b: int
    lower: np.ndarray
    upper: np.ndarray
    representatives: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        rep = np.asarray(self.representatives, dtype=float)
        K = 2**self.b
        if self.b < 1 or lo.shape != (K,) or hi.shape != (K,) or rep.shape != (K,):
            raise ValueError(f"expected 2**b = {K} cells")
        if lo[0] != -np.inf or hi[-1] != np.inf:
            raise ValueError("outer cells must be unbounded")
        if np.any(lo >= hi):
            raise ValueError("each cell needs lower < upper")
        if np.any(hi[:-1] > lo[1:]):
            raise ValueError("cells overlap")
        if np.any(rep <= lo) or np.any(rep > hi):
            raise ValueError("representative outside its cell")
        for a in (lo, hi, rep):
            a.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "representatives", rep)

    @property
    def levels(self):
        return 2**self.b

    @property
    def pairs(self):
        return list(zip(self.lower.tolist(), self.upper.tolist()))

    @property
    def guard_widths(self):
        return self.lower[1:] - self.upper[:-1]

    def __call__(self, y):
        return evaluate(self, y)

    def to_dict(self, eta=None, e=None):
        def enc(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "b": self.b,
            "pairs": [[enc(a), enc(c)] for a, c in self.pairs],
            "representatives": self.representatives.tolist(),
            "eta": eta,
            "e": e,
        }

    @classmethod
    def from_dict(cls, d):
        lo = [-np.inf if p[0] is None else p[0] for p in d["pairs"]]
        hi = [np.inf if p[1] is None else p[1] for p in d["pairs"]]
        return cls(int(d["b"]), np.array(lo), np.array(hi), np.array(d["representatives"]))

    def content_hash(self):
        """Git-blob style SHA-1 of the canonical JSON form of the cells."""
        return _git_hash(json.dumps(self.to_dict(), sort_keys=True))

    def save(self, path, eta=None, e=None):
        Path(path).write_text(json.dumps(self.to_dict(eta, e), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate(Q, y):
    """Cell index of each sample, or :data:`ERASURE` inside a guard band."""
    y = np.asarray(y, dtype=float)
    j = np.searchsorted(Q.upper, y, side="left")
    j = np.minimum(j, Q.levels - 1)
    out = np.where(y > Q.lower[j], j, ERASURE)
    return out if out.ndim else int(out)


cell_index = evaluate


@dataclass(frozen=True)
class JointDistribution:
    """Probability mass on a grid; ``mass[i, k]`` sits at ``(x_support[i], y_support[k])``.

    ``x`` is the sample at the node whose key symbols are scored (node 2 in
    the worst-pair design), ``y`` its partner.
    """

    x_support: np.ndarray
    y_support: np.ndarray
    mass: np.ndarray
    kind: str = "exact-pmf"

    def __post_init__(self):
        xs = np.asarray(self.x_support, dtype=float)
        ys = np.asarray(self.y_support, dtype=float)
        m = np.asarray(self.mass, dtype=float)
        if m.shape != (len(xs), len(ys)):
            raise ValueError("mass shape does not match supports")
        if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) <= 0):
            raise ValueError("supports must be strictly increasing")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
            raise ValueError("mass must be non-negative and sum to 1")
        if self.kind not in ("exact-pmf", "histogram"):
            raise ValueError(f"unknown kind {self.kind!r}")
        for a in (xs, ys, m):
            a.setflags(write=False)
        object.__setattr__(self, "x_support", xs)
        object.__setattr__(self, "y_support", ys)
        object.__setattr__(self, "mass", m)

    @property
    def marginal_x(self):
        return self.mass.sum(axis=1)

    @property
    def marginal_y(self):
        return self.mass.sum(axis=0)

    def transpose(self):
        return JointDistribution(self.y_support, self.x_support, self.mass.T.copy(), self.kind)

    @classmethod
    def from_samples(cls, x, y, support=None):
        """Empirical pmf of paired samples over a finite alphabet."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if x.shape != y.shape or x.size == 0:
            raise ValueError("need equal-length, non-empty sample arrays")
        if support is None:
            support = np.union1d(x, y)
        support = np.asarray(support, dtype=float)
        ix = np.searchsorted(support, x)
        iy = np.searchsorted(support, y)
        if np.any(support[np.minimum(ix, len(support) - 1)] != x) or np.any(support[np.minimum(iy, len(support) - 1)] != y):
            raise ValueError("samples outside the given support")
        n = len(support)
        counts = np.bincount(ix * n + iy, minlength=n * n).reshape(n, n)
        return cls(support, support, counts / counts.sum(), "exact-pmf")

    @classmethod
    def histogram(cls, x, y, bins=512, span=None):
        """2-D histogram over ``bins`` equal bins; samples past the span land in the edge bins."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if span is None:
            span = 5.0 * np.std(np.concatenate([x, y]))
        edges = np.linspace(-span, span, bins + 1)
        centres = 0.5 * (edges[:-1] + edges[1:])
        ix = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
        iy = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, bins - 1)
        counts = np.bincount(ix * bins + iy, minlength=bins * bins).reshape(bins, bins)
        return cls(centres, centres, counts / counts.sum(), "histogram")

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"kind={self.kind}"] + [repr(float(v)) for v in self.y_support])
            for xv, row in zip(self.x_support, self.mass):
                w.writerow([repr(float(xv))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        kind = head[0].partition("=")[2] or "exact-pmf"
        ys = np.array([float(v) for v in head[1:]])
        xs = np.array([float(r[0]) for r in rows[1:]])
        mass = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(xs, ys, mass / mass.sum(), kind)


def bivariate_gaussian(std, rho, bins=512, n_std=5.0):
    """Discretised zero-mean bivariate Gaussian with equal marginals.

    Each row is weighted by the marginal density at the bin centre; within a
    row the conditional Gaussian is integrated exactly over the column bins,
    which keeps narrow (high-correlation) ridges well resolved.
    """
    if not -1 < rho < 1:
        raise ValueError("need |rho| < 1")
    edges = np.linspace(-n_std * std, n_std * std, bins + 1)
    c = 0.5 * (edges[:-1] + edges[1:])
    row_w = np.exp(-0.5 * (c / std) ** 2)
    cond_sd = std * np.sqrt(1.0 - rho * rho)
    z = (edges[None, :] - rho * c[:, None]) / cond_sd
    cdf = special.ndtr(z)
    mass = row_w[:, None] * np.diff(cdf, axis=1)
    return JointDistribution(c, c, mass / mass.sum(), "histogram")


def csr_gaussian_pair(snr_db, bins=512, n_std=5.0):
    """Joint law of one real component of two independent estimates of ``h12``.

    Both nodes see ``x + noise`` with ``x ~ N(0, 1/2)`` and estimation-error
    variance ``gamma / 2`` where ``gamma = 1 / SNR``.
    """
    gamma = 10.0 ** (-snr_db / 10.0)
    std = np.sqrt((1.0 + gamma) / 2.0)
    return bivariate_gaussian(std, 1.0 / (1.0 + gamma), bins, n_std)


def rectangle_masses(Q, P):
    """``R[j, k]`` = mass with ``y_B`` in cell ``j`` and ``y_C`` in cell ``k``."""
    K = Q.levels
    cx = evaluate(Q, P.x_support)
    cy = evaluate(Q, P.y_support)
    ox = np.zeros((K, len(cx)))
    oy = np.zeros((K, len(cy)))
    kx = cx >= 0
    ky = cy >= 0
    ox[cx[kx], np.nonzero(kx)[0]] = 1.0
    oy[cy[ky], np.nonzero(ky)[0]] = 1.0
    return ox @ P.mass @ oy.T


@dataclass(frozen=True)
class QuantizerMetrics:
    """All design functionals of one quantizer under one joint law."""

    p_c: float
    p_cm: float
    ser: float
    g: np.ndarray
    g_tilde: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    conditional_entropy: float


def _metrics_from_rect(R):
    p_c = float(R.sum())
    alpha = np.diag(R).copy()
    p_cm = p_c - float(alpha.sum())
    delta = np.diag(R, 1) + np.diag(R, -1)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = R.sum(axis=1) / p_c if p_c > 0 else np.full(len(R), np.nan)
        g_tilde = alpha / alpha.sum() if alpha.sum() > 0 else np.full(len(R), np.nan)
    ser = p_cm / p_c if p_c > 0 else float("nan")
    H = _entropy(g) if p_c > 0 else float("nan")
    return QuantizerMetrics(p_c, max(p_cm, 0.0), ser, g, g_tilde, alpha, delta, H)


def metrics(Q, P):
    return _metrics_from_rect(rectangle_masses(Q, P))


def consensus_probability(Q, P):
    """Probability that both samples avoid every guard band."""
    return metrics(Q, P).p_c


def mismatch_mass(Q, P):
    """Mass of pairs kept by both nodes but quantized to different cells."""
    return metrics(Q, P).p_cm


def symbol_error_rate(Q, P):
    return metrics(Q, P).ser


def conditional_entropy(Q, P):
    """Entropy in bits of node-B's symbol given that both samples are kept."""
    m = metrics(Q, P)
    if not m.p_c > 0:
        raise ValueError("zero consensus probability")
    return m.conditional_entropy


def excursion_metrics(Q, P, e):
    """Consensus probability, SER and entropy for runs of ``e`` equal symbols.

    Samples are taken as independent across positions, so the probability
    that ``e`` consecutive pairs fall in cells ``(j, k)`` is ``R[j, k]**e``.
    """
    if e < 1:
        raise ValueError("e must be >= 1")
    Re = rectangle_masses(Q, P) ** e
    p_c = float(Re.sum())
    if p_c <= 0:
        return p_c, float("nan"), float("nan")
    ser = (p_c - float(np.trace(Re))) / p_c
    return p_c, ser, _entropy(Re.sum(axis=1) / p_c)


# --------------------------------------------------------------------------
# grid machinery shared by the design blocks


class _Grid:
    """Prefix-summed joint mass on the union grid of both supports."""

    def __init__(self, P):
        pts = np.union1d(P.x_support, P.y_support)
        n = len(pts)
        ix = np.searchsorted(pts, P.x_support)
        iy = np.searchsorted(pts, P.y_support)
        full = np.zeros((n, n))
        full[np.ix_(ix, iy)] = P.mass
        C = np.zeros((n + 1, n + 1))
        C[1:, 1:] = full.cumsum(axis=0).cumsum(axis=1)
        self.pts = pts
        self.n = n
        self.C = C
        mx = full.sum(axis=1)
        self.marginal = mx
        self.cum_x = np.concatenate(([0.0], mx.cumsum()))

    def rect(self, lo, hi):
        C = self.C
        return C[np.ix_(hi, hi)] - C[np.ix_(lo, hi)] - C[np.ix_(hi, lo)] + C[np.ix_(lo, lo)]

    def alpha(self, lo, hi):
        C = self.C
        return C[hi, hi] - C[lo, hi] - C[hi, lo] + C[lo, lo]

    def delta(self, lo, hi, i):
        C = self.C
        a, b, c, d = lo[i], hi[i], lo[i + 1], hi[i + 1]
        r1 = C[b, d] - C[a, d] - C[b, c] + C[a, c]
        r2 = C[d, b] - C[c, b] - C[d, a] + C[c, a]
        return r1 + r2

    def to_quantizer(self, lo, hi, b):
        pts = self.pts
        K = len(lo)
        lower = np.empty(K)
        upper = np.empty(K)
        reps = np.empty(K)
        lower[0], upper[-1] = -np.inf, np.inf
        for j in range(K):
            if j > 0:
                lower[j] = 0.5 * (pts[lo[j] - 1] + pts[lo[j]])
            if j < K - 1:
                upper[j] = 0.5 * (pts[hi[j] - 1] + pts[hi[j]])
            w = self.marginal[lo[j] : hi[j]]
            seg = pts[lo[j] : hi[j]]
            reps[j] = float(np.dot(w, seg) / w.sum()) if w.sum() > 0 else float(seg.mean())
            reps[j] = min(max(reps[j], seg[0]), seg[-1])
        return MultiLevelQuantizer(b, lower, upper, reps)

    def from_quantizer(self, Q):
        lo = np.searchsorted(self.pts, Q.lower, side="right")
        hi = np.searchsorted(self.pts, Q.upper, side="right")
        if np.any(hi <= lo):
            raise InfeasibleDesignError("a cell contains no grid point")
        return lo.astype(int), hi.astype(int)


def _check_state(lo, hi, n):
    assert lo[0] == 0 and hi[-1] == n
    assert np.all(lo < hi) and np.all(hi[:-1] <= lo[1:])


def _b_of(K):
    return int(np.log2(K))


# --------------------------------------------------------------------------
# design blocks


def _init_state(grid, K):
    n = grid.n
    if n < K:
        raise InfeasibleDesignError(f"{K} cells need at least {K} grid points, have {n}")
    cuts = np.empty(K - 1, dtype=int)
    prev = 0
    for j in range(1, K):
        target = j / K - 1e-12
        t = int(np.searchsorted(grid.cum_x, target, side="left"))
        t = min(max(t, prev + 1), n - (K - j))
        cuts[j - 1] = prev = t
    lo = np.concatenate(([0], cuts))
    hi = np.concatenate((cuts, [n]))
    return lo, hi


def init_block(P, b, step=1):
    """Equal-mass cells under the ``y_B`` marginal, with zero-width guards.

    Boundary ``j`` is placed at the first grid position where the cumulative
    marginal mass reaches ``j / 2**b``.  ``step`` is accepted for interface
    symmetry; the cumulative search already has single-point resolution.
    """
    grid = _Grid(P)
    lo, hi = _init_state(grid, 2**b)
    return grid.to_quantizer(lo, hi, b)


def _error_pass(grid, lo, hi, eta, step):
    K = len(lo)
    bound = eta / (K - 1)
    changed = False
    for i in range(K - 1):
        while grid.delta(lo, hi, i) > bound + _EPS:
            can_left = hi[i] - step > lo[i]
            can_right = lo[i + 1] + step < hi[i + 1]
            if not (can_left or can_right):
                raise InfeasibleDesignError(f"guard {i} cannot be widened further (delta still above {bound:.3g})")
            if can_left:
                hi[i] -= step
            if can_right:
                lo[i + 1] += step
            changed = True
    return changed


def error_block(Q, P, b, eta, step=1):
    """Widen each guard band until its adjacent-cell mismatch mass is at most ``eta / (2**b - 1)``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    grid = _Grid(P)
    lo, hi = grid.from_quantizer(Q)
    if not _error_pass(grid, lo, hi, eta, step):
        return Q
    return grid.to_quantizer(lo, hi, b)


def _g_tilde(grid, lo, hi, j):
    a = grid.alpha(lo, hi)
    s = a.sum()
    return a[j] / s if s > 0 else np.nan


def _entropy_pass(grid, lo, hi, step):
    K = len(lo)
    target = 1.0 / K
    tol = 1e-12
    changed = False
    for j in range(K - 1):
        g = _g_tilde(grid, lo, hi, j)
        if not np.isfinite(g) or abs(g - target) <= tol:
            continue
        d = step if g < target else -step
        prev_err = abs(g - target)
        while True:
            if d > 0 and not (lo[j + 1] + d < hi[j + 1]):
                raise InfeasibleDesignError(f"guard {j} reached the end of the support without balancing")
            if d < 0 and not (hi[j] + d > lo[j]):
                raise InfeasibleDesignError(f"guard {j} reached the start of the support without balancing")
            hi[j] += d
            lo[j + 1] += d
            changed = True
            g_new = _g_tilde(grid, lo, hi, j)
            crossed = (g_new >= target) if d > 0 else (g_new <= target)
            if crossed:
                # keep whichever side of the crossing is nearer the target
                if abs(g_new - target) > prev_err:
                    hi[j] -= d
                    lo[j + 1] -= d
                break
            prev_err = abs(g_new - target)
    return changed


def entropy_block(Q, P, b, step=1):
    """Translate guard bands, left to right, so that each normalised diagonal mass approaches ``2**-b``."""
    grid = _Grid(P)
    lo, hi = grid.from_quantizer(Q)
    if not _entropy_pass(grid, lo, hi, step):
        return Q
    return grid.to_quantizer(lo, hi, b)


def _refine_pass(grid, lo, hi, step):
    K = len(lo)
    alpha = grid.alpha(lo, hi)
    a_min = alpha.min()
    changed = False
    for j in range(K):
        cur = grid.alpha(lo, hi)[j]
        while cur > a_min * (1 + 1e-12) + _EPS:
            options = []
            if j > 0 and hi[j] - lo[j] > step:
                lo[j] += step
                options.append((grid.alpha(lo, hi)[j], "lo"))
                lo[j] -= step
            if j < K - 1 and hi[j] - lo[j] > step:
                hi[j] -= step
                options.append((grid.alpha(lo, hi)[j], "hi"))
                hi[j] += step
            if not options:
                raise InfeasibleDesignError(f"cell {j} would collapse while equalising diagonal mass")
            new, side = max(options)
            if new < a_min and (a_min - new) > (cur - a_min):
                break
            if side == "lo":
                lo[j] += step
            else:
                hi[j] -= step
            cur = new
            changed = True
    return changed


def refining_block(Q, P, step=1):
    """Shrink cells until every diagonal mass sits at the smallest one.

    Each step moves a single edge of the cell inward, whichever removes less
    diagonal mass, and the loop stops at whichever side of ``alpha_min`` is
    nearer.  Guards only grow, so no mismatch mass is added.
    """
    grid = _Grid(P)
    lo, hi = grid.from_quantizer(Q)
    if not _refine_pass(grid, lo, hi, step):
        return Q
    return grid.to_quantizer(lo, hi, Q.b)


@dataclass(frozen=True)
class DesignReport:
    """Outcome of a quantizer design.

    ``p_c``, ``p_cm``, ``ser`` and ``conditional_entropy_bits`` are the
    single-sample (``e = 1``) figures; the ``excursion_*`` fields describe the
    excursion length actually recommended.
    """

    quantizer: MultiLevelQuantizer | None
    p_c: float
    p_cm: float
    ser: float
    conditional_entropy_bits: float
    eta_used: float
    excursion_e: int
    feasible: bool
    converged: bool = True
    iterations: int = 0
    excursion_p_c: float = float("nan")
    excursion_ser: float = float("nan")
    excursion_entropy_bits: float = float("nan")
    method: str = "em-em"

    @property
    def key_rate(self):
        """Expected secret bits per real sample at the recommended excursion length."""
        if self.quantizer is None or not self.feasible:
            return 0.0
        pc = self.excursion_p_c if self.excursion_e > 1 else self.p_c
        return self.quantizer.b * pc / self.excursion_e

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "quantizer"}
        d["quantizer"] = None if self.quantizer is None else self.quantizer.to_dict(self.eta_used, self.excursion_e)
        d["quantizer_hash"] = None if self.quantizer is None else self.quantizer.content_hash()
        return d


def _report(Q, P, eta, converged, iterations, e=1, method="em-em", feasible=None):
    m = metrics(Q, P)
    ex_pc, ex_ser, ex_h = (m.p_c, m.ser, m.conditional_entropy) if e == 1 else excursion_metrics(Q, P, e)
    if feasible is None:
        feasible = bool(converged)
    return DesignReport(
        quantizer=Q,
        p_c=m.p_c,
        p_cm=m.p_cm,
        ser=m.ser,
        conditional_entropy_bits=m.conditional_entropy,
        eta_used=eta,
        excursion_e=e,
        feasible=bool(feasible),
        converged=bool(converged),
        iterations=iterations,
        excursion_p_c=ex_pc,
        excursion_ser=ex_ser,
        excursion_entropy_bits=ex_h,
        method=method,
    )


def em_em(P, b, eta, step=1, max_iterations=MAX_ITERATIONS):
    """Entropy-maximisation / error-minimisation quantizer design.

    Starts from equal-mass cells, alternates the error block (widen guards
    until each adjacent mismatch mass is below ``eta / (2**b - 1)``) and the
    entropy block (translate guards to balance the diagonal masses) until
    both hold, then equalises the diagonal masses with the refining block.

    Returns
    -------
    DesignReport
        ``converged`` is False when the alternation did not settle or a block
        ran out of room; the quantizer is then the last valid iterate.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if b < 1:
        raise ValueError("b must be >= 1")
    K = 2**b
    grid = _Grid(P)
    lo, hi = _init_state(grid, K)
    bound = eta / (K - 1)
    # the error-block target starts at the initial mismatch mass and shrinks
    # geometrically to eta, so guards grow a little per alternation and the
    # entropy block can move them apart before neighbouring cells collapse
    eta0 = max(eta, float(_metrics_from_rect(grid.rect(lo, hi)).p_cm))
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        saved = lo.copy(), hi.copy()
        eta_t = max(eta, eta0 * ANNEAL**it)
        try:
            _error_pass(grid, lo, hi, eta_t, step)
            _entropy_pass(grid, lo, hi, step)
        except InfeasibleDesignError:
            lo, hi = saved
            break
        deltas_ok = all(grid.delta(lo, hi, i) <= bound + _EPS for i in range(K - 1))
        a = grid.alpha(lo, hi)
        h = _entropy(a / a.sum()) if a.sum() > 0 else 0.0
        if deltas_ok and h >= b * (1 - ENTROPY_TOL):
            converged = True
            break
    try:
        _refine_pass(grid, lo, hi, step)
    except InfeasibleDesignError:
        converged = False
    _check_state(lo, hi, grid.n)
    Q = grid.to_quantizer(lo, hi, b)
    feasible = converged and metrics(Q, P).p_cm <= eta * (1 + 1e-9)
    return _report(Q, P, eta, converged, it, feasible=feasible)


def default_eta_grid():
    """20 log-spaced values in ``[1e-6, 1e-1]``."""
    return np.logspace(-6, -1, 20)


def _usable(r):
    return r.quantizer is not None and np.isfinite(r.ser) and r.p_c > 0


def search_eta_star(P, b, eta_grid=None, step=1, designs=None):
    """Grid search for the ``eta`` whose EM-EM design has the smallest SER.

    Every usable design competes, converged or not, since its SER is exact on
    ``P``; ties go to the smaller ``eta``.
    Returns ``(eta_star, report)``; ``eta_star`` is None when no grid point
    produced a usable quantizer.
    """
    if designs is None:
        grid = default_eta_grid() if eta_grid is None else np.sort(np.asarray(eta_grid, dtype=float))
        if len(grid) == 0:
            raise ValueError("empty eta grid")
        designs = [em_em(P, b, float(eta), step) for eta in grid]
    pool = [r for r in designs if _usable(r)]
    if not pool:
        return None, designs[0]
    best = min(pool, key=lambda r: (r.ser, r.eta_used))
    return best.eta_used, best


MIN_ERRORS_RESOLVED = 10  # a mismatch rate beta needs >= this / beta key symbols


def _target_check(beta, n_samples):
    """``meets(ser, p_c, e)``: SER target, optionally with a minimum key length.

    With ``n_samples`` real samples a design at excursion length ``e`` yields
    about ``n_samples * p_c / e`` key symbols.  Fewer than
    ``MIN_ERRORS_RESOLVED / beta`` symbols cannot demonstrate a mismatch rate
    of ``beta`` (a single error would already exceed it), so such designs are
    rejected.
    """

    def meets(ser, pc, e):
        if not (np.isfinite(ser) and pc > 0 and ser <= beta):
            return False
        return n_samples is None or n_samples * pc / e >= MIN_ERRORS_RESOLVED / beta

    return meets


def design_for_target(P, b, beta, e_max=8, eta_grid=None, step=1, selection="min-ser", n_samples=None):
    """Pick a quantizer and excursion length meeting ``SER <= beta``.

    If some ``eta <= beta`` gives a design with ``SER <= beta`` at ``e = 1``
    the one with the largest consensus probability is returned.  Convergence
    of the EM-EM alternation is not required: the metrics are exact on ``P``
    for whatever quantizer it stopped at.
    Otherwise, with ``selection="min-ser"``, the minimum-SER design is paired
    with the smallest ``e <= e_max`` whose run-level SER meets the target; if
    none does the report is marked infeasible.

    ``selection="max-rate"`` instead scans every usable design and every
    ``e <= e_max`` and keeps the pair with the largest expected key rate
    ``b * p_c(e) / e`` among those meeting the target.

    ``n_samples`` (the number of real samples the quantizer will be applied
    to) additionally rejects designs whose expected key is too short to
    resolve ``beta``; see :func:`_target_check`.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if selection not in ("min-ser", "max-rate"):
        raise ValueError(f"unknown selection {selection!r}")
    meets = _target_check(beta, n_samples)
    grid = default_eta_grid() if eta_grid is None else np.sort(np.asarray(eta_grid, dtype=float))
    try:
        designs = [em_em(P, b, float(eta), step) for eta in grid]
    except InfeasibleDesignError:
        # fewer distinct sample values than cells
        nan = float("nan")
        return DesignReport(None, 0.0, 0.0, nan, 0.0, float(grid[0]), 1, False, converged=False)
    ok = [r for r in designs if r.eta_used <= beta and _usable(r) and meets(r.ser, r.p_c, 1)]
    if ok:
        best = max(ok, key=lambda r: (r.p_c, -r.eta_used))
        return replace(best, feasible=True, excursion_e=1)
    if selection == "max-rate":
        pool = [r for r in designs if _usable(r)]
    else:
        eta_star, best = search_eta_star(P, b, designs=designs)
        if eta_star is None:
            return replace(best, feasible=False)
        pool = [best]
    found, found_key = None, None
    for r in pool:
        for e in range(2, int(e_max) + 1):
            pc_e, ser_e, h_e = excursion_metrics(r.quantizer, P, e)
            if not meets(ser_e, pc_e, e):
                continue
            key = (pc_e / e, -e, -r.eta_used)
            if found_key is None or key > found_key:
                found_key = key
                found = replace(
                    r,
                    excursion_e=e,
                    feasible=True,
                    excursion_p_c=pc_e,
                    excursion_ser=ser_e,
                    excursion_entropy_bits=h_e,
                )
            break  # the smallest passing e; longer runs only cost rate
    if found is not None:
        return found
    if not pool:
        return replace(designs[0], feasible=False)
    best = pool[0] if selection == "min-ser" else min(pool, key=lambda r: (r.ser, r.eta_used))
    pc_e, ser_e, h_e = excursion_metrics(best.quantizer, P, int(e_max))
    return replace(
        best,
        excursion_e=int(e_max),
        feasible=False,
        excursion_p_c=pc_e,
        excursion_ser=ser_e,
        excursion_entropy_bits=h_e,
    )


# --------------------------------------------------------------------------
# baselines


def lloyd_max(support, mass, levels, tol=1e-9, max_iter=10_000):
    """Two-step Lloyd iteration on a discrete marginal.

    Returns ``(representatives, thresholds)``; thresholds are midpoints of
    adjacent representatives.
    """
    support = np.asarray(support, dtype=float)
    mass = np.asarray(mass, dtype=float)
    cdf = np.cumsum(mass) / mass.sum()
    reps = np.interp((np.arange(levels) + 0.5) / levels, cdf, support)
    reps = np.maximum.accumulate(reps + np.arange(levels) * 1e-12)
    for _ in range(max_iter):
        thr = 0.5 * (reps[:-1] + reps[1:])
        cell = np.searchsorted(thr, support, side="left")
        w = np.bincount(cell, weights=mass, minlength=levels)
        s = np.bincount(cell, weights=mass * support, minlength=levels)
        new = np.where(w > 0, s / np.where(w > 0, w, 1), reps)
        if np.max(np.abs(new - reps)) < tol:
            reps = new
            break
        reps = new
    return reps, 0.5 * (reps[:-1] + reps[1:])


def _cuts_to_state(grid, thresholds, K):
    n = grid.n
    cuts = np.searchsorted(grid.pts, thresholds, side="right").astype(int)
    prev = 0
    for j in range(K - 1):
        cuts[j] = min(max(cuts[j], prev + 1), n - (K - 1 - j))
        prev = cuts[j]
    lo = np.concatenate(([0], cuts))
    hi = np.concatenate((cuts, [n]))
    return lo, hi


def _grow_guards(P, b, thresholds, target_ser, method, step=1):
    """Widen every guard band by one step at a time until ``SER <= target``."""
    K = 2**b
    grid = _Grid(P)
    lo, hi = _cuts_to_state(grid, np.asarray(thresholds, dtype=float), K)
    ok = False
    while True:
        m = _metrics_from_rect(grid.rect(lo, hi))
        if m.p_c > 0 and m.ser <= target_ser:
            ok = True
            break
        moved = False
        for i in range(K - 1):
            if hi[i] - step > lo[i]:
                hi[i] -= step
                moved = True
            if lo[i + 1] + step < hi[i + 1]:
                lo[i + 1] += step
                moved = True
        if not moved:
            break
    Q = grid.to_quantizer(lo, hi, b)
    return _report(Q, P, float("nan"), ok, 0, method=method, feasible=ok)


def baseline_marginal_maxent(P, b, target_ser=1e-3, step=1):
    """Equal-mass cells from the ``y_B`` marginal, guards grown uniformly."""
    grid = _Grid(P)
    lo, _ = _init_state(grid, 2**b)
    thr = 0.5 * (grid.pts[lo[1:] - 1] + grid.pts[lo[1:]])
    return _grow_guards(P, b, thr, target_ser, "marginal-maxent", step)


def baseline_max_lloyd(P, b, target_ser=1e-3, step=1):
    """Lloyd-Max thresholds of the ``y_B`` marginal, guards grown uniformly."""
    _, thr = lloyd_max(P.x_support, P.marginal_x, 2**b)
    return _grow_guards(P, b, thr, target_ser, "max-lloyd", step)


def baseline_uniform(P, b, target_ser=1e-3, step=1):
    """Equal-width cells over the occupied support range, guards grown uniformly."""
    occupied = P.x_support[P.marginal_x > 0]
    lo, hi = occupied[0], occupied[-1]
    K = 2**b
    thr = lo + (hi - lo) * np.arange(1, K) / K
    return _grow_guards(P, b, thr, target_ser, "uniform", step)
