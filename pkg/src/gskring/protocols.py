"""Three-node channel model and the common-randomness exchange protocols.

All functions are vectorised over coherence blocks: a :class:`BlockRealization`
holds ``n`` blocks worth of channel, estimation-error and noise draws, and each
protocol maps it to a :class:`CsrTriple` of length-``n`` arrays.

Random draws are organised in fixed-size chunks of blocks, each chunk with its
own ``SeedSequence(seed, spawn_key=(chunk,))`` stream, so any slice of blocks
is reproducible independently of how a run is partitioned across workers.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constellation import RegularQam, design_uniform_constellation

__all__ = [
    "BlockRealization",
    "CsrTriple",
    "PROTOCOLS",
    "sample_block",
    "detect_ranks",
    "map_detect",
    "run_gsk_unquantized",
    "run_aqgsk",
    "run_asqgsk",
    "run_protocol",
    "eavesdropper_view",
    "sum_constellation",
    "write_trace",
    "read_trace",
]

PROTOCOLS = ("gsk", "aqgsk", "asqgsk")
CHUNK = 4096
DEGENERATE_FLOOR = 1e-9

# order of the complex draws inside a chunk
_FIELDS = ("h12", "h13", "h23", "e1_2", "e1_3", "e2_1", "e2_3", "e3_1", "e3_2", "n4_2", "n4_3")


@dataclass(frozen=True)
class BlockRealization:
    """Channel and noise draws for a run of coherence blocks.

    ``eX_Y`` is the estimation error at node ``Y`` in phase ``X`` (variance
    ``gamma``); ``n4_Y`` is the phase-4 receiver noise at node ``Y``
    (variance ``sigma2``).  Reciprocity is structural: one field per link.
    """

    block_index: np.ndarray
    sigma2: float
    gamma: float
    h12: np.ndarray
    h13: np.ndarray
    h23: np.ndarray
    e1_2: np.ndarray
    e1_3: np.ndarray
    e2_1: np.ndarray
    e2_3: np.ndarray
    e3_1: np.ndarray
    e3_2: np.ndarray
    n4_2: np.ndarray
    n4_3: np.ndarray

    def __len__(self):
        return len(self.block_index)


@dataclass(frozen=True)
class CsrTriple:
    """Per-node common-randomness observations and the phase-4 broadcast."""

    protocol: str
    node1: np.ndarray
    node2: np.ndarray
    node3: np.ndarray
    phase4: np.ndarray
    valid: np.ndarray
    block_index: np.ndarray
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.node1)


def _chunk_draws(seed, chunk):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))
    z = rng.standard_normal((len(_FIELDS), 2, CHUNK))
    return z[:, 0, :] + 1j * z[:, 1, :]


def sample_block(seed, sigma2, gamma, n_blocks=1, start=0):
    """Draw ``n_blocks`` independent coherence blocks starting at ``start``.

    Channels are ``CN(0, 1)``, estimation errors ``CN(0, gamma)`` and phase-4
    noise ``CN(0, sigma2)``.  The result depends only on ``seed`` and the
    block indices requested.
    """
    if sigma2 < 0 or gamma < 0:
        raise ValueError("variances must be non-negative")
    if n_blocks < 0:
        raise ValueError("n_blocks must be non-negative")
    idx = np.arange(start, start + n_blocks)
    first, last = start // CHUNK, (start + n_blocks - 1) // CHUNK if n_blocks else start // CHUNK - 1
    if n_blocks:
        z = np.concatenate([_chunk_draws(seed, c) for c in range(first, last + 1)], axis=1)
        z = z[:, start - first * CHUNK : start - first * CHUNK + n_blocks]
    else:
        z = np.zeros((len(_FIELDS), 0), dtype=complex)
    scale = {"h": np.sqrt(0.5), "e": np.sqrt(gamma / 2.0), "n": np.sqrt(sigma2 / 2.0)}
    draws = {name: z[i] * scale[name[0]] for i, name in enumerate(_FIELDS)}
    return BlockRealization(block_index=idx, sigma2=float(sigma2), gamma=float(gamma), **draws)


def detect_ranks(y, h_est, axis, e_avg):
    """Per-component ML ranks of the transmitted product-constellation point.

    For a flat channel ``|y - h c / sqrt(E)|**2 = |h|**2 / E * |y sqrt(E) / h - c|**2``,
    so ML detection over a product constellation reduces to nearest-level
    decisions on the equalised sample.  Ties resolve to the lower level.
    """
    axis = np.asarray(axis, dtype=float)
    y = np.asarray(y, dtype=complex)
    h_est = np.asarray(h_est, dtype=complex)
    tiny = np.abs(h_est) < DEGENERATE_FLOOR
    safe_h = np.where(tiny, 1.0, h_est)
    z = y * np.sqrt(e_avg) / safe_h
    mid = 0.5 * (axis[:-1] + axis[1:])
    re = np.searchsorted(mid, z.real, side="left")
    im = np.searchsorted(mid, z.imag, side="left")
    # with no channel knowledge all points tie
    re = np.where(tiny, 0, re)
    im = np.where(tiny, 0, im)
    return re, im


def map_detect(y, h_est, qam, e_avg=None):
    """ML (= MAP under a uniform prior) estimate of a regular-QAM symbol."""
    if e_avg is None:
        e_avg = qam.mean_energy
    if e_avg <= 0:
        raise ValueError("e_avg must be positive")
    axis = qam.axis
    re, im = detect_ranks(y, h_est, axis, e_avg)
    out = axis[re] + 1j * axis[im]
    return out if np.ndim(out) else complex(out)


def _params(block, **extra):
    d = {"sigma2": block.sigma2, "gamma": block.gamma}
    d.update(extra)
    return d


def run_gsk_unquantized(block):
    """Phase 1-4 exchange with the facilitator broadcasting the exact sum."""
    th2_1 = block.h12 + block.e2_1
    th3_1 = block.h13 + block.e3_1
    th1_3 = block.h13 + block.e1_3
    total = th2_1 + th3_1
    rx = block.h13 * total + block.n4_3
    valid = np.abs(th1_3) >= DEGENERATE_FLOOR
    safe = np.where(valid, th1_3, 1.0)
    node3 = np.where(valid, rx / safe - th1_3, np.nan + 0j)
    return CsrTriple(
        protocol="gsk",
        node1=th2_1,
        node2=block.h12 + block.e1_2,
        node3=node3,
        phase4=total,
        valid=valid,
        block_index=block.block_index,
        params=_params(block),
    )


def sum_constellation(m, gamma):
    """Uniform-output constellation matched to ``theta2_1 + theta3_1``."""
    return design_uniform_constellation(m, np.sqrt(1.0 + gamma))


def run_aqgsk(block, A):
    """Facilitator quantizes the continuous sum directly onto ``A``.

    ``A`` should be designed for the sum (per-component std ``sqrt(1 + gamma)``,
    see :func:`sum_constellation`).  Node 3 detects the point of ``A`` and
    subtracts its own continuous estimate of ``h13``.
    """
    th2_1 = block.h12 + block.e2_1
    th3_1 = block.h13 + block.e3_1
    th1_3 = block.h13 + block.e1_3
    total = th2_1 + th3_1
    q = A.levels[np.searchsorted(A.boundaries, total.real, side="left")] + 1j * A.levels[
        np.searchsorted(A.boundaries, total.imag, side="left")
    ]
    e_avg = A.mean_energy
    rx = block.h13 * q / np.sqrt(e_avg) + block.n4_3
    re, im = detect_ranks(rx, th1_3, A.levels, e_avg)
    q_hat = A.levels[re] + 1j * A.levels[im]
    valid = np.abs(th1_3) >= DEGENERATE_FLOOR
    return CsrTriple(
        protocol="aqgsk",
        node1=th2_1,
        node2=block.h12 + block.e1_2,
        node3=np.where(valid, q_hat - th1_3, np.nan + 0j),
        phase4=q,
        valid=valid,
        block_index=block.block_index,
        params=_params(block, m=A.m),
    )


def _ranks(z, A):
    return np.searchsorted(A.boundaries, z.real, side="left"), np.searchsorted(A.boundaries, z.imag, side="left")


def run_asqgsk(block, A):
    """Algebraic symmetric-quantization exchange over ``Z_M[i]``.

    Node 1 quantizes both of its estimates onto ``A``, adds their ring images
    and broadcasts the corresponding regular-QAM point at unit average power.
    Node 3 detects that point and subtracts, over the ring, the ring image of
    its own quantized ``h13`` estimate.
    """
    M = A.size
    qam = RegularQam(A.m)
    e_avg = qam.mean_energy
    a_re, a_im = _ranks(block.h12 + block.e2_1, A)
    c_re, c_im = _ranks(block.h13 + block.e3_1, A)
    s_re, s_im = (a_re + c_re) % M, (a_im + c_im) % M
    theta = (2 * s_re - (M - 1)) + 1j * (2 * s_im - (M - 1))
    th1_3 = block.h13 + block.e1_3
    rx = block.h13 * theta / np.sqrt(e_avg) + block.n4_3
    d_re, d_im = detect_ranks(rx, th1_3, qam.axis, e_avg)
    k_re, k_im = _ranks(th1_3, A)
    r3_re, r3_im = (d_re - k_re) % M, (d_im - k_im) % M
    b_re, b_im = _ranks(block.h12 + block.e1_2, A)
    lv = A.levels
    return CsrTriple(
        protocol="asqgsk",
        node1=lv[a_re] + 1j * lv[a_im],
        node2=lv[b_re] + 1j * lv[b_im],
        node3=lv[r3_re] + 1j * lv[r3_im],
        phase4=theta,
        valid=np.ones(len(block), dtype=bool),
        block_index=block.block_index,
        params=_params(block, m=A.m),
    )


def run_protocol(protocol, block, A=None):
    """Dispatch by protocol tag; ``A`` is required for the quantized ones."""
    if protocol == "gsk":
        return run_gsk_unquantized(block)
    if A is None:
        raise ValueError(f"protocol {protocol!r} needs a constellation")
    if protocol == "aqgsk":
        return run_aqgsk(block, A)
    if protocol == "asqgsk":
        return run_asqgsk(block, A)
    raise ValueError(f"unknown protocol {protocol!r}")


def eavesdropper_view(block, protocol, A=None):
    """What a noiseless eavesdropper with perfect ``h_1E`` recovers in phase 4."""
    return run_protocol(protocol, block, A).phase4


_TRACE_COLUMNS = (
    "block",
    "node1_re",
    "node1_im",
    "node2_re",
    "node2_im",
    "node3_re",
    "node3_im",
    "phase4_re",
    "phase4_im",
    "valid",
    "protocol",
)


def _trace_rows(triple):
    for i in range(len(triple)):
        yield (
            int(triple.block_index[i]),
            repr(float(triple.node1[i].real)),
            repr(float(triple.node1[i].imag)),
            repr(float(triple.node2[i].real)),
            repr(float(triple.node2[i].imag)),
            repr(float(triple.node3[i].real)),
            repr(float(triple.node3[i].imag)),
            repr(float(triple.phase4[i].real)),
            repr(float(triple.phase4[i].imag)),
            int(bool(triple.valid[i])),
            triple.protocol,
        )


def write_trace(path, triple, **header):
    """Write a CSR trace as CSV (``#`` parameter header) or JSON by suffix."""
    path = Path(path)
    meta = {"protocol": triple.protocol, **triple.params, **header}
    if path.suffix == ".json":
        cols = {c: [] for c in _TRACE_COLUMNS[:-1]}
        for row in _trace_rows(triple):
            for c, v in zip(_TRACE_COLUMNS[:-1], row[:-1]):
                cols[c].append(float(v) if isinstance(v, str) else v)
        path.write_text(json.dumps({"params": meta, "columns": cols}, sort_keys=True))
        return path
    with path.open("w", newline="") as fh:
        for k in sorted(meta):
            fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh)
        w.writerow(_TRACE_COLUMNS)
        w.writerows(_trace_rows(triple))
    return path


def read_trace(path):
    """Inverse of :func:`write_trace`; returns ``(CsrTriple, params)``."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        params, cols = doc["params"], doc["columns"]
        arr = {k: np.asarray(v) for k, v in cols.items()}
    else:
        params, lines = {}, []
        with path.open() as fh:
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    params[k] = v
                else:
                    lines.append(line)
        rows = list(csv.DictReader(lines))
        arr = {c: np.asarray([r[c] for r in rows]) for c in _TRACE_COLUMNS[:-1]}
        arr = {c: v.astype(int if c in ("block", "valid") else float) for c, v in arr.items()}
    cplx = {n: arr[f"{n}_re"].astype(float) + 1j * arr[f"{n}_im"].astype(float) for n in ("node1", "node2", "node3", "phase4")}
    triple = CsrTriple(
        protocol=params.get("protocol", ""),
        valid=arr["valid"].astype(bool),
        block_index=arr["block"].astype(int),
        params=dict(params),
        **cplx,
    )
    return triple, params
