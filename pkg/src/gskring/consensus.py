"""Index-set exchange that turns quantized CSR samples into shared keys.

Positions are 0-based.  A position ``r`` qualifies at a node when its
``e`` quantized samples ``r .. r+e-1`` are all the same non-erased symbol.
Only index sets travel over the public channel; key symbols never do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantizer import ERASURE, evaluate

__all__ = [
    "ConsensusResult",
    "quantize_sequence",
    "excursion_indices",
    "non_overlapping",
    "group_consensus",
    "pairwise_consensus",
    "key_rate",
    "mismatch_rate",
    "group_mismatch_rate",
    "empirical_entropy",
    "key_to_bits",
    "export_key",
    "write_transcript",
]


def quantize_sequence(Q, y):
    """Quantized symbols (cell indices, ``ERASURE`` in guards) of real samples."""
    return np.asarray(evaluate(Q, np.asarray(y, dtype=float)), dtype=int)


def excursion_indices(s, e=1):
    """Start positions of runs of ``e`` identical, non-erased symbols."""
    s = np.asarray(s)
    if e < 1:
        raise ValueError("e must be >= 1")
    n = len(s) - e + 1
    if n <= 0:
        return np.zeros(0, dtype=int)
    ok = s[:n] != ERASURE
    for t in range(1, e):
        ok &= s[t : t + n] == s[:n]
    return np.nonzero(ok)[0]


def non_overlapping(indices, e):
    """Starts on the aligned tiling ``0, e, 2e, ...`` (disjoint windows).

    Picking greedily from the left would also give disjoint windows, but a
    long agreeing run blocks its own successors while a disagreeing window
    rarely is blocked, so the kept windows would over-represent mismatches.
    On the fixed tiling every window is kept or dropped on its own samples.
    """
    indices = np.asarray(indices, dtype=int)
    if e == 1 or len(indices) == 0:
        return indices
    return indices[indices % e == 0]


@dataclass(frozen=True)
class ConsensusResult:
    """Agreed positions and each party's key symbols.

    ``indices`` is the final public index set; ``selected`` the
    non-overlapping starts actually used for keys (equal to ``indices`` when
    ``e = 1``); ``keys`` holds one symbol array per party in party order.
    """

    indices: np.ndarray
    selected: np.ndarray
    keys: tuple
    n_samples: int
    e: int
    b: int
    transcript: list = field(default_factory=list)

    @property
    def n_keys(self):
        return len(self.selected)

    @property
    def key_rate(self):
        return key_rate(self.n_keys, self.n_samples, self.b)

    @property
    def mismatch(self):
        """Fraction of key positions where any two parties disagree."""
        return group_mismatch_rate(*self.keys)

    @property
    def max_pairwise_mismatch(self):
        ks = self.keys
        return max(mismatch_rate(ks[i], ks[j]) for i in range(len(ks)) for j in range(i + 1, len(ks)))


def _check_lengths(*seqs):
    n = len(seqs[0])
    if any(len(s) != n for s in seqs):
        raise ValueError("all CSR sequences must have equal length")
    return n


def group_consensus(ya, yb, yc, Q, e=1):
    """Three-party exchange: node 2 -> node 1 -> node 3 -> everyone.

    Node 2 publishes ``I_B``; node 1 intersects with its own set and
    publishes ``I_BA``; node 3 intersects again and publishes ``I_CBA``.
    """
    n = _check_lengths(ya, yb, yc)
    sa, sb, sc = (quantize_sequence(Q, y) for y in (ya, yb, yc))
    i_b = excursion_indices(sb, e)
    i_a = excursion_indices(sa, e)
    i_ba = np.intersect1d(i_b, i_a, assume_unique=True)
    i_c = excursion_indices(sc, e)
    i_cba = np.intersect1d(i_c, i_ba, assume_unique=True)
    sel = non_overlapping(i_cba, e)
    transcript = [
        {"from": "node2", "to": ["node1"], "set": "I_B", "indices": i_b.tolist()},
        {"from": "node1", "to": ["node3"], "set": "I_BA", "indices": i_ba.tolist()},
        {"from": "node3", "to": ["node1", "node2"], "set": "I_CBA", "indices": i_cba.tolist()},
    ]
    return ConsensusResult(i_cba, sel, (sa[sel], sb[sel], sc[sel]), n, e, Q.b, transcript)


def pairwise_consensus(yb, yc, Q, e=1):
    """Two-party exchange between node 2 and node 3."""
    n = _check_lengths(yb, yc)
    sb, sc = quantize_sequence(Q, yb), quantize_sequence(Q, yc)
    i_b = excursion_indices(sb, e)
    i_cb = np.intersect1d(excursion_indices(sc, e), i_b, assume_unique=True)
    sel = non_overlapping(i_cb, e)
    transcript = [
        {"from": "node2", "to": ["node3"], "set": "I_B", "indices": i_b.tolist()},
        {"from": "node3", "to": ["node2"], "set": "I_CB", "indices": i_cb.tolist()},
    ]
    return ConsensusResult(i_cb, sel, (sb[sel], sc[sel]), n, e, Q.b, transcript)


def key_rate(n_keys, n_samples, b):
    """Secret bits per real sample: one ``b``-bit symbol per retained window."""
    return b * n_keys / n_samples if n_samples else 0.0


def mismatch_rate(k1, k2):
    """Normalised Hamming distance between two equal-length keys."""
    k1, k2 = np.asarray(k1), np.asarray(k2)
    if k1.shape != k2.shape:
        raise ValueError("keys must have equal length")
    return float(np.mean(k1 != k2)) if k1.size else 0.0


def group_mismatch_rate(*keys):
    """Fraction of positions where not all parties hold the same symbol."""
    keys = [np.asarray(k) for k in keys]
    _check_lengths(*keys)
    if keys[0].size == 0:
        return 0.0
    bad = np.zeros(keys[0].shape, dtype=bool)
    for k in keys[1:]:
        bad |= k != keys[0]
    return float(bad.mean())


def empirical_entropy(key):
    """Plug-in symbol entropy of a key sequence in bits."""
    key = np.asarray(key)
    if key.size == 0:
        return 0.0
    _, counts = np.unique(key, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def key_to_bits(key, b):
    """Natural-binary expansion, ``b`` bits per symbol, most significant first."""
    key = np.asarray(key, dtype=int)
    if np.any((key < 0) | (key >= 2**b)):
        raise ValueError("key contains symbols outside the b-bit alphabet")
    shifts = np.arange(b - 1, -1, -1)
    return ((key[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def export_key(path, key, b, e, quantizer_hash, seed, fmt="hex"):
    """Write key material with a ``#`` header; ``fmt`` is ``"hex"`` or ``"bits"``."""
    bits = key_to_bits(key, b)
    if fmt == "bits":
        body = "".join(map(str, bits.tolist()))
    elif fmt == "hex":
        body = np.packbits(bits).tobytes().hex()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    header = f"# b={b} e={e} quantizer={quantizer_hash} seed={seed} symbols={len(key)} bits={len(bits)}\n"
    Path(path).write_text(header + body + "\n")
    return Path(path)


def write_transcript(path, result):
    """Public-channel index exchange as JSON lines."""
    with Path(path).open("w") as fh:
        for msg in result.transcript:
            fh.write(json.dumps(msg) + "\n")
    return Path(path)
