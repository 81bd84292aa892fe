"""Parameter sweeps that chain simulation, quantizer design and consensus.

One grid cell is a ``(snr_db, m)`` pair.  For each cell the driver simulates
``blocks`` coherence blocks, unfolds the complex CSR of every node into
``2 * blocks`` real samples (in-phase then quadrature), estimates the joint law of the
configured design pair, designs a quantizer with
:func:`~gskring.quantizer.design_for_target` and runs both group and
pairwise consensus on the same traces.

Every cell draws its channels from the same seed, so cells differ only in
their parameters (common random numbers).  Results therefore do not depend on
how cells are distributed across worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import consensus as cons
from .constellation import design_uniform_constellation, nearest_neighbour_constellation
from .leakage import eve_symbols, leakage_report, tally_arrays
from .protocols import PROTOCOLS, run_protocol, sample_block, sum_constellation
from .quantizer import JointDistribution, design_for_target

__all__ = [
    "ExperimentConfig",
    "COLUMNS",
    "csr_constellation",
    "simulate_cell",
    "node_samples",
    "design_pmf",
    "run_cell",
    "leak_summary",
    "run_experiment",
    "run_design_pair_study",
    "run_constellation_study",
    "emit_outputs",
    "read_table",
    "load_config",
]

DESIGN_PAIRS = ("12", "13", "23")
CONSTELLATIONS = ("uniform", "qam")
HIST_BINS = 512
LEAK_MAX_CELLS = 2**20

COLUMNS = (
    "study",
    "protocol",
    "constellation",
    "design_pair",
    "snr_db",
    "m",
    "b",
    "beta",
    "blocks",
    "samples",
    "feasible",
    "converged",
    "eta",
    "e",
    "design_p_c",
    "design_ser",
    "design_entropy",
    "n_group",
    "n_pair",
    "group_key_rate",
    "pair_key_rate",
    "group_mismatch",
    "pair_mismatch",
    "key_entropy",
    "survival_rate",
    "leak_mi",
    "leak_threshold",
    "quantizer_hash",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Sweep parameters; every field can be set from a TOML/JSON file or flags.

    ``snr_db`` is ``1 / sigma**2`` in dB and the pilot-estimation variance
    equals the phase-4 noise variance.  ``eta=None`` lets the designer search
    its ``eta`` grid; a number pins it.  ``selection`` picks how a design and
    excursion length are chosen when ``e = 1`` cannot meet ``beta`` (see
    :func:`~gskring.quantizer.design_for_target`).
    """

    protocol: str = "asqgsk"
    snr_db: tuple = (10.0, 15.0, 20.0, 25.0, 30.0)
    m: tuple = (2, 4, 6, 8, 10, 12, 14)
    b: int = 1
    beta: float = 1e-2
    eta: float | None = None
    blocks: int = 10000
    e_max: int = 8
    seed: int = 0
    design_pair: str = "23"
    constellation: str = "uniform"
    selection: str = "max-rate"
    workers: int | None = None
    out: str | None = None

    def __post_init__(self):
        snr = tuple(float(s) for s in np.atleast_1d(self.snr_db))
        ms = tuple(int(v) for v in np.atleast_1d(self.m))
        object.__setattr__(self, "snr_db", snr)
        object.__setattr__(self, "m", ms)
        object.__setattr__(self, "design_pair", str(self.design_pair))
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if not snr or not ms:
            raise ValueError("snr_db and m must be non-empty")
        if any(v < 2 or v % 2 for v in ms):
            raise ValueError("m must be even and >= 2")
        if int(self.b) < 1:
            raise ValueError("b must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")
        if int(self.blocks) < 1:
            raise ValueError("blocks must be >= 1")
        if int(self.e_max) < 1:
            raise ValueError("excursion_max must be >= 1")
        if self.design_pair not in DESIGN_PAIRS:
            raise ValueError(f"design_pair must be one of {DESIGN_PAIRS}")
        if self.constellation not in CONSTELLATIONS:
            raise ValueError(f"constellation must be one of {CONSTELLATIONS}")
        if self.selection not in ("min-ser", "max-rate"):
            raise ValueError("selection must be 'min-ser' or 'max-rate'")
        if self.workers is not None and int(self.workers) < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["snr_db"] = list(self.snr_db)
        d["m"] = list(self.m)
        return d

    def header(self):
        """Configuration that determines the numbers (excludes workers and paths)."""
        d = self.to_dict()
        d.pop("workers")
        d.pop("out")
        return d

    @classmethod
    def from_mapping(cls, d):
        known = {f.name for f in fields(cls)}
        aliases = {"excursion_max": "e_max", "snr": "snr_db", "L": "blocks"}
        clean = {}
        for k, v in d.items():
            k = aliases.get(k.replace("-", "_"), k.replace("-", "_"))
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            clean[k] = v
        return cls(**clean)


def load_config(path):
    """Read a TOML (``.toml``) or JSON config file into an :class:`ExperimentConfig`."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return ExperimentConfig.from_mapping(data)


def _variances(snr_db):
    sigma2 = 10.0 ** (-snr_db / 10.0)
    return sigma2, sigma2


def csr_constellation(m, gamma, mode="uniform"):
    """Source constellation for quantizing a channel estimate of variance ``1 + gamma``."""
    std = np.sqrt((1.0 + gamma) / 2.0)
    if mode == "uniform":
        return design_uniform_constellation(m, std)
    if mode == "qam":
        # regular square QAM at unit average energy, nearest-level decisions
        return nearest_neighbour_constellation(m)
    raise ValueError(f"unknown constellation mode {mode!r}")


def simulate_cell(cfg, snr_db, m, blocks=None, seed=None):
    """Simulate one grid cell; returns ``(triple, A_csr, A_sum)``."""
    sigma2, gamma = _variances(snr_db)
    blocks = cfg.blocks if blocks is None else blocks
    seed = cfg.seed if seed is None else seed
    block = sample_block(seed, sigma2, gamma, blocks)
    A_csr = csr_constellation(m, gamma, cfg.constellation)
    A_sum = sum_constellation(m, gamma) if cfg.protocol == "aqgsk" else None
    A_run = A_sum if cfg.protocol == "aqgsk" else A_csr
    triple = run_protocol(cfg.protocol, block, A_run)
    return triple, A_csr, A_sum


def _unfold(z):
    """All in-phase parts followed by all quadrature parts.

    Neighbouring samples then come from different coherence blocks, so the
    ``e`` samples of an excursion window are independent, as the run-level
    SER computation assumes.  Interleaving would pair the two components of
    one block, which share the node-3 detection outcome.
    """
    return np.concatenate([z.real, z.imag])


def node_samples(triple):
    """Unfolded real samples of the three nodes over valid blocks."""
    v = triple.valid
    return tuple(_unfold(getattr(triple, f"node{k}")[v]) for k in (1, 2, 3))


def design_pmf(samples, pair, support=None):
    """Joint law of the design pair (first node is the scored one).

    With ``support`` (the finite CSR alphabet) the pmf is exact over it;
    otherwise a 512-bin histogram.
    """
    x, y = samples[int(pair[0]) - 1], samples[int(pair[1]) - 1]
    if support is not None:
        return JointDistribution.from_samples(x, y, support=support)
    return JointDistribution.histogram(x, y, bins=HIST_BINS)


def leak_summary(cfg, triple, A_csr, A_sum):
    x, y, nx, ny = eve_symbols(triple, A_csr, A_sum)
    if nx * ny > LEAK_MAX_CELLS:
        # the joint table would dwarf the sample count; the estimate is meaningless
        return {"MI": None, "threshold": None}
    return leakage_report(tally_arrays(x, y, nx, ny), cfg.protocol)


def run_cell(cfg, snr_db, m, study="sweep"):
    """Full pipeline for one ``(snr_db, m)`` cell; returns a row dict."""
    triple, A_csr, A_sum = simulate_cell(cfg, snr_db, m)
    samples = node_samples(triple)
    support = A_csr.levels if cfg.protocol == "asqgsk" else None
    P = design_pmf(samples, cfg.design_pair, support)
    grid = None if cfg.eta is None else [cfg.eta]
    rep = design_for_target(
        P, cfg.b, cfg.beta, e_max=cfg.e_max, eta_grid=grid, selection=cfg.selection,
        n_samples=len(samples[0]),
    )
    leak = leak_summary(cfg, triple, A_csr, A_sum)
    row = {
        "study": study,
        "protocol": cfg.protocol,
        "constellation": cfg.constellation,
        "design_pair": cfg.design_pair,
        "snr_db": float(snr_db),
        "m": int(m),
        "b": int(cfg.b),
        "beta": float(cfg.beta),
        "blocks": int(cfg.blocks),
        "samples": int(len(samples[0])),
        "feasible": bool(rep.feasible),
        "converged": bool(rep.converged),
        "eta": rep.eta_used,
        "e": rep.excursion_e,
        "design_p_c": rep.excursion_p_c if rep.excursion_p_c is not None else rep.p_c,
        "design_ser": rep.excursion_ser if rep.excursion_ser is not None else rep.ser,
        "design_entropy": rep.excursion_entropy_bits
        if rep.excursion_entropy_bits is not None
        else rep.conditional_entropy_bits,
        "n_group": 0,
        "n_pair": 0,
        "group_key_rate": 0.0,
        "pair_key_rate": 0.0,
        "group_mismatch": 0.0,
        "pair_mismatch": 0.0,
        "key_entropy": 0.0,
        "survival_rate": 0.0,
        "leak_mi": leak["MI"],
        "leak_threshold": leak["threshold"],
        "quantizer_hash": "",
    }
    if not rep.feasible or rep.quantizer is None:
        return row
    Q, e = rep.quantizer, rep.excursion_e
    g = cons.group_consensus(*samples, Q, e)
    p = cons.pairwise_consensus(samples[1], samples[2], Q, e)
    row.update(
        n_group=g.n_keys,
        n_pair=p.n_keys,
        group_key_rate=g.key_rate,
        pair_key_rate=p.key_rate,
        group_mismatch=g.mismatch,
        pair_mismatch=p.mismatch,
        key_entropy=cons.empirical_entropy(g.keys[1]),
        survival_rate=len(p.indices) / len(samples[0]),
        quantizer_hash=Q.content_hash(),
    )
    return row


def _cell_task(args):
    cfg, snr, m, study = args
    return run_cell(cfg, snr, m, study)


def _run_cells(tasks, workers):
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(tasks) <= 1:
        return [_cell_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves task order, so output order never depends on scheduling
        return list(pool.map(_cell_task, tasks))


def run_experiment(cfg):
    """Sweep ``snr_db x m`` for the configured protocol; one row per cell."""
    tasks = [(cfg, s, m, "sweep") for s in cfg.snr_db for m in cfg.m]
    return _run_cells(tasks, cfg.workers)


def run_design_pair_study(cfg, pairs=DESIGN_PAIRS):
    """Same sweep with the quantizer designed on each node pair in turn."""
    tasks = [
        (replace(cfg, design_pair=p), s, m, "design-pair") for p in pairs for s in cfg.snr_db for m in cfg.m
    ]
    return _run_cells(tasks, cfg.workers)


def run_constellation_study(cfg, modes=CONSTELLATIONS):
    """Same sweep with uniform-output and regular-QAM CSR constellations."""
    tasks = [
        (replace(cfg, constellation=c), s, m, "constellation") for c in modes for s in cfg.snr_db for m in cfg.m
    ]
    return _run_cells(tasks, cfg.workers)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def emit_outputs(rows, out_dir, cfg, name="metrics"):
    """Write ``<name>.csv``, ``<name>.json`` and ``<name>.dat`` into ``out_dir``.

    The CSV and gnuplot files start with ``#`` lines holding the configuration
    and the content hashes of the quantizers used; the JSON document carries
    the same information as structured fields.  Output is a pure function of
    ``(rows, cfg)``: no timestamps or host details.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    header = json.dumps(cfg.header(), sort_keys=True)
    hashes = sorted({r["quantizer_hash"] for r in rows if r.get("quantizer_hash")})
    comment = f"# config {header}\n# quantizers {' '.join(hashes) if hashes else '-'}\n"

    buf = io.StringIO()
    buf.write(comment)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])

    dat = io.StringIO()
    dat.write(comment)
    dat.write("# " + " ".join(COLUMNS) + "\n")
    for r in rows:
        dat.write(" ".join(_fmt(r.get(c)) or "NaN" for c in COLUMNS) + "\n")

    doc = {"config": cfg.header(), "quantizers": hashes, "columns": list(COLUMNS), "rows": rows}
    paths = {}
    for suffix, text in (
        ("csv", buf.getvalue()),
        ("dat", dat.getvalue()),
        ("json", json.dumps(doc, indent=2, sort_keys=True) + "\n"),
    ):
        p = out / f"{name}.{suffix}"
        try:
            p.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        paths[suffix] = p
    return paths


def _parse(col, text):
    if text == "":
        return None
    if col in ("feasible", "converged"):
        return text == "true"
    if col in ("study", "protocol", "constellation", "design_pair", "quantizer_hash"):
        return text
    if col in ("m", "b", "blocks", "samples", "e", "n_group", "n_pair"):
        return int(text)
    return float(text)


def read_table(path):
    """Read rows back from a CSV written by :func:`emit_outputs`."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    cols = next(reader)
    return [{c: _parse(c, v) for c, v in zip(cols, rec)} for rec in reader]
