"""Command-line driver: ``gskring <command> [flags]`` or ``python -m gskring``.

Commands
--------
simulate   write a CSR trace for one ``(snr, m)`` cell
design     design a quantizer on the configured node pair's joint pmf
consensus  design, then run group and pairwise consensus and export keys
leakage    estimate the phase-4 leakage of one cell
sweep      run the ``snr x m`` grid and write metrics tables
study      design-pair or constellation comparison over the grid

Flags override values read with ``--config``.  Exit status is 0 on success,
2 when every produced result is infeasible and 1 on error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import consensus as cons
from .experiments import (
    CONSTELLATIONS,
    DESIGN_PAIRS,
    ExperimentConfig,
    design_pmf,
    emit_outputs,
    leak_summary,
    load_config,
    node_samples,
    run_constellation_study,
    run_design_pair_study,
    run_experiment,
    simulate_cell,
)
from .protocols import PROTOCOLS, write_trace
from .quantizer import design_for_target

log = logging.getLogger("gskring")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2

# flag dest -> ExperimentConfig field
_FLAG_FIELDS = {
    "protocol": "protocol",
    "snr_db": "snr_db",
    "m": "m",
    "b": "b",
    "beta": "beta",
    "eta": "eta",
    "blocks": "blocks",
    "excursion_max": "e_max",
    "seed": "seed",
    "design_pair": "design_pair",
    "constellation": "constellation",
    "selection": "selection",
    "workers": "workers",
    "out": "out",
}


def _common(p, grid):
    nargs = "+" if grid else None
    p.add_argument("--config", type=Path, help="TOML or JSON file with config keys")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--snr-db", type=float, nargs=nargs, help="SNR = 1/sigma^2 in dB")
    p.add_argument("--m", type=int, nargs=nargs, help="constellation has 2^m points")
    p.add_argument("--b", type=int, help="key bits per quantized sample")
    p.add_argument("--beta", type=float, help="target mismatch rate")
    p.add_argument("--eta", type=float, help="pin the error-block target (default: search)")
    p.add_argument("--blocks", type=int, help="coherence blocks L")
    p.add_argument("--excursion-max", type=int, help="largest excursion length tried")
    p.add_argument("--seed", type=int)
    p.add_argument("--design-pair", choices=DESIGN_PAIRS)
    p.add_argument("--constellation", choices=CONSTELLATIONS)
    p.add_argument("--selection", choices=("min-ser", "max-rate"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="parallel grid cells (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="gskring", description="Group secret-key generation simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, grid, text in (
        ("simulate", False, "write a CSR trace"),
        ("design", False, "design a quantizer for one cell"),
        ("consensus", False, "run consensus for one cell and export keys"),
        ("leakage", False, "estimate the phase-4 leakage of one cell"),
        ("sweep", True, "sweep the snr x m grid"),
    ):
        _common(sub.add_parser(name, help=text), grid)
    study = sub.add_parser("study", help="design-pair or constellation comparison")
    study.add_argument("kind", choices=("design-pair", "constellation"))
    _common(study, True)
    return parser


def config_from_args(args):
    """Merge ``--config`` (if any) with explicitly given flags."""
    base = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    updates = {}
    for dest, fld in _FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            updates[fld] = v
    return replace(base, **updates)


def _single_cell(cfg, single_default):
    """The one ``(snr, m)`` a per-cell command acts on."""
    snr = cfg.snr_db if cfg.snr_db != ExperimentConfig.snr_db else (single_default[0],)
    m = cfg.m if cfg.m != ExperimentConfig.m else (single_default[1],)
    if len(snr) != 1 or len(m) != 1:
        raise ValueError("this command takes a single --snr-db and --m")
    return snr[0], m[0]


def _out_dir(cfg, default):
    out = Path(cfg.out if cfg.out is not None else default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path, doc):
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")


def cmd_simulate(cfg, snr, m):
    triple, A_csr, _ = simulate_cell(cfg, snr, m)
    out = _out_dir(cfg, "gsk_out")
    write_trace(out / "trace.csv", triple, seed=cfg.seed, snr_db=snr, m=m)
    A_csr.save(out / "constellation.json")
    print(f"wrote {len(triple)} blocks to {out / 'trace.csv'}")
    return EXIT_OK


def _design(cfg, snr, m):
    triple, A_csr, _ = simulate_cell(cfg, snr, m)
    samples = node_samples(triple)
    support = A_csr.levels if cfg.protocol == "asqgsk" else None
    P = design_pmf(samples, cfg.design_pair, support)
    grid = None if cfg.eta is None else [cfg.eta]
    rep = design_for_target(
        P, cfg.b, cfg.beta, e_max=cfg.e_max, eta_grid=grid, selection=cfg.selection, n_samples=len(samples[0])
    )
    return samples, rep


def cmd_design(cfg, snr, m):
    _, rep = _design(cfg, snr, m)
    out = _out_dir(cfg, "gsk_out")
    _write_json(out / "design.json", {"config": cfg.header(), "snr_db": snr, "m": m, "report": rep.to_dict()})
    if rep.quantizer is not None:
        rep.quantizer.save(out / "quantizer.json", eta=rep.eta_used, e=rep.excursion_e)
    status = "feasible" if rep.feasible else "infeasible"
    run = rep.excursion_p_c is not None
    pc, ser = (rep.excursion_p_c, rep.excursion_ser) if run else (rep.p_c, rep.ser)
    print(f"{status}: e={rep.excursion_e} p_c(e)={pc:.4g} ser(e)={ser:.3g} key_rate={rep.key_rate:.4g}")
    return EXIT_OK if rep.feasible else EXIT_INFEASIBLE


def cmd_consensus(cfg, snr, m):
    samples, rep = _design(cfg, snr, m)
    out = _out_dir(cfg, "gsk_out")
    if not rep.feasible or rep.quantizer is None:
        _write_json(out / "consensus.json", {"config": cfg.header(), "feasible": False})
        print("infeasible: no design meets the target")
        return EXIT_INFEASIBLE
    Q, e = rep.quantizer, rep.excursion_e
    g = cons.group_consensus(*samples, Q, e)
    p = cons.pairwise_consensus(samples[1], samples[2], Q, e)
    h = Q.content_hash()
    Q.save(out / "quantizer.json", eta=rep.eta_used, e=e)
    cons.write_transcript(out / "transcript.jsonl", g)
    for k, key in enumerate(g.keys, start=1):
        cons.export_key(out / f"key_node{k}.hex", key, Q.b, e, h, cfg.seed)
    doc = {
        "config": cfg.header(),
        "feasible": True,
        "snr_db": snr,
        "m": m,
        "e": e,
        "quantizer_hash": h,
        "group": {"n_keys": g.n_keys, "key_rate": g.key_rate, "mismatch": g.mismatch},
        "pairwise": {"n_keys": p.n_keys, "key_rate": p.key_rate, "mismatch": p.mismatch},
        "key_entropy": cons.empirical_entropy(g.keys[1]),
    }
    _write_json(out / "consensus.json", doc)
    print(f"group key rate {g.key_rate:.4g} (mismatch {g.mismatch:.3g}), pairwise {p.key_rate:.4g}")
    return EXIT_OK


def cmd_leakage(cfg, snr, m):
    triple, A_csr, A_sum = simulate_cell(cfg, snr, m)
    rep = leak_summary(cfg, triple, A_csr, A_sum)
    rep = {**rep, "protocol": cfg.protocol, "m": m, "snr_db": snr}
    out = _out_dir(cfg, "gsk_out")
    _write_json(out / "leakage.json", rep)
    if rep["MI"] is None:
        print("joint table too large for the sample count; leakage not estimated")
    else:
        print(f"MI {rep['MI']:.3g} bits (threshold {rep['threshold']:.3g})")
    return EXIT_OK


def _grid_exit(rows):
    if rows and not any(r["feasible"] for r in rows):
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_sweep(cfg):
    rows = run_experiment(cfg)
    paths = emit_outputs(rows, _out_dir(cfg, "gsk_out"), cfg, "metrics")
    print(f"{len(rows)} cells -> {paths['csv']}")
    return _grid_exit(rows)


def cmd_study(cfg, kind):
    if kind == "design-pair":
        rows = run_design_pair_study(cfg)
    else:
        rows = run_constellation_study(cfg)
    name = kind.replace("-", "_")
    paths = emit_outputs(rows, _out_dir(cfg, "gsk_out"), cfg, name)
    print(f"{len(rows)} cells -> {paths['csv']}")
    return _grid_exit(rows)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "study":
            return cmd_study(cfg, args.kind)
        snr, m = _single_cell(cfg, (20.0, 4))
        handler = {
            "simulate": cmd_simulate,
            "design": cmd_design,
            "consensus": cmd_consensus,
            "leakage": cmd_leakage,
        }[args.command]
        return handler(cfg, snr, m)
    except (ValueError, OSError, KeyError) as exc:
        log.debug("failure", exc_info=True)
        print(f"gskring: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
