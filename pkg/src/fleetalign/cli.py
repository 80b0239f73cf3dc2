"""Command-line entry point: ``fleetalign <command> [--config FILE] [--set key=value ...]``.

Every command writes ``config.txt`` (the fully resolved configuration) into
its output directory; rerunning with ``--config`` pointing at that file
reproduces the other artifacts. Progress goes to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import __version__
from .config import architecture_spec, dump_config, fleet_config, load_config, sweep_config
from .data import (SplitSpec, UnitDataset, apply_normalization, clean, fit_normalization, read_csv, split,
                   write_csv)
from .errors import ConfigError, DataError, DivergenceError
from .fleet import (FleetSpec, UnitInfo, generate_fleet, load_results, prepare_pair, report,
                    results_jsonl, select_source_by_mmd, sweep, write_tables)
from .trainer import save_bundle, train_pair

log = logging.getLogger("fleetalign")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


# ----------------------------------------------------------------------- inputs
def load_fleet(cfg: dict) -> FleetSpec:
    """Manifest if given, else a two-unit fleet from CSV paths, else the synthetic fleet."""
    if cfg["manifest"]:
        fleet = FleetSpec.read_manifest(cfg["manifest"])
    elif cfg["source_csv"] or cfg["target_csv"]:
        if not (cfg["source_csv"] and cfg["target_csv"]):
            raise ConfigError("source_csv and target_csv must be given together")
        if cfg["detection_time"] is None or cfg["train_window"] is None:
            raise ConfigError("CSV input needs detection_time and train_window")
        src = read_csv(cfg["source_csv"], cfg["source"] or "source")
        tgt = read_csv(cfg["target_csv"], cfg["target"] or "target")
        fleet = FleetSpec([UnitInfo(src.unit_id, "source"), UnitInfo(tgt.unit_id, "target", cfg["detection_time"])],
                          {src.unit_id: src, tgt.unit_id: tgt})
    else:
        log.info("no input data configured; generating the synthetic fleet")
        fleet = generate_fleet(fleet_config(cfg))
    if cfg["train_window"] is not None:
        fleet.train_window = cfg["train_window"]
    if cfg["blackout_window"] is not None:
        fleet.blackout_window = cfg["blackout_window"]
    return fleet


def _pick(fleet: FleetSpec, cfg: dict) -> tuple:
    source = cfg["source"] or (fleet.sources[0].unit_id if fleet.sources else None)
    target = cfg["target"] or (fleet.targets[0].unit_id if fleet.targets else None)
    if source is None or target is None:
        raise DataError("fleet needs at least one source and one target")
    for uid in (source, target):
        try:
            fleet.unit(uid)
        except KeyError:
            raise DataError(f"unknown unit {uid!r}") from None
    return source, target


# --------------------------------------------------------------------- commands
def cmd_generate_fleet(cfg: dict, out: Path) -> None:
    fleet = generate_fleet(fleet_config(cfg))
    path = fleet.write_manifest(out)
    log.info("wrote %d units and %s", len(fleet.units), path)


def cmd_prepare(cfg: dict, out: Path) -> None:
    """Clean, split and normalize every unit; one params file per unit (or one pooled file)."""
    fleet = load_fleet(cfg)
    splits = {}
    for u in fleet.units:
        data = clean(fleet.datasets[u.unit_id])
        spec = (SplitSpec(fleet.train_window, cfg["validation_fraction"], fleet.blackout_window, u.detection_time)
                if u.role == "target" else SplitSpec(None, cfg["validation_fraction"]))
        splits[u.unit_id] = split(data, spec)
    if cfg["normalization"] == "pooled":
        pooled = fit_normalization(*(s.train for s in splits.values()))
        params = {uid: pooled for uid in splits}
    elif cfg["normalization"] == "unit":
        params = {uid: fit_normalization(s.train) for uid, s in splits.items()}
    else:
        raise ConfigError(f"normalization must be 'unit' or 'pooled', got {cfg['normalization']!r}")
    for uid, s in splits.items():
        params[uid].save(out / f"{uid}.params.csv")
        for part in ("train", "validation", "healthy_test", "faulty_test"):
            d: UnitDataset = getattr(s, part)
            if len(d):
                write_csv(apply_normalization(d, params[uid]), out / f"{uid}.{part}.csv")
    log.info("prepared %d units into %s", len(splits), out)


def cmd_train(cfg: dict, out: Path) -> None:
    fleet = load_fleet(cfg)
    source, target = _pick(fleet, cfg)
    spec = architecture_spec(cfg)
    pair = prepare_pair(fleet, source, target, cfg["normalization"], cfg["validation_fraction"])
    log.info("training %s on %s -> %s", spec.kind, source, target)
    model, result = train_pair(spec, pair.source_train, pair.target_train, pair.source_val, pair.target_val,
                               pair.healthy_test, pair.faulty_test, source, target)
    save_bundle(model, out / "model.json")
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("FPR %.2f%%, fault detected: %s", result.fpr, result.fault_detected)


def cmd_sweep(cfg: dict, out: Path) -> None:
    fleet = load_fleet(cfg)
    results = sweep(fleet, sweep_config(cfg))
    (out / "results.jsonl").write_text(results_jsonl(results))
    (out / "runs.jsonl").write_text(results_jsonl(results, include_runtime=True))
    write_tables(report(results), out)
    failed = sum(1 for r in results if r.error)
    log.info("%d results (%d failed runs) in %s", len(results), failed, out)


def cmd_select_source(cfg: dict, out: Path) -> None:
    fleet = load_fleet(cfg)
    targets = [cfg["target"]] if cfg["target"] else [u.unit_id for u in fleet.targets]
    selection = {}
    for t in targets:
        best, scores = select_source_by_mmd(fleet, t, channels=cfg["channels"], max_rows=cfg["mmd_max_rows"],
                                            seed=cfg["seed"])
        selection[t] = {"source": best, "mmd": scores}
        log.info("%s: selected %s", t, best)
    (out / "selection.json").write_text(json.dumps(selection, indent=2, sort_keys=True) + "\n")


def cmd_report(cfg: dict, out: Path) -> None:
    if not cfg["results"]:
        raise ConfigError("report needs results=<path to results.jsonl>")
    path = Path(cfg["results"])
    if not path.exists():
        raise DataError(f"{path}: results file not found")
    selected = None
    if cfg["selection"]:
        selected = {t: v["source"] for t, v in json.loads(Path(cfg["selection"]).read_text()).items()}
    for p in write_tables(report(load_results(path), selected), out):
        log.info("wrote %s", p)


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "select-source": cmd_select_source,
    "generate-fleet": cmd_generate_fleet,
    "report": cmd_report,
}


# ------------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleetalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="master seed (same as --set seed=N)")
        p.add_argument("--workers", type=int, help="parallel training runs (same as --set workers=N)")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001 - last-resort diagnostics
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
