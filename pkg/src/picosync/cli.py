"""Command line entry point: ``picosync <command> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import engine, pulsechain
from .analysis import StreamingHistogram, car_from_histogram
from .config import apply_overrides, parse_file
from .qtag import QtagError, iter_tags
from .source import ConfigError
from .timebase import floor_key

log = logging.getLogger("picosync")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _out_dir(arg: str | None, default: str) -> Path:
    return Path(os.environ.get(engine.OUTPUT_DIR_ENV) or arg or default)


def cmd_simulate(args) -> int:
    sync = True if args.sync is None else args.sync
    cfg = engine.calibrated_testbed_config(sync_enabled=sync)
    if args.config:
        cfg = apply_overrides(cfg, parse_file(args.config))
    if args.sync is not None:
        cfg = replace(cfg, sync=replace(cfg.sync, enabled=args.sync))
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.n_slots is not None:
        cfg = replace(cfg, n_slots=args.n_slots)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    cfg.validate()
    res = engine.run_experiment(cfg)
    r = res.report
    print(f"CAR {r.car:.3f} +- {r.car_sigma:.3f} (C={r.c_counts}, A={r.a_mean_counts:.3f}), predicted {res.predicted_car:.3f}")
    print(f"artifacts in {engine.resolve_output_dir(cfg)}")
    return EXIT_OK


def _last_fs(chunk, period_fs: int):
    if chunk.size == 0:
        return None
    s, o = floor_key(chunk["slot"][-1:], chunk["offset_fs"][-1:], period_fs)
    return int(s[0]) * period_fs + int(o[0])


def cmd_analyze(args) -> int:
    bin_fs = int(round(args.bin_ps * 1000))
    window_fs = int(round(args.window_ps * 1000))
    it_a, it_b = iter_tags(args.tags_a), iter_tags(args.tags_b)
    (period, ca), (period_b, cb) = next(it_a), next(it_b)
    if period != period_b:
        raise QtagError("tag files have different clock periods")
    hist = StreamingHistogram(bin_fs, (args.peaks + 1) * period, period)
    last = [None, None]
    while ca is not None or cb is not None:
        empty = (ca if ca is not None else cb)[:0]
        ca = empty if ca is None else ca
        cb = empty if cb is None else cb
        for i, c in enumerate((ca, cb)):
            last[i] = _last_fs(c, period) if c.size else last[i]
        nxt_a, nxt_b = next(it_a, None), next(it_b, None)
        # a finished stream no longer bounds the watermark
        live = [t for t, nxt in zip(last, (nxt_a, nxt_b)) if nxt is not None]
        wm = min(live) if live and None not in live else None
        hist.feed(ca, cb, watermark=wm)
        ca = None if nxt_a is None else nxt_a[1]
        cb = None if nxt_b is None else nxt_b[1]
    h = hist.finalize()
    report = car_from_histogram(h, window_fs, period, args.peaks)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        out = _out_dir(args.out, ".")
        out.mkdir(parents=True, exist_ok=True)
        h.to_csv(out / "histogram.csv")
        (out / "car_report.json").write_text(text)
    print(text)
    return EXIT_OK


def _write_waveform(path: Path, w) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["time_fs", "value"])
        for t, v in zip(w.times_fs, w.samples):
            out.writerow([repr(float(t)), repr(float(v))])


def cmd_pulsechain(args) -> int:
    stages = pulsechain.run_chain()
    wanted = ["input", "picoshort", "picoamp", "mzm"] if args.stage == "all" else [args.stage]
    out = _out_dir(args.out, "pulsechain")
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for name in wanted:
        w = stages[name]
        _write_waveform(out / f"{name}.csv", w)
        if name != "input":
            metrics[name] = {"fwhm_ps": pulsechain.fwhm(w) / 1000.0}
    if "mzm" in wanted:
        metrics["mzm"]["extinction_db"] = pulsechain.extinction_db(stages["mzm"])
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    base = engine.testbed_config(sync_enabled=False)
    if args.config:
        base = apply_overrides(base, parse_file(args.config))
    base = replace(base, sync=replace(base.sync, enabled=False))
    if args.sync:
        p = engine.calibrate_pair_prob(base, args.reference_car)
        base = replace(base, source=replace(base.source, pair_prob_per_pulse=p))
        rate = engine.calibrate_raman(base, args.target_car)
        out = {"pair_prob_per_pulse": p, "raman_rate_per_slot": rate, "target_car": args.target_car}
    else:
        p = engine.calibrate_pair_prob(base, args.target_car)
        out = {"pair_prob_per_pulse": p, "target_car": args.target_car}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    checks = engine.verify_manifest(run)
    report = json.loads((run / "car_report.json").read_text())
    print(f"CAR {report['car']} +- {report['car_sigma']}  (predicted {report['predicted_car']})")
    print(f"fidelity >= {report['fidelity_bound']}, visibility >= {report['visibility_bound']}")
    for name, ok in sorted(checks.items()):
        print(f"{name}: {'ok' if ok else 'DIGEST MISMATCH'}")
    return EXIT_OK if all(checks.values()) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picosync", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the two-arm experiment")
    s.add_argument("--config", help="key = value overrides on the calibrated testbed config")
    s.add_argument("--sync", type=_on_off, default=None, help="on|off")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-slots", type=int)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="CAR from two QTAG files")
    a.add_argument("--tags-a", required=True)
    a.add_argument("--tags-b", required=True)
    a.add_argument("--window-ps", type=float, default=200.0)
    a.add_argument("--peaks", type=int, default=10)
    a.add_argument("--bin-ps", type=float, default=10.0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("pulsechain", help="clock pulse waveforms through the electronics")
    c.add_argument("--stage", choices=["all", "picoshort", "picoamp", "mzm"], default="all")
    c.add_argument("--out")
    c.set_defaults(func=cmd_pulsechain)

    k = sub.add_parser("calibrate", help="fit rates to a target CAR with the closed-form model")
    k.add_argument("--target-car", type=float, required=True)
    k.add_argument("--sync", type=_on_off, default=True, help="on: fit the Raman rate; off: fit the pair probability")
    k.add_argument("--reference-car", type=float, default=engine.TESTBED_CAR_SYNC_OFF,
                   help="sync-off CAR that fixes the pair probability first")
    k.add_argument("--config")
    k.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("report", help="summarise a run directory and verify its manifest")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
