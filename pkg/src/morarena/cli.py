"""Command-line entry point.

Commands share one output tree, ``<out>/seed-<n>/``, and pass artifacts to
each other through it:

    gen-data   -> data.csv
    train      -> accuser.model, suspect-<preset>.model
    calibrate  -> thresholds-<scheme>.json
    claim      -> claim-<scheme>.moc, watermarked-<scheme>.model, stolen-<scheme>.model
    forge      -> forged-<scheme>.moc
    resolve    reads a claim, a suspect, a source model and the thresholds
    screen, defend, e2e append records; report renders them.

Every run record goes to ``<out>/records.jsonl``. Exit status is 0 on success,
1 on an expected failure (bad arguments, missing or malformed input) and 2 on
an internal error; failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .claims import SCHEMES, ClaimFormatError, Ledger, LedgerError, OwnershipClaim
from .data import DataError, GroundTruth, load_csv, save_csv
from .harness import (ConfigError, ExperimentConfig, World, append_record, e2e, read_records,
                      run_calibrate, run_defend, run_forge, run_screen, run_sweep)
from .judge import THRESHOLD_KINDS, DecisionThresholds, resolve
from .models import MlpClassifier, accuracy

EXIT_OK, EXIT_FAIL, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    def __init__(self, path, hint=""):
        self.path = Path(path)
        super().__init__(f"missing artifact {self.path}" + (f" (run `{hint}` first)" if hint else ""))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--scheme", choices=SCHEMES)
    common.add_argument("--threshold", choices=THRESHOLD_KINDS)
    common.add_argument("--seeds", type=int, metavar="N", help="number of seeds to run")
    common.add_argument("--out", metavar="DIR", help="output tree (default from config)")
    common.add_argument("--epsilon", type=float, metavar="R", help="attack L-inf bound")
    common.add_argument("--ensemble", type=int, metavar="N", help="attack ensemble size")

    parser = _Parser(prog="morarena", description="Model ownership resolution arena.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "write each seed's dataset to data.csv",
        "train": "train the accuser source and the suspect",
        "calibrate": "calibrate decision thresholds from the judge's populations",
        "claim": "generate an honest claim and an extracted copy of the watermarked model",
        "forge": "generate a false claim from the accuser's source model",
        "resolve": "run the judge's four checks on one claim and one suspect",
        "screen": "screen honest and forged trigger sets against holdout independents",
        "defend": "forged claim against an adversarially trained suspect",
        "report": "render thresholds and effectiveness tables from run records",
        "e2e": "train, calibrate, forge and resolve for every seed",
    }
    cmds = {name: sub.add_parser(name, parents=[common], help=h) for name, h in helps.items()}
    cmds["forge"].add_argument("--sweep", metavar="E1,E2,...",
                               help="also score the suspect at each of these epsilons")
    r = cmds["resolve"]
    r.add_argument("--claim", metavar="PATH", help="claim container (default forged-<scheme>.moc)")
    r.add_argument("--suspect", metavar="PATH", help="suspect model (default suspect-<preset>.model)")
    r.add_argument("--source", metavar="PATH", help="accuser source model (default accuser.model)")
    r.add_argument("--seed", type=int, help="which seed directory to use (default: first)")
    rep = cmds["report"]
    rep.add_argument("--records", metavar="PATH", help="JSON-lines records (default <out>/records.jsonl)")
    rep.add_argument("--figures", action="store_true", help="also write PNG figures next to the CSV")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(path)
        cfg = ExperimentConfig.load(path)
    else:
        cfg = ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("scheme", "threshold", "seeds", "out", "epsilon", "ensemble")
                 if getattr(args, k, None) is not None}
    return cfg.with_(**overrides).with_env()


def seed_dir(cfg, seed) -> Path:
    return Path(cfg.out) / f"seed-{seed}"


def _require(path, hint):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, hint)
    return path


def _thresholds_path(cfg, seed, scheme):
    return seed_dir(cfg, seed) / f"thresholds-{scheme}.json"


def open_world(cfg, seed, *, models=(), thresholds=False, ledger=None) -> World:
    """A world built from the seed directory's artifacts; missing ones are errors."""
    d = seed_dir(cfg, seed)
    ds = load_csv(_require(d / "data.csv", "gen-data"))
    meta = d / "data.meta.json"
    if meta.exists():
        # synthetic blobs: restore the generating centers the CSV cannot carry
        m = json.loads(meta.read_text())
        ds = dataclasses.replace(ds, centers=np.array(m["centers"]), spread=m["spread"],
                                 provenance=m["provenance"])
    loaded = {}
    for role in models:
        loaded[role] = MlpClassifier.load(_require(d / f"{role}.model", "train"))
    th = {}
    if thresholds:
        path = _require(_thresholds_path(cfg, seed, cfg.scheme), f"calibrate --scheme {cfg.scheme}")
        th[cfg.scheme] = DecisionThresholds.from_dict(json.loads(path.read_text()))
    return World(cfg, seed, dataset=ds, ledger=ledger, models=loaded, thresholds=th)


def _merge_ledger(cfg, seed, scratch: Ledger) -> None:
    """Timestamp the scratch ledger's new commitments in the persistent one, in order."""
    path = seed_dir(cfg, seed) / "ledger.jsonl"
    led = Ledger.load(path)
    for cm, _ in scratch.entries:
        if cm not in led:
            led.timestamp(cm)
    led.save(path)


def _emit(cfg, rec):
    append_record(Path(cfg.out) / "records.jsonl", rec)


def _print(obj):
    print(json.dumps(obj, sort_keys=True, default=str))


# --- commands -----------------------------------------------------------------

def cmd_gen_data(cfg, args):
    for seed in cfg.run_seeds():
        d = seed_dir(cfg, seed)
        d.mkdir(parents=True, exist_ok=True)
        w = World(cfg, seed)
        save_csv(w.dataset, d / "data.csv")
        if w.dataset.centers is not None:
            meta = {"centers": w.dataset.centers.tolist(), "spread": w.dataset.spread,
                    "provenance": w.dataset.provenance}
            (d / "data.meta.json").write_text(json.dumps(meta))
        _print({"seed": seed, "path": str(d / "data.csv"), "samples": len(w.dataset)})
    cfg.save(Path(cfg.out) / "config.txt")


def cmd_train(cfg, args):
    for seed in cfg.run_seeds():
        t0 = time.perf_counter()
        w = open_world(cfg, seed)
        d = seed_dir(cfg, seed)
        hold = w.split.holdout
        out = {}
        for role, model in (("accuser", w.accuser_source), (f"suspect-{cfg.preset}", w.suspect())):
            model.save(d / f"{role}.model")
            out[role] = {"digest": model.digest, "accuracy": accuracy(model, hold.features, hold.labels)}
        rec = {"kind": "train", "config": cfg.digest, "seed": seed, "scheme": cfg.scheme,
               "models": out, "wall_clock": round(time.perf_counter() - t0, 4)}
        _emit(cfg, rec)
        _print(rec)


def cmd_calibrate(cfg, args):
    for seed in cfg.run_seeds():
        # the judge's own calibration claims never reach the public ledger
        w = open_world(cfg, seed)
        rec = run_calibrate(w, cfg.scheme)
        _thresholds_path(cfg, seed, cfg.scheme).write_text(json.dumps(rec["thresholds"], sort_keys=True))
        _emit(cfg, rec)
        _print(rec)


def cmd_claim(cfg, args):
    s = cfg.scheme
    for seed in cfg.run_seeds():
        scratch = Ledger()
        w = open_world(cfg, seed, models=("accuser",), ledger=scratch)
        d = seed_dir(cfg, seed)
        wm = w.honest_accuser(s)
        wm.claim.save(d / f"claim-{s}.moc")
        w.truth.save_origins(d / f"claim-{s}.origins.npz")
        wm.model.save(d / f"watermarked-{s}.model")
        w.stolen(wm, f"thief-{s}").save(d / f"stolen-{s}.model")
        _merge_ledger(cfg, seed, scratch)
        _print({"seed": seed, "scheme": s, "claim": str(d / f"claim-{s}.moc"),
                "triggers": len(wm.claim), "commitment": wm.claim.commitment})


def cmd_forge(cfg, args):
    s = cfg.scheme
    grid = None
    if args.sweep:
        try:
            grid = tuple(float(v) for v in args.sweep.split(",") if v.strip())
        except ValueError:
            raise UsageError(f"--sweep expects comma-separated numbers, got {args.sweep!r}") from None
    for seed in cfg.run_seeds():
        scratch = Ledger()
        w = open_world(cfg, seed, models=("accuser",), thresholds=True, ledger=scratch)
        d = seed_dir(cfg, seed)
        claim, _ = w.forge(s)
        claim.save(d / f"forged-{s}.moc")
        w.truth.save_origins(d / f"forged-{s}.origins.npz")
        rec = run_forge(w, s, cfg.threshold)
        _merge_ledger(cfg, seed, scratch)
        _emit(cfg, rec)
        _print(rec)
        if grid:
            sweep = run_sweep(w, s, grid)
            _emit(cfg, sweep)
            _print(sweep)


def cmd_resolve(cfg, args):
    seed = args.seed if args.seed is not None else cfg.run_seeds()[0]
    d = seed_dir(cfg, seed)
    claim_path = _require(args.claim or d / f"forged-{cfg.scheme}.moc", "forge")
    suspect_path = _require(args.suspect or d / f"suspect-{cfg.preset}.model", "train")
    source_path = _require(args.source or d / "accuser.model", "train")
    th_path = _require(_thresholds_path(cfg, seed, cfg.scheme), f"calibrate --scheme {cfg.scheme}")
    ds = load_csv(_require(d / "data.csv", "gen-data"))
    claim = OwnershipClaim.load(claim_path)
    if claim.scheme != cfg.scheme:
        raise UsageError(f"{claim_path} is a {claim.scheme} claim; pass --scheme {claim.scheme}")
    truth = GroundTruth(ds, cfg.truth_radius)
    origins = Path(claim_path).with_suffix(".origins.npz")
    if origins.exists():
        truth.load_origins(origins)
    t0 = time.perf_counter()
    th = DecisionThresholds.from_dict(json.loads(th_path.read_text()))
    v = resolve(claim, MlpClassifier.load(suspect_path), th, Ledger.load(d / "ledger.jsonl"),
                MlpClassifier.load(source_path), truth, cfg.threshold)
    rec = {"kind": "resolve", "config": cfg.digest, "seed": seed, "scheme": cfg.scheme,
           "threshold": cfg.threshold, "thresholds": th.as_dict(), "claim": str(claim_path),
           "suspect": str(suspect_path), "verdict": v.as_dict(),
           "wall_clock": round(time.perf_counter() - t0, 4)}
    _emit(cfg, rec)
    _print(rec)


def cmd_screen(cfg, args):
    for seed in cfg.run_seeds():
        w = open_world(cfg, seed, models=("accuser",), thresholds=True)
        rec = run_screen(w, cfg.scheme)
        _emit(cfg, rec)
        _print(rec)


def cmd_defend(cfg, args):
    for seed in cfg.run_seeds():
        w = open_world(cfg, seed, models=("accuser",))
        rec = run_defend(w, cfg.scheme)
        _emit(cfg, rec)
        _print(rec)


def cmd_report(cfg, args):
    path = Path(args.records) if args.records else Path(cfg.out) / "records.jsonl"
    records = read_records(_require(path, "e2e"))
    rows = report.table_rows(records)
    text, table = report.render_text(rows), report.to_csv(rows)
    out = path.parent
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(table)
    print(text, end="")
    if args.figures:
        for fig in report.render_figures(rows, out):
            print(f"wrote {fig}")


def cmd_e2e(cfg, args):
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    recs = e2e(cfg, cfg.scheme, cfg.threshold, Path(cfg.out) / "records.jsonl")
    rows = [[str(r["seed"]), f"{r['mor_acc']:.3f}", f"{r['thresholds'][cfg.threshold]:.3f}",
             "yes" if r["verdict"]["accepted"] else "no"] for r in recs]
    header = ["seed", "mor_acc", f"{cfg.threshold}_threshold", "accepted"]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    for line in [header, *rows]:
        print("  ".join(c.rjust(w) for c, w in zip(line, widths)))
    wins = sum(r["verdict"]["accepted"] for r in recs)
    print(f"attack success ({cfg.scheme}, {cfg.threshold} threshold): {wins}/{len(recs)}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "calibrate": cmd_calibrate, "claim": cmd_claim,
    "forge": cmd_forge, "resolve": cmd_resolve, "screen": cmd_screen, "defend": cmd_defend,
    "report": cmd_report, "e2e": cmd_e2e,
}


def _fail(kind, message, code, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_FAIL)
    except MissingArtifact as exc:
        return _fail("missing-file", str(exc), EXIT_FAIL, path=str(exc.path))
    except FileNotFoundError as exc:
        path = exc.filename or (exc.args[0] if exc.args else "")
        return _fail("missing-file", f"missing file {path}", EXIT_FAIL, path=str(path))
    except (ConfigError, DataError, ClaimFormatError, LedgerError, report.ReportError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAIL)
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
