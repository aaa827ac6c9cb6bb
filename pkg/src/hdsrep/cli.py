"""Command-line front end: generate logs, export HDS tables, run and sweep experiments.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(unreadable or malformed input, unwritable output), 4 audit violations.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .emaillog import LogFormatError, expected_spam_fraction, write_log, write_truth
from .experiments import PRESETS, ExperimentSpec, SpecError, erratic_mix, load_log, resolve_spec, run_cells, standard_mix
from .hds import build_hds, write_hds_csv
from .metrics import write_report, write_roc_csv, write_sweep_csv
from .simulator import write_outcomes, write_trace
from .srm import SRM_KINDS

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_AUDIT = 0, 2, 3, 4

log = logging.getLogger("hdsrep")

# flag name -> spec field
FLAG_FIELDS = {
    "seed": "seed", "log": "log", "ips": "ips", "duration": "duration", "mix": "mix", "learner": "learner",
    "mode": "mode", "batch_period": "batch_period", "clear_period": "clear_period", "blt": "blt",
    "wlt": "wlt", "epsilon": "epsilon", "w0": "w0", "windows": "windows", "pred": "pred", "cadence": "cadence",
    "history": "history",
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="JSON experiment spec; flags override its values")
    common.add_argument("--preset", choices=PRESETS, help="experiment preset (default: from spec, else custom)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--log", help="input log CSV (default: synthesise the benchmark log)")
    common.add_argument("--ips", type=int, help="synthetic IP count")
    common.add_argument("--duration", type=float, help="synthetic log length in minutes")
    common.add_argument("--mix", choices=("standard", "erratic"))
    common.add_argument("--srm", choices=SRM_KINDS, action="append", help="repeatable; default all four")
    common.add_argument("--learner", choices=("naive-bayes", "logistic", "tree"))
    common.add_argument("--mode", choices=("continuous", "batch"))
    common.add_argument("--batch-period", type=float)
    common.add_argument("--clear-period", type=float, help="minutes between list clears; 0 disables")
    common.add_argument("--blt", type=float)
    common.add_argument("--wlt", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--history", type=float, help="heuristic look-back in minutes")
    common.add_argument("--w0", type=float)
    common.add_argument("--windows", type=int)
    common.add_argument("--pred", type=float)
    common.add_argument("--cadence", type=float, help="HDS record spacing in minutes (default w0)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hdsrep", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesise a labeled log and its ground truth")
    sub.add_parser("export-hds", parents=[common], help="build the HDS table of a log as CSV")
    sub.add_parser("run", parents=[common], help="train and simulate each SRM once")
    sub.add_parser("sweep", parents=[common], help="run a batch-frequency or history-length sweep")
    return p


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    base: dict = {}
    preset = args.preset
    if args.spec:
        try:
            base = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read spec {args.spec}: {e}") from None
        if not isinstance(base, dict):
            raise UsageError(f"spec {args.spec} must hold a JSON object")
        preset = preset or base.pop("preset", None)
        base.pop("preset", None)
        if base.get("clear_period") == 0:
            base["clear_period"] = None
    overrides = {field: getattr(args, flag) for flag, field in FLAG_FIELDS.items()}
    if args.srm:
        overrides["srm"] = list(dict.fromkeys(args.srm))
    if args.clear_period is not None:
        if args.clear_period < 0:
            raise UsageError(f"--clear-period must be >= 0, got {args.clear_period}")
        if args.clear_period == 0:
            # None overrides are skipped, so disabling has to go through the base layer
            base["clear_period"] = None
            overrides["clear_period"] = None
    if args.duration is not None and not args.duration > 0:
        raise UsageError(f"--duration must be > 0 minutes, got {args.duration}")
    if args.windows is not None and args.windows < 1:
        raise UsageError(f"--windows must be >= 1, got {args.windows}")
    try:
        spec = resolve_spec(preset or "custom", base, overrides)
    except (SpecError, TypeError) as e:
        raise UsageError(str(e)) from None
    return spec


def _prepare_out(out: str) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from None
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, spec: ExperimentSpec) -> None:
    files = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            files[str(f.relative_to(out))] = hashlib.sha256(f.read_bytes()).hexdigest()
    _write_json(out / "manifest.json", {"command": command, "version": __version__, "seed": spec.seed,
                                        "spec": spec.to_dict(), "files": files})


def cmd_generate(spec: ExperimentSpec, out: Path) -> int:
    if spec.log:
        raise UsageError("generate synthesises a log; --log is not accepted")
    syn_log, syn = load_log(spec)
    write_log(syn_log, out / "log.csv")
    write_truth(syn.truth, out / "truth.csv")
    mix = erratic_mix(spec.ips) if spec.mix == "erratic" else standard_mix(spec.ips)
    _write_json(out / "summary.json", {
        "emails": len(syn_log), "ips": int(len(syn_log.distinct_ips())),
        "spam_fraction": syn_log.spam_fraction(), "expected_spam_fraction": expected_spam_fraction(mix, spec.duration),
        "archetypes": [{"count": n, **a.to_dict()} for a, n in mix],
    })
    log.info("wrote %d emails to %s", len(syn_log), out / "log.csv")
    return EXIT_OK


def cmd_export_hds(spec: ExperimentSpec, out: Path) -> int:
    email_log, _ = load_log(spec)
    table = build_hds(email_log, spec.hds_config())
    write_hds_csv(table, out / "hds.csv")
    log.info("wrote %d HDS rows to %s", len(table), out / "hds.csv")
    return EXIT_OK


def _cell_dir(out: Path, key: dict) -> Path:
    parts = [key["srm"]]
    if "batch_period" in key:
        parts.append(f"bp{key['batch_period']:g}")
    if "n" in key:
        parts.append(f"n{key['n']}")
    d = out / "-".join(parts)
    d.mkdir(exist_ok=True)
    return d


def _run_all(spec: ExperimentSpec, out: Path, write_traces: bool) -> tuple[list[dict], bool]:
    email_log, _ = load_log(spec)
    rows, clean = [], True
    for key, cell in run_cells(spec, email_log):
        d = _cell_dir(out, key)
        write_report(cell.report, d / "report.json")
        _write_json(d / "audit.json", cell.audit)
        if cell.report.roc is not None:
            write_roc_csv(cell.report.roc, d / "roc.csv")
        if write_traces:
            write_outcomes(cell.result, d / "outcomes.csv")
            write_trace(cell.result.trace, d / "trace.jsonl")
        if not cell.audit["ok"]:
            clean = False
            log.error("audit violations in %s: %s", d.name, cell.audit["counts"])
        r = cell.report
        rows.append({**key, "error": r.error, "fpr": r.fpr, "tpr": r.tpr, "bl_size": r.bl_size,
                     "wl_hits": r.wl_hits, "auc": r.auc, "fgain": r.fgain})
        log.info("%s auc=%s fpr=%s tpr=%s", d.name, r.auc, r.fpr, r.tpr)
    return rows, clean


def cmd_run(spec: ExperimentSpec, out: Path) -> int:
    if spec.preset in ("batch-frequency-sweep", "history-length-sweep"):
        raise UsageError(f"preset {spec.preset} is a sweep; use the sweep subcommand")
    rows, clean = _run_all(spec, out, write_traces=True)
    write_sweep_csv(rows, out / "summary.csv", ("srm", "error", "fpr", "tpr", "bl_size", "wl_hits", "auc", "fgain"))
    return EXIT_OK if clean else EXIT_AUDIT


def cmd_sweep(spec: ExperimentSpec, out: Path) -> int:
    if spec.preset == "history-length-sweep":
        columns = ("srm", "n", "window_len", "error", "fpr", "tpr", "bl_size", "wl_hits", "auc")
    elif spec.preset == "batch-frequency-sweep" or (spec.mode == "batch" and spec.batch_periods):
        columns = ("srm", "batch_period", "error", "fpr", "tpr", "bl_size", "wl_hits", "auc")
    else:
        raise UsageError("sweep needs --preset batch-frequency-sweep or history-length-sweep "
                         "(or a spec with batch_periods / window_counts)")
    rows, clean = _run_all(spec, out, write_traces=False)
    write_sweep_csv(rows, out / "sweep.csv", columns)
    return EXIT_OK if clean else EXIT_AUDIT


COMMANDS = {"generate": cmd_generate, "export-hds": cmd_export_hds, "run": cmd_run, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = spec_from_args(args)
        if args.command == "sweep" and spec.preset == "history-length-sweep" and not spec.window_counts:
            raise UsageError("history-length sweep needs window_counts")
        out = _prepare_out(args.out)
        _write_json(out / "spec.json", spec.to_dict())
        code = COMMANDS[args.command](spec, out)
        _manifest(out, args.command, spec)
        return code
    except UsageError as e:
        print(f"hdsrep: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LogFormatError, OSError) as e:
        print(f"hdsrep: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # configuration problems surfacing from the library (no usable HDS rows, ...)
        print(f"hdsrep: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
