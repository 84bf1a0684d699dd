"""Command-line front end: ``aslrlab run | hist | table1 | list``.

Exit codes: 0 success, 1 usage or configuration error, 2 a campaign ended
NotFound or Degraded.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import trials as T
from .campaigns import Status
from .errors import CapabilityError, LabError
from .prober import Backend, parse_backend, parse_policy
from .reporting import (
    histogram,
    histogram_csv,
    format_table,
    read_latencies,
    render_histogram,
    table_csv,
    write_samples_csv,
)
from .space import load_scenario

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_FOUND = 2


def _presets() -> list[str]:
    folder = resources.files("aslrlab").joinpath("data", "scenarios")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aslrlab", description="Masked-op address-space probing lab")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a campaign over one or more seeded trials")
    run.add_argument("--scenario", required=True, help="scenario JSON file or bundled preset name")
    run.add_argument("--campaign", required=True, help="campaign name (see 'aslrlab list')")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--trials", type=int, default=1)
    run.add_argument("--noise-sigma", type=float, default=None, help="override the profile's noise sigma")
    run.add_argument("--no-noise", action="store_true", help="disable all timing noise")
    run.add_argument("--policy", default=None, help="second-of-two or median-of-K (default median-of-7)")
    run.add_argument("--backend", default=None, help="sim or native (default $ASLRLAB_BACKEND, else sim)")
    run.add_argument("--allow-native", action="store_true", help="permit probing this machine's CPU")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--out", default=None, help="directory for report.json, samples.csv and hist.csv")
    run.add_argument("--bucket-width", type=int, default=1)

    hist = sub.add_parser("hist", help="latency histogram of a samples CSV")
    hist.add_argument("samples", help="samples.csv from a previous run")
    hist.add_argument("--bucket-width", type=int, default=1)
    hist.add_argument("--width", type=int, default=60, help="length of the longest bar")
    hist.add_argument("--out", default=None, help="also write the histogram as CSV")

    t1 = sub.add_parser("table1", help="base and module derandomization summary per CPU profile")
    t1.add_argument("--trials", type=int, default=100)
    t1.add_argument("--seed", type=int, default=0)
    t1.add_argument("--policy", default=None)
    t1.add_argument("--workers", type=int, default=1)
    t1.add_argument("--out", default=None, help="also write the table as CSV")

    sub.add_parser("list", help="list campaigns and bundled scenarios")
    return parser


def _write_hist(latencies, bucket_width: int, path: Path) -> None:
    path.write_text(histogram_csv(histogram(latencies, bucket_width), bucket_width), encoding="ascii")


def cmd_run(args) -> int:
    if args.trials < 1:
        raise T.UsageError("--trials must be >= 1")
    T.get_campaign(args.campaign)
    policy = parse_policy(args.policy)
    backend = parse_backend(args.backend)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if backend is Backend.NativeHardware:
        report = T.run_native(args.campaign, policy, allow_native=args.allow_native or None)
        payload = {"backend": backend.value, "policy": str(policy), **report.to_dict()}
        statuses = [report.status]
        first = report
        print(f"{args.campaign} on native hardware: {report.status.value}", end="")
        if report.detected_base is not None:
            print(f" base {report.detected_base:#x}", end="")
        print()
    else:
        spec = load_scenario(args.scenario)
        summary = T.run_trials(
            spec,
            args.campaign,
            args.trials,
            args.seed,
            policy,
            noise=not args.no_noise,
            noise_sigma=args.noise_sigma,
            workers=args.workers,
            keep_first_samples=out is not None,
            scenario_name=Path(args.scenario).stem,
        )
        payload = {"backend": backend.value, "seed": args.seed, **summary.to_dict()}
        statuses = [r.report.status for r in summary.results]
        first = summary.results[0].report
        acc = summary.accuracy
        acc_text = "n/a" if acc is None else f"{100 * acc:.2f}%"
        print(
            f"{args.campaign} on {summary.scenario}: {len(summary.results)} trials, "
            f"accuracy {acc_text}, found {summary.found}/{len(summary.results)}, "
            f"{summary.mean_probes:.0f} probes per trial ({summary.policy})"
        )
        if len(summary.results) == 1 and first.detected_base is not None:
            print(f"detected base {first.detected_base:#x}")

    if out is not None:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        (out / "report.json").write_text(text, encoding="ascii")
        write_samples_csv(first.iter_samples(), out / "samples.csv")
        _write_hist([lat for _, _, lat in first.iter_samples()], args.bucket_width, out / "hist.csv")
        print(f"wrote {out / 'report.json'}, {out / 'samples.csv'}, {out / 'hist.csv'}")

    if any(s is not Status.Found for s in statuses):
        return EXIT_NOT_FOUND
    return EXIT_OK


def cmd_hist(args) -> int:
    lat = read_latencies(args.samples)
    hist = histogram(lat, args.bucket_width)
    sys.stdout.write(render_histogram(hist, args.bucket_width, args.width))
    if args.out:
        Path(args.out).write_text(histogram_csv(hist, args.bucket_width), encoding="ascii")
    return EXIT_OK


def cmd_table1(args) -> int:
    rows = T.table1(args.trials, args.seed, args.policy, workers=args.workers)
    sys.stdout.write(format_table(T.TABLE1_HEADER, rows))
    print(f"{args.trials} trials per row; wall time is simulator time, not comparable to hardware")
    if args.out:
        Path(args.out).write_text(table_csv(T.TABLE1_HEADER, rows), encoding="ascii")
    return EXIT_OK


def cmd_list(args) -> int:
    print("campaigns:")
    for c in T.CAMPAIGNS.values():
        print(f"  {c.name:<18} {c.help}")
    print("scenarios:")
    for name in _presets():
        print(f"  {name}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "hist": cmd_hist, "table1": cmd_table1, "list": cmd_list}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; 2 is reserved for NotFound here
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (LabError, CapabilityError) as exc:
        print(f"aslrlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
