"""Command line entry point: ``gcnetomaly {synth,run,report}``.

A run directory holds the synthetic inputs (``events.jsonl``,
``inventory.json``, ``population.conf``, ``ground_truth.json``) and the
outputs of ``run`` (``reports/``, ``artifacts/``, ``history.jsonl``,
``manifest.json``). ``report`` adds ``summary.csv``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, format_config
from .ingest import read_event_files
from .model import ABLATIONS
from .pipeline import run_pipeline, write_run
from .scoring import AnomalyReport, Verdict, alert_table, format_anomaly_share
from .synth import (
    AttackSpec,
    PopulationConfig,
    ad_population_config,
    generate_population,
    ground_truth,
    inject_attack,
    inject_bruteforce,
    write_inventory,
    write_log,
)

logger = logging.getLogger("gcnetomaly")

EVENTS_FILE = "events.jsonl"
INVENTORY_FILE = "inventory.json"
POPULATION_FILE = "population.conf"
TRUTH_FILE = "ground_truth.json"


class UsageError(Exception):
    """Missing or unusable inputs; reported on stderr with exit code 1."""


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", action="append", default=[], metavar="PATH",
                        help="key=value config file (repeatable, later files win)")
    parser.add_argument("--preset", choices=("atm", "ad"), default=None)
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--ablation", choices=ABLATIONS, default=None)
    parser.add_argument("--out", type=Path, default=Path("run"), metavar="DIR", help="run directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcnetomaly", description="Graph autoencoder anomaly detection on EDR logs")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic fleet log")
    _common(synth)
    synth.add_argument("--inject-attack", action="store_true", help="inject the two-target C2 attack")
    synth.add_argument("--inject-bruteforce", metavar="TARGET", default=None,
                       help="inject enumeration traffic from machine TARGET")

    run = sub.add_parser("run", help="score every eligible window")
    _common(run)
    run.add_argument("--days", metavar="RANGE", default=None,
                     help="window indices i or i-j, or dates YYYY-MM-DD[:YYYY-MM-DD]")

    report = sub.add_parser("report", help="summarize a completed run")
    _common(report)
    report.add_argument("run_dir", nargs="?", type=Path, default=None)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, object]:
    values: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value
    if args.seed is not None:
        values["seed"] = args.seed
    if args.ablation is not None:
        values["ablation"] = args.ablation
    return values


def load_config(args: argparse.Namespace, include_population: bool = False) -> RunConfig:
    files = []
    pop_file = args.out / POPULATION_FILE
    if include_population and pop_file.exists():
        files.append(pop_file)
    for path in args.config:
        if not Path(path).exists():
            raise UsageError(f"config file not found: {path}")
        files.append(Path(path))
    return RunConfig.build(args.preset, files, _overrides(args))


def population_config(config: RunConfig) -> PopulationConfig:
    overrides: dict[str, object] = {
        "n_machines": int(config["synth.n_machines"]),
        "n_days": int(config["synth.n_days"]),
        "start_date": str(config["synth.start_date"]),
        "seed": int(config["seed"]),
    }
    # non-positive / negative sentinels keep the population's own default
    if float(config["synth.events_per_machine_per_day"]) > 0:
        overrides["events_per_machine_per_day"] = float(config["synth.events_per_machine_per_day"])
    if float(config["synth.behavioral_noise"]) >= 0:
        overrides["behavioral_noise"] = float(config["synth.behavioral_noise"])
    population = str(config["synth.population"])
    if population == "ad":
        return ad_population_config(**overrides)
    if population == "atm":
        return PopulationConfig(**overrides)
    raise ConfigError(f"synth.population must be 'atm' or 'ad', got {population!r}")


def cmd_synth(args: argparse.Namespace) -> int:
    config = load_config(args)
    pop = population_config(config)
    fleet = generate_population(pop)
    events = fleet.events
    scenario: dict[str, object] = {"population": str(config["synth.population"]), "seed": pop.seed}
    if args.inject_attack:
        events, targets = inject_attack(events, AttackSpec(seed=pop.seed), machine_ips=fleet.machine_ips)
        scenario["attack_targets"] = targets
    if args.inject_bruteforce:
        if args.inject_bruteforce not in fleet.machine_ips:
            raise UsageError(f"unknown machine {args.inject_bruteforce!r}; ids look like {min(fleet.machine_ips)}")
        events = inject_bruteforce(events, args.inject_bruteforce, fleet.servers,
                                   machine_ips=fleet.machine_ips, seed=pop.seed)
        scenario["bruteforce_target"] = args.inject_bruteforce
    original = {e.md5 for e in fleet.events}
    injected_md5s = sorted({e.md5 for e in events[len(fleet.events):]} - original)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_log(events, out / EVENTS_FILE)
    write_inventory(fleet.inventory, out / INVENTORY_FILE)
    truth = ground_truth(events, injected_md5s, md5s=injected_md5s, **scenario)
    (out / TRUTH_FILE).write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    population_keys = {
        "ingest.internal_cidrs": ["10.0.0.0/8"],
        "ingest.subset_cidrs": [pop.machine_cidr],
    }
    (out / POPULATION_FILE).write_text(format_config(population_keys), encoding="utf-8")
    print(f"wrote {len(events)} events for {pop.n_machines} machines over {pop.n_days} days to {out}")
    if truth["targets"]:
        print("injected targets: " + ", ".join(truth["targets"]))
    return 0


def _input_paths(config: RunConfig, out: Path) -> tuple[list[Path], Path | None]:
    events_setting = str(config["ingest.events_path"])
    if events_setting:
        event_paths = [Path(p.strip()) for p in events_setting.split(",") if p.strip()]
    else:
        event_paths = [out / EVENTS_FILE]
    missing = [str(p) for p in event_paths if not p.exists()]
    if missing:
        raise UsageError("event log not found: " + ", ".join(missing))
    inv_setting = str(config["ingest.inventory_path"])
    if inv_setting:
        inventory = Path(inv_setting)
        if not inventory.exists():
            raise UsageError(f"inventory not found: {inventory}")
    else:
        inventory = out / INVENTORY_FILE
        if not inventory.exists():
            inventory = None
    return event_paths, inventory


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args, include_population=True)
    event_paths, inventory_path = _input_paths(config, args.out)
    parsed = read_event_files(event_paths)
    if parsed.skipped:
        logger.warning("skipped %d malformed event lines", parsed.skipped)
    if not parsed.events:
        raise UsageError("event log contains no valid events")
    inventory = {}
    if inventory_path is not None:
        inventory = json.loads(inventory_path.read_text(encoding="utf-8"))
    result = run_pipeline(parsed.events, config, inventory, days=args.days)
    if not result.windows:
        raise UsageError(
            f"no window to score: need at least {config['min_history_days']} prior days of history"
        )
    inputs = list(event_paths) + ([inventory_path] if inventory_path else [])
    write_run(args.out, result, config, inputs)
    print(summarize(load_reports(args.out)))
    return 2 if result.any_anomalous else 0


def load_reports(run_dir: Path) -> dict[str, list[AnomalyReport]]:
    """Reports per window date, in rank order."""
    days = {}
    for path in sorted((run_dir / "reports").glob("*.jsonl")):
        lines = path.read_text(encoding="utf-8").splitlines()
        days[path.stem] = [AnomalyReport.from_record(json.loads(line)) for line in lines if line.strip()]
    return days


def daily_rows(days: dict[str, list[AnomalyReport]]) -> list[dict[str, object]]:
    rows = []
    for date, reports in days.items():
        alerts = sum(r.verdict is Verdict.ANOMALOUS for r in reports)
        top = reports[0] if reports else None
        rows.append({
            "date": date,
            "machines": len(reports),
            "anomalies": alerts,
            "anomaly_pct": 0.0 if not reports else round(100.0 * alerts / len(reports), 3),
            "summary": format_anomaly_share(alerts, len(reports)),
            "top_machine": top.machine_key if top else "",
            "top_final_score": round(top.final_anomaly_score, 6) if top else "",
        })
    return rows


def summarize(days: dict[str, list[AnomalyReport]]) -> str:
    lines = [f"{'date':<10}  {'machines':>8}  #Anomalies"]
    for row in daily_rows(days):
        lines.append(f"{row['date']:<10}  {row['machines']:>8}  {row['summary']}")
    alerts = [r for reports in days.values() for r in reports if r.verdict is Verdict.ANOMALOUS]
    lines.append("")
    lines.append(alert_table(alerts) if alerts else "no anomalous machines")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = args.run_dir or args.out
    days = load_reports(run_dir) if (run_dir / "reports").is_dir() else {}
    if not days:
        raise UsageError(f"no reports under {run_dir}; run 'gcnetomaly run --out {run_dir}' first")
    rows = daily_rows(days)
    with open(run_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(summarize(days))
    return 0


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"gcnetomaly {args.command}: {exc}", file=sys.stderr)
        return 1
