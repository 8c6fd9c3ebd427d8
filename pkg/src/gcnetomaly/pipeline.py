"""End-to-end run: per window build graph and features, train, reconstruct, score.

Each scored window trains a fresh model and tests it on the same data; only
the per-machine reconstruction-error history carries across windows.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, format_config
from .features import FeatureMatrix, extract_features, save_features, window_usage
from .graph import CommGraph, build_adjacency, partition_nodes, save_graph
from .ingest import (
    SECONDS_PER_DAY,
    NetConnEvent,
    WindowSpec,
    filter_subset,
    label_machine,
    parse_networks,
    resolve_machine_ips,
    subset_predicate,
    window_events,
    windows_covering,
)
from .model import LOSS_COMPONENTS, reconstruct, train, write_curve
from .scoring import (
    AnomalyReport,
    ScoreHistory,
    Verdict,
    explain,
    rank_reports,
    score_and_verdict,
    self_difference,
)

logger = logging.getLogger(__name__)


@dataclass
class GroupResult:
    group: int
    graph: CommGraph
    features: FeatureMatrix
    curve: list[dict[str, float]]
    monitored: list[int]


@dataclass
class WindowResult:
    index: int
    window: WindowSpec
    reports: list[AnomalyReport]
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def anomalies(self) -> list[AnomalyReport]:
        return [r for r in self.reports if r.verdict is Verdict.ANOMALOUS]


@dataclass
class RunResult:
    windows: list[WindowResult]
    history: ScoreHistory

    @property
    def any_anomalous(self) -> bool:
        return any(w.anomalies for w in self.windows)


def derive_seed(master: int, *path: int) -> int:
    """Independent 32-bit seed for a (window, group, purpose) path."""
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


def select_windows(windows: Sequence[WindowSpec], min_history: int, days: str | None = None) -> list[int]:
    """Indices of windows to score.

    ``days`` is ``"i"``/``"i-j"`` (window indices) or ``"YYYY-MM-DD[:YYYY-MM-DD]"``;
    by default every window with at least ``min_history`` prior windows.
    """
    if days is None:
        return [k for k in range(len(windows)) if k >= min_history]
    days = days.strip()
    dates = [w.date for w in windows]
    if "-" in days and len(days) >= 10 and days[4] == "-":
        lo, _, hi = days.partition(":")
        hi = hi or lo
        return [k for k, d in enumerate(dates) if lo <= d <= hi]
    lo, _, hi = days.partition("-")
    lo_i, hi_i = int(lo), int(hi or lo)
    return [k for k in range(len(windows)) if lo_i <= k <= hi_i]


def _score_group(
    events: Sequence[NetConnEvent],
    key_of_ip: Mapping[str, str],
    in_subset,
    prior_usage,
    config: RunConfig,
    inventory: Mapping[str, str],
    window_index: int,
    group: int,
):
    internal = parse_networks(config["ingest.internal_cidrs"])
    graph = build_adjacency(events, key_of_ip)
    labels = [label_machine(ip, internal, inventory) for ip in graph.ips]
    master = int(config["seed"])
    fm, _ = extract_features(
        events, graph, labels, prior_usage, config.feature_config(),
        seed=derive_seed(master, window_index, group, 1),
    )
    model_config = config.model_config(seed=derive_seed(master, window_index, group, 2))
    cm = graph.normalized()
    params, curve = train(cm, fm.values, fm.blocks, model_config)
    cm_hat, fm_hat, breakdown = reconstruct(params, cm, fm.values, fm.blocks, model_config)
    monitored = [i for i, ip in enumerate(graph.ips) if in_subset(ip)]
    fm_used = fm.values if model_config.use_embedding_block else fm.values * _embedding_mask(fm)
    rows = {}
    for i in monitored:
        rows[i] = dict(
            RE=float(breakdown.RE[i]),
            components={c: float(getattr(breakdown, c)[i]) for c in LOSS_COMPONENTS},
            explanations=explain(cm, cm_hat, fm_used, fm_hat, i, graph.keys, fm.names,
                                 float(config["scoring.explain_threshold"])),
        )
    return GroupResult(group, graph, fm, curve, monitored), rows


def _embedding_mask(fm: FeatureMatrix) -> np.ndarray:
    mask = np.ones(fm.values.shape[1])
    mask[fm.blocks["embedding"]] = 0.0
    return mask


def run_pipeline(
    events: Sequence[NetConnEvent],
    config: RunConfig,
    inventory: Mapping[str, str] | None = None,
    days: str | None = None,
    history: ScoreHistory | None = None,
) -> RunResult:
    inventory = inventory or {}
    ip_owner = resolve_machine_ips(events)
    in_subset = subset_predicate(config["ingest.subset_cidrs"], config["ingest.subset_ids"], ip_owner)
    filtered = filter_subset(events, in_subset)
    width = int(config["ingest.window_days"]) * SECONDS_PER_DAY
    windows = windows_covering(filtered, width)
    by_window: list[list[NetConnEvent]] = [[] for _ in windows]
    if windows:
        first = windows[0].start
        for e in filtered:
            by_window[(e.timestamp - first) // width].append(e)
    usage = [window_usage(w) for w in by_window]
    history = history or ScoreHistory(int(config["scoring.retention"]))
    k = int(config["partitions"])
    results = []
    for index in select_windows(windows, int(config["min_history_days"]), days):
        window = windows[index]
        w_events = by_window[index]
        logger.info("window %s: %d events", window.date, len(w_events))
        monitored_ips = sorted({ip for e in w_events for ip in (e.src_ip, e.dst_ip) if in_subset(ip)})
        if k > 1:
            groups = partition_nodes(monitored_ips, k, derive_seed(int(config["seed"]), index, 0, 0))
        else:
            groups = [monitored_ips]
        prior = usage[:index]
        group_results, rows, ips = [], {}, {}
        for g, members in enumerate(groups):
            member_set = set(members)
            g_events = w_events if k == 1 else filter_subset(w_events, member_set.__contains__)
            g_in_subset = in_subset if k == 1 else member_set.__contains__
            result, g_rows = _score_group(g_events, ip_owner, g_in_subset, prior, config, inventory, index, g)
            group_results.append(result)
            for i, row in g_rows.items():
                key = result.graph.keys[i]
                rows[key] = row
                ips[key] = result.graph.ips[i]
        reports = []
        threshold = float(config["scoring.threshold"])
        for key in sorted(rows):
            row = rows[key]
            ratio = self_difference(row["RE"], history.prior(key), float(config["scoring.max_ratio"]),
                                    int(config["scoring.history_windows"]))
            final, verdict = score_and_verdict(row["RE"], ratio, threshold)
            reports.append(AnomalyReport(window.date, key, ips[key], row["RE"], row["components"], ratio,
                                         final, verdict, row["explanations"]))
        history.update(window.date, {key: rows[key]["RE"] for key in rows})
        results.append(WindowResult(index, window, rank_reports(reports), group_results))
    return RunResult(results, history)


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run(run_dir: Path | str, result: RunResult, config: RunConfig, inputs: Sequence[Path] = (),
              save_artifacts: bool = True) -> None:
    """Reports (one JSONL per window), RE history, training curves, manifest."""
    run_dir = Path(run_dir)
    (run_dir / "reports").mkdir(parents=True, exist_ok=True)
    for w in result.windows:
        lines = [json.dumps(r.to_record(), sort_keys=True) for r in w.reports]
        (run_dir / "reports" / f"{w.window.date}.jsonl").write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8")
        if save_artifacts:
            for g in w.groups:
                stem = f"{w.window.date}-g{g.group}"
                art = run_dir / "artifacts"
                save_graph(g.graph, art, stem)
                save_features(g.features, art, stem)
                write_curve(g.curve, art / f"{stem}-training.csv")
    result.history.save(run_dir / "history.jsonl")
    manifest = {
        "code_version": __version__,
        "config": format_config(config.values).splitlines(),
        "master_seed": int(config["seed"]),
        "ablation": config["ablation"],
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "windows": [w.window.date for w in result.windows],
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
