"""Self-difference scoring, thresholded verdicts and residual explanations."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

# Documented threshold presets per population.
THRESHOLD_PRESETS = {"atm": 0.6, "ad": 0.018}


class Verdict(str, enum.Enum):
    NORMAL = "Normal"
    ANOMALOUS = "Anomalous"


@dataclass(frozen=True)
class Explanation:
    name: str
    true_value: float
    reconstructed: float
    residual: float


@dataclass
class AnomalyReport:
    window: str
    machine_key: str
    ip: str
    RE: float
    components: dict[str, float]
    self_difference: float
    final_anomaly_score: float
    verdict: Verdict
    explanations: list[Explanation] = field(default_factory=list)
    rank: int = 0

    def to_record(self) -> dict:
        record = asdict(self)
        record["verdict"] = self.verdict.value
        return record

    @classmethod
    def from_record(cls, record: Mapping) -> "AnomalyReport":
        data = dict(record)
        data["verdict"] = Verdict(data["verdict"])
        data["explanations"] = [Explanation(**x) for x in data.get("explanations", [])]
        return cls(**data)


def self_difference(re_now: float, prior: Sequence[float], max_ratio: float = 100.0, span: int = 9) -> float:
    """``re_now`` over the mean of the last ``span`` prior reconstruction errors.

    Fewer priors use the mean of what exists; none gives 1. The ratio is
    capped at ``max_ratio`` (this also covers a zero prior mean).
    """
    if re_now < 0 or any(r < 0 for r in prior):
        raise ValueError("reconstruction errors must be non-negative")
    recent = list(prior)[-span:]
    if not recent:
        return 1.0
    base = sum(recent) / len(recent)
    if base == 0.0:
        return 1.0 if re_now == 0.0 else max_ratio
    return min(re_now / base, max_ratio)


def score_and_verdict(re: float, ratio: float, threshold: float) -> tuple[float, Verdict]:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    final = re * ratio
    return final, Verdict.ANOMALOUS if final > threshold else Verdict.NORMAL


def explain(
    cm: np.ndarray,
    cm_hat: np.ndarray,
    fm: np.ndarray,
    fm_hat: np.ndarray,
    node: int,
    node_keys: Sequence[str],
    feature_names: Sequence[str],
    threshold: float = 0.2,
) -> list[Explanation]:
    """Adjacency cells and feature cells of ``node`` whose |residual| exceeds ``threshold``.

    Adjacency cells are named ``peer:<key>``. Sorted by descending |residual|,
    then name.
    """
    out = []
    for values, recon, names in (
        (cm[node], cm_hat[node], [f"peer:{k}" for k in node_keys]),
        (fm[node], fm_hat[node], feature_names),
    ):
        residual = np.asarray(values, dtype=float) - np.asarray(recon, dtype=float)
        for j in np.flatnonzero(np.abs(residual) > threshold):
            out.append(Explanation(names[j], float(values[j]), float(recon[j]), float(residual[j])))
    out.sort(key=lambda e: (-abs(e.residual), e.name))
    return out


def rank_reports(reports: list[AnomalyReport]) -> list[AnomalyReport]:
    """Order by final score descending, ties by machine key; assigns 1-based ranks."""
    ordered = sorted(reports, key=lambda r: (-r.final_anomaly_score, r.machine_key))
    for k, r in enumerate(ordered, start=1):
        r.rank = k
    return ordered


class ScoreHistory:
    """Per-machine reconstruction errors of past windows, oldest first."""

    def __init__(self, retention: int = 30) -> None:
        if retention < 1:
            raise ValueError("retention must be at least 1")
        self.retention = retention
        self.records: dict[str, list[tuple[str, float]]] = {}

    def prior(self, machine_key: str) -> list[float]:
        return [re for _, re in self.records.get(machine_key, [])]

    def update(self, window_date: str, res: Mapping[str, float]) -> "ScoreHistory":
        for key in res:
            rows = self.records.get(key, [])
            if rows and rows[-1][0] >= window_date:
                if any(d == window_date for d, _ in rows):
                    raise ValueError(f"duplicate history record for {key} on {window_date}")
                raise ValueError(f"window {window_date} is not newer than {rows[-1][0]} for {key}")
        for key, re in res.items():
            rows = self.records.setdefault(key, [])
            rows.append((window_date, float(re)))
            del rows[:-self.retention]
        return self

    def __eq__(self, other) -> bool:
        return isinstance(other, ScoreHistory) and self.records == other.records

    def save(self, path: Path | str) -> None:
        lines = [
            json.dumps({"machine_key": k, "window_date": d, "RE": re}, separators=(",", ":"))
            for k in sorted(self.records)
            for d, re in self.records[k]
        ]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str, retention: int = 30) -> "ScoreHistory":
        history = cls(retention)
        path = Path(path)
        if not path.exists():
            return history
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        for row in sorted(rows, key=lambda r: (r["window_date"], r["machine_key"])):
            history.update(row["window_date"], {row["machine_key"]: row["RE"]})
        return history


def format_anomaly_share(count: int, total: int) -> str:
    """``'2 (0.065%)'`` style daily alert summary."""
    if total <= 0 or count == 0:
        return f"{count} (0%)"
    pct = round(100.0 * count / total, 3)
    return f"{count} ({pct:g}%)"


def alert_table(reports: Sequence[AnomalyReport], top_explanations: int = 5) -> str:
    """Analyst-facing table: machine, IP, RE, final score and top explanations."""
    header = f"{'window':<10}  {'machine':<24} {'ip':<15} {'RE':>10} {'final':>10}  explanations"
    lines = [header, "-" * len(header)]
    for r in reports:
        expl = ", ".join(f"{e.name} ({e.residual:+.2f})" for e in r.explanations[:top_explanations])
        lines.append(
            f"{r.window:<10}  {r.machine_key:<24} {r.ip:<15} {r.RE:>10.5f} {r.final_anomaly_score:>10.5f}  {expl}"
        )
    return "\n".join(lines)
