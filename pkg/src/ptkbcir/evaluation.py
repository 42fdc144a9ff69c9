"""Per-turn ranking metrics, aggregation, and paired significance testing."""

from __future__ import annotations

import json
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from scipy import stats

from .data import Qrels, Run, turn_sort_key
from .errors import ValidationError

DEFAULT_METRICS = ("mrr", "ndcg@3", "ndcg@5", "map")
METRIC_LABELS = {"mrr": "MRR", "map": "MAP"}
_NDCG_RE = re.compile(r"^ndcg@(\d+)$")


def mrr(ranking: Sequence[str], qrels_for_turn: Mapping[str, int], threshold: int = 1) -> float:
    for rank, doc_id in enumerate(ranking, 1):
        if qrels_for_turn.get(doc_id, 0) >= threshold:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranking: Sequence[str], qrels_for_turn: Mapping[str, int], k: int) -> float:
    """Linear gain (gain = grade), log2(rank + 1) discount."""
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = sum(qrels_for_turn.get(d, 0) / math.log2(i + 1) for i, d in enumerate(ranking[:k], 1))
    ideal = sorted((g for g in qrels_for_turn.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 1) for i, g in enumerate(ideal, 1))
    return dcg / idcg if idcg > 0 else 0.0


def relevant_count(qrels_for_turn: Mapping[str, int], threshold: int = 1) -> int:
    return sum(1 for g in qrels_for_turn.values() if g >= threshold)


def average_precision(ranking: Sequence[str], qrels_for_turn: Mapping[str, int], threshold: int = 1) -> float:
    """Precision summed at each relevant rank, over all relevant docs in the qrels.

    Returns 0.0 when the turn has no relevant documents; ``evaluate_run`` keeps
    such turns out of the MAP mean.
    """
    total = relevant_count(qrels_for_turn, threshold)
    if total == 0:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for rank, doc_id in enumerate(ranking, 1):
        if qrels_for_turn.get(doc_id, 0) >= threshold:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / total


def metric_value(name: str, ranking: Sequence[str], qrels_for_turn: Mapping[str, int], threshold: int = 1) -> float:
    if name == "mrr":
        return mrr(ranking, qrels_for_turn, threshold)
    if name == "map":
        return average_precision(ranking, qrels_for_turn, threshold)
    m = _NDCG_RE.match(name)
    if m:
        return ndcg_at_k(ranking, qrels_for_turn, int(m.group(1)))
    raise ValueError(f"unknown metric {name!r}")


def metric_label(name: str) -> str:
    m = _NDCG_RE.match(name)
    return f"N@{m.group(1)}" if m else METRIC_LABELS.get(name, name)


@dataclass(frozen=True)
class MetricConfig:
    metrics: tuple[str, ...] = DEFAULT_METRICS
    threshold: int = 1

    def __post_init__(self):
        for m in self.metrics:
            metric_value(m, [], {})
        if self.threshold < 1:
            raise ValueError("relevance threshold must be >= 1")


@dataclass(frozen=True)
class MetricReport:
    """Per-turn values in [0, 1]; aggregates are means scaled by 100."""

    per_turn: Mapping[str, Mapping[str, float]]
    aggregates: Mapping[str, float]
    evaluated_turn_count: int
    metrics: tuple[str, ...] = DEFAULT_METRICS

    def turn_ids(self) -> list[str]:
        return sorted(self.per_turn, key=turn_sort_key)

    def values(self, metric: str, turn_ids: Iterable[str]) -> list[float]:
        return [self.per_turn[t][metric] for t in turn_ids]

    def rendered(self, metric: str) -> str:
        return f"{self.aggregates[metric]:.2f}"


def evaluate_run(
    run: Run,
    qrels: Qrels,
    config: MetricConfig = MetricConfig(),
    turn_filter: Iterable[str] | None = None,
) -> MetricReport:
    """Score every assessed turn (optionally intersected with ``turn_filter``).

    Assessed turns missing from the run score 0. A turn without any document
    at or above the threshold is left out of MAP only.
    """
    turns = qrels.turn_ids()
    if turn_filter is not None:
        wanted = set(turn_filter)
        turns = [t for t in turns if t in wanted]
    if not turns:
        raise ValidationError("no assessed turns to evaluate")

    per_turn: dict[str, dict[str, float]] = {}
    for turn_id in turns:
        judged = qrels.for_turn(turn_id)
        ranking = run.ranked_doc_ids(turn_id)
        values = {}
        for m in config.metrics:
            if m == "map" and relevant_count(judged, config.threshold) == 0:
                continue
            values[m] = metric_value(m, ranking, judged, config.threshold)
        per_turn[turn_id] = values

    aggregates = {}
    for m in config.metrics:
        vals = [v[m] for v in per_turn.values() if m in v]
        aggregates[m] = 100.0 * sum(vals) / len(vals) if vals else 0.0
    return MetricReport(per_turn, aggregates, len(turns), tuple(config.metrics))


# --------------------------------------------------------------------------
# significance


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    degrees_of_freedom: int
    significant_at_05: bool
    # differences had zero variance with a nonzero mean
    degenerate: bool = False


def paired_t_test(per_turn_a: Sequence[float], per_turn_b: Sequence[float]) -> TTestResult:
    """Two-tailed paired t-test on ``a - b``."""
    if len(per_turn_a) != len(per_turn_b):
        raise ValidationError(f"paired samples differ in length: {len(per_turn_a)} vs {len(per_turn_b)}")
    n = len(per_turn_a)
    if n < 2:
        raise ValidationError("paired t-test needs at least 2 pairs")
    diffs = [a - b for a, b in zip(per_turn_a, per_turn_b)]
    df = n - 1
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / df
    if all(d == 0 for d in diffs):
        return TTestResult(0.0, 1.0, df, False)
    if var == 0 or math.sqrt(var) <= 1e-12 * abs(mean):
        t = math.copysign(math.inf, mean)
        return TTestResult(t, 0.0, df, True, degenerate=True)
    t = mean / math.sqrt(var / n)
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return TTestResult(t, p, df, p < 0.05)


# --------------------------------------------------------------------------
# comparison tables


@dataclass
class ComparisonRow:
    method: str
    values: dict[str, float]
    best: set[str] = field(default_factory=set)
    significant: set[str] = field(default_factory=set)
    p_vs_baseline: dict[str, float] = field(default_factory=dict)


@dataclass
class ComparisonTable:
    metrics: tuple[str, ...]
    rows: list[ComparisonRow]
    baseline: str | None = None
    turn_count: int = 0

    def to_dict(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "baseline": self.baseline,
            "turn_count": self.turn_count,
            "t_test": "two-tailed paired t-test over per-turn values, p < 0.05",
            "rows": [
                {
                    "method": r.method,
                    "values": {m: round(r.values[m], 2) for m in self.metrics},
                    "best": sorted(r.best),
                    "significant": sorted(r.significant),
                    "p_vs_baseline": {m: r.p_vs_baseline[m] for m in sorted(r.p_vs_baseline)},
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        """Bold marks the best value per metric, a dagger a significant win over every other row."""
        header = "| Method | " + " | ".join(metric_label(m) for m in self.metrics) + " |"
        lines = [header, "|" + "---|" * (len(self.metrics) + 1)]
        for r in self.rows:
            cells = []
            for m in self.metrics:
                cell = f"{r.values[m]:.2f}"
                if m in r.best:
                    cell = f"**{cell}**"
                if m in r.significant:
                    cell += "†"
                cells.append(cell)
            lines.append(f"| {r.method} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def compare_methods(
    reports: Mapping[str, MetricReport],
    baseline: str | None = None,
    metrics: Sequence[str] | None = None,
) -> ComparisonTable:
    """Side-by-side comparison of methods evaluated on the same turns.

    Per metric the highest aggregate is marked best (first method wins ties).
    The best is marked significant when a paired t-test shows it higher than
    each remaining method at p < 0.05. ``baseline``, when given, also gets a
    p-value against every other method.
    """
    names = list(reports)
    if not names:
        raise ValidationError("no reports to compare")
    metrics = tuple(metrics or reports[names[0]].metrics)
    ref_turns = set(reports[names[0]].per_turn)
    for name in names[1:]:
        other = set(reports[name].per_turn)
        if other != ref_turns:
            diff = sorted(ref_turns ^ other, key=turn_sort_key)
            raise ValidationError(f"report {name!r} covers different turns: {', '.join(diff)}")
    if baseline is not None and baseline not in reports:
        raise ValidationError(f"baseline {baseline!r} is not among the reports")

    rows = {n: ComparisonRow(n, {m: reports[n].aggregates[m] for m in metrics}) for n in names}
    for m in metrics:
        paired = sorted(
            (t for t in ref_turns if all(m in reports[n].per_turn[t] for n in names)), key=turn_sort_key
        )
        best = max(names, key=lambda n: (rows[n].values[m], -names.index(n)))
        rows[best].best.add(m)
        if len(names) > 1 and len(paired) >= 2:
            best_vals = reports[best].values(m, paired)
            wins = []
            for n in names:
                if n == best:
                    continue
                res = paired_t_test(best_vals, reports[n].values(m, paired))
                wins.append(res.significant_at_05 and res.t_statistic > 0)
            if all(wins):
                rows[best].significant.add(m)
        if baseline is not None and len(paired) >= 2:
            base_vals = reports[baseline].values(m, paired)
            for n in names:
                if n != baseline:
                    rows[n].p_vs_baseline[m] = paired_t_test(reports[n].values(m, paired), base_vals).p_value
    return ComparisonTable(metrics, [rows[n] for n in names], baseline, len(ref_turns))


# --------------------------------------------------------------------------
# report files


def write_report(report: MetricReport, meta: Mapping[str, object] | None = None) -> bytes:
    """trec_eval-like TSV: per-turn rows, then ``all`` rows with aggregates x100."""
    lines = [f"# {k}: {v}\n" for k, v in (meta or {}).items()]
    lines.append("# t-test pairing: per turn\n")
    for turn_id in report.turn_ids():
        for m in report.metrics:
            if m in report.per_turn[turn_id]:
                lines.append(f"{turn_id}\t{m}\t{report.per_turn[turn_id][m]:.6f}\n")
    lines.append(f"all\tevaluated_turns\t{report.evaluated_turn_count}\n")
    for m in report.metrics:
        lines.append(f"all\t{m}\t{report.rendered(m)}\n")
    return "".join(lines).encode("utf-8")


def parse_report(document: bytes | str) -> MetricReport:
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    per_turn: dict[str, dict[str, float]] = {}
    aggregates: dict[str, float] = {}
    metrics: list[str] = []
    count = 0
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        turn_id, metric, value = line.split("\t")
        if turn_id == "all":
            if metric == "evaluated_turns":
                count = int(value)
            else:
                aggregates[metric] = float(value)
                metrics.append(metric)
        else:
            per_turn.setdefault(turn_id, {})[metric] = float(value)
    return MetricReport(per_turn, aggregates, count, tuple(metrics))
