"""Scoring of detection output against labeled ground truth.

Two granularities are reported side by side:

* Window level: the test span is cut into sliding windows; a window counts
  as predicted-positive when at least one alert's window overlaps it in
  time, and as actual-positive when at least one labeled event falls inside
  it.  The four-way confusion matrix over all enumerated windows yields
  precision, recall, and F1.
* Event level: event tuples carried by the tracked attack sets are matched
  one-to-one against labeled tuples.  A match requires identical process,
  event type, and object plus timestamps within a fixed tolerance.  Matched
  labels are true positives, leftover predictions false positives, leftover
  labels false negatives.

Metrics with a zero denominator are reported as 0.0 together with an
explanatory flag instead of raising.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

from .scenario import GroundTruth

Tuple4 = tuple[str, str, str, int]

EVENT_TS_TOLERANCE_NS = 1_000_000_000


@dataclass(frozen=True)
class Metrics:
    """Confusion counts plus derived rates for one granularity."""

    tp: int
    fp: int
    fn: int
    tn: int | None = None
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    flags: tuple[str, ...] = ()

    def to_json_obj(self) -> dict:
        obj = {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": round(self.precision, 4),
            "recall": round(self.recall, 4),
            "f1": round(self.f1, 4),
            "flags": list(self.flags),
        }
        if self.tn is not None:
            obj["tn"] = self.tn
        return obj


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int | None = None) -> Metrics:
    """Derive precision/recall/F1 from raw confusion counts.

    Zero denominators yield a 0.0 metric and a matching flag; F1 is computed
    from the unrounded precision and recall.
    """
    for label, value in (("tp", tp), ("fp", fp), ("fn", fn)):
        if value < 0:
            raise ValueError(f"negative {label} count: {value}")
    if tn is not None and tn < 0:
        raise ValueError(f"negative tn count: {tn}")

    flags = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.append("precision_undefined")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.append("recall_undefined")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.append("f1_undefined")
    return Metrics(
        tp=tp, fp=fp, fn=fn, tn=tn,
        precision=precision, recall=recall, f1=f1,
        flags=tuple(flags),
    )


@dataclass(frozen=True)
class WindowReport:
    """Window-level confusion over the enumerated window universe."""

    window_count: int
    predicted: tuple[int, ...]
    actual: tuple[int, ...]
    metrics: Metrics

    def to_json_obj(self) -> dict:
        return {
            "window_count": self.window_count,
            "predicted_windows": list(self.predicted),
            "actual_windows": list(self.actual),
            **self.metrics.to_json_obj(),
        }


@dataclass(frozen=True)
class AttackRow:
    """Event-level counts attributed to one named attack."""

    name: str
    metrics: Metrics

    def to_json_obj(self) -> dict:
        return {"name": self.name, **self.metrics.to_json_obj()}


@dataclass(frozen=True)
class EvalReport:
    windows: WindowReport
    events: Metrics
    per_attack: tuple[AttackRow, ...] = ()
    flags: tuple[str, ...] = ()

    def to_json_obj(self) -> dict:
        return {
            "windows": self.windows.to_json_obj(),
            "events": self.events.to_json_obj(),
            "per_attack": [row.to_json_obj() for row in self.per_attack],
            "flags": list(self.flags),
        }

    def render(self) -> str:
        """Fixed-width human-readable table."""
        lines = [
            _render_row("window level", self.windows.metrics, with_tn=True),
            _render_row("event level", self.events),
        ]
        for row in self.per_attack:
            lines.append(_render_row(f"  {row.name}", row.metrics))
        if self.flags:
            lines.append("notes: " + ", ".join(self.flags))
        return "\n".join(lines)


def _render_row(label: str, m: Metrics, with_tn: bool = False) -> str:
    counts = f"TP {m.tp:>4}  FP {m.fp:>4}  FN {m.fn:>4}"
    if with_tn and m.tn is not None:
        counts += f"  TN {m.tn:>4}"
    rates = f"precision {m.precision:.2f}  recall {m.recall:.2f}  F1 {m.f1:.2f}"
    suffix = f"  [{', '.join(f.replace('_', ' ') for f in m.flags)}]" if m.flags else ""
    return f"{label:<24} {counts}  |  {rates}{suffix}"


def _window_of(alert: object) -> int:
    if isinstance(alert, int):
        return alert
    if isinstance(alert, Mapping):
        return int(alert["window"])
    return int(alert.window_index)  # type: ignore[attr-defined]


def _tuples_of(attack_set: object) -> Iterable[Tuple4]:
    if isinstance(attack_set, Mapping):
        raw = attack_set["tuples"]
    else:
        raw = getattr(attack_set, "tuples", attack_set)
    return [(p, e, o, int(t)) for p, e, o, t in raw]


def evaluate_windows(
    alert_windows: Iterable[int],
    truth: GroundTruth,
) -> WindowReport:
    """Score alert windows against labeled windows with overlap semantics.

    Window ``j`` is predicted-positive when some alert landed in a window
    ``i`` whose time range intersects ``j``'s, i.e. ``|i - j| * step <
    length``.  When the truth does not carry a total window count the
    universe is inferred from the largest index seen, which makes the
    true-negative count a lower bound.
    """
    length, step = truth.window_length_ns, truth.window_step_ns
    alert_list = sorted(set(alert_windows))
    actual = sorted(set(truth.window_indices))
    flags = []
    count = truth.window_count
    if count <= 0:
        count = max([w + 1 for w in alert_list + actual] or [0])
        if count:
            flags.append("window_universe_inferred")

    reach = 0
    while (reach + 1) * step < length:
        reach += 1
    predicted = set()
    for i in alert_list:
        for j in range(max(0, i - reach), min(count, i + reach + 1)):
            predicted.add(j)

    actual_set = {w for w in actual if 0 <= w < count}
    tp = len(predicted & actual_set)
    fp = len(predicted - actual_set)
    fn = len(actual_set - predicted)
    tn = count - len(predicted | actual_set)
    metrics = metrics_from_counts(tp, fp, fn, tn)
    if flags:
        metrics = Metrics(
            tp=metrics.tp, fp=metrics.fp, fn=metrics.fn, tn=metrics.tn,
            precision=metrics.precision, recall=metrics.recall, f1=metrics.f1,
            flags=metrics.flags + tuple(flags),
        )
    return WindowReport(
        window_count=count,
        predicted=tuple(sorted(predicted)),
        actual=tuple(sorted(actual_set)),
        metrics=metrics,
    )


def match_events(
    predicted: Iterable[Tuple4],
    labels: Sequence[Tuple4],
    tolerance_ns: int = EVENT_TS_TOLERANCE_NS,
) -> tuple[list[Tuple4], list[Tuple4], list[Tuple4]]:
    """One-to-one greedy matching of predicted tuples against labels.

    Both sides are walked in ascending timestamp order; a prediction takes
    the earliest unmatched label with the same (process, event, object) key
    whose timestamp lies within the tolerance.  Because predictions only
    move forward in time, a label that falls behind the tolerance horizon
    can never match later and is final.  Returns (matched labels,
    unmatched predictions, unmatched labels).
    """
    pool = sorted(set(predicted), key=lambda t: (t[3], t[0], t[1], t[2]))
    by_key: dict[tuple[str, str, str], list[int]] = {}
    for p, e, o, ts in labels:
        by_key.setdefault((p, e, o), []).append(ts)
    for ts_list in by_key.values():
        ts_list.sort()
    cursor = {key: 0 for key in by_key}

    matched: list[Tuple4] = []
    unmatched_pred: list[Tuple4] = []
    for tup in pool:
        key, ts = (tup[0], tup[1], tup[2]), tup[3]
        ts_list = by_key.get(key)
        if ts_list is None:
            unmatched_pred.append(tup)
            continue
        i = cursor[key]
        while i < len(ts_list) and ts_list[i] < ts - tolerance_ns:
            i += 1
        cursor[key] = i
        if i < len(ts_list) and ts_list[i] <= ts + tolerance_ns:
            matched.append((key[0], key[1], key[2], ts_list[i]))
            cursor[key] = i + 1
        else:
            unmatched_pred.append(tup)

    taken: dict[Tuple4, int] = {}
    for tup in matched:
        taken[tup] = taken.get(tup, 0) + 1
    unmatched_labels = []
    remaining = dict(taken)
    for tup in labels:
        if remaining.get(tup, 0) > 0:
            remaining[tup] -= 1
        else:
            unmatched_labels.append(tup)
    return matched, unmatched_pred, unmatched_labels


def _attribute_false_positives(
    unmatched_pred: Sequence[Tuple4],
    attacks: Sequence[tuple[str, Sequence[Tuple4]]],
    slack_ns: int,
) -> dict[str, int]:
    """Assign stray predictions to the nearest attack's padded time span.

    Predictions farther than the slack from every span land in the
    catch-all bucket keyed by the empty string.
    """
    spans = []
    for name, tuples in attacks:
        if tuples:
            stamps = [t[3] for t in tuples]
            spans.append((name, min(stamps), max(stamps)))
    counts: dict[str, int] = {}
    for tup in unmatched_pred:
        ts = tup[3]
        best_name, best_dist = "", slack_ns + 1
        for name, lo, hi in spans:
            dist = max(lo - ts, ts - hi, 0)
            if dist < best_dist:
                best_name, best_dist = name, dist
        counts[best_name] = counts.get(best_name, 0) + 1
    return counts


def evaluate_events(
    attack_sets: Iterable[object],
    truth: GroundTruth,
    tolerance_ns: int = EVENT_TS_TOLERANCE_NS,
) -> tuple[Metrics, tuple[AttackRow, ...]]:
    """Match tracked set tuples against labels; break out per-attack rows."""
    predicted: set[Tuple4] = set()
    for aset in attack_sets:
        predicted.update(_tuples_of(aset))
    matched, unmatched_pred, unmatched_labels = match_events(
        predicted, truth.tuples, tolerance_ns
    )
    overall = metrics_from_counts(len(matched), len(unmatched_pred), len(unmatched_labels))

    rows: list[AttackRow] = []
    if truth.attacks:
        matched_budget: dict[Tuple4, int] = {}
        for tup in matched:
            matched_budget[tup] = matched_budget.get(tup, 0) + 1
        fp_by_attack = _attribute_false_positives(
            unmatched_pred, truth.attacks, slack_ns=truth.window_length_ns
        )
        for name, tuples in truth.attacks:
            tp = fn = 0
            for tup in tuples:
                if matched_budget.get(tup, 0) > 0:
                    matched_budget[tup] -= 1
                    tp += 1
                else:
                    fn += 1
            rows.append(AttackRow(name, metrics_from_counts(tp, fp_by_attack.get(name, 0), fn)))
        stray = fp_by_attack.get("", 0)
        if stray:
            rows.append(AttackRow("(unattributed)", metrics_from_counts(0, stray, 0)))
    return overall, tuple(rows)


def evaluate(
    alerts: Iterable[object],
    attack_sets: Iterable[object],
    ground_truth: GroundTruth,
    *,
    tolerance_ns: int = EVENT_TS_TOLERANCE_NS,
) -> EvalReport:
    """Score a detection run: alerts at window granularity, sets at event granularity."""
    windows = evaluate_windows((_window_of(a) for a in alerts), ground_truth)
    events, per_attack = evaluate_events(attack_sets, ground_truth, tolerance_ns)
    flags = []
    if not ground_truth.tuples:
        flags.append("no_labeled_events")
    return EvalReport(
        windows=windows,
        events=events,
        per_attack=per_attack,
        flags=tuple(flags),
    )
