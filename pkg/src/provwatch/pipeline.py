"""Per-window orchestration of the full detection flow.

Each window runs: slice, dedup, deviation flagging, lineage filtering,
graph build, infection-point tagging, pruning, community detection,
community analysis, response, store integration with reinforcement,
decay, and rolling-graph upkeep.  Everything is deterministic for a
fixed seed and the rule backend, so reruns produce identical alert
streams and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import PipelineConfig
from .correlator import AttackEventSet, GlobalAttackStore, RollingGraph
from .deviation import LofModel, extract_lineage, fit_baseline, flag_window
from .ingest import LogEvent, dedup, sort_events, window_slice, windows_for_events
from .provgraph import (
    CommunityGroup,
    ProvenanceGraph,
    ReducedGraph,
    build_graph,
    detect_communities,
    find_infection_points,
    propagate_tags,
    prune,
)
from .reasoner import (
    Alert,
    AnalysisFailed,
    ReasonerBackend,
    RemoteBackend,
    StubBackend,
    alert_from_reanalysis,
    analyze_community,
    assemble_response,
    reanalyze_set,
    trace,
)


@dataclass
class WindowStats:
    """Everything measurable about one processed window."""

    index: int
    start_ns: int
    raw_events: int = 0
    deduped_events: int = 0
    flagged: int = 0
    graph_nodes: int = 0
    graph_edges: int = 0
    infection_points: int = 0
    reduced_nodes: int = 0
    reduced_edges: int = 0
    communities: int = 0
    detections: list[dict] = field(default_factory=list)
    reinforcements: list[dict] = field(default_factory=list)
    decayed: list[dict] = field(default_factory=list)
    analysis_failures: int = 0
    alerts: int = 0
    occupancy: int = 0
    reduced_tuples: set = field(default_factory=set)

    def to_json_obj(self) -> dict:
        return {
            "index": self.index,
            "start_ns": self.start_ns,
            "raw_events": self.raw_events,
            "deduped_events": self.deduped_events,
            "flagged": self.flagged,
            "graph_nodes": self.graph_nodes,
            "graph_edges": self.graph_edges,
            "infection_points": self.infection_points,
            "reduced_nodes": self.reduced_nodes,
            "reduced_edges": self.reduced_edges,
            "communities": self.communities,
            "detections": self.detections,
            "reinforcements": self.reinforcements,
            "decayed": self.decayed,
            "analysis_failures": self.analysis_failures,
            "alerts": self.alerts,
            "occupancy": self.occupancy,
            "reduced_tuples": sorted(list(t) for t in self.reduced_tuples),
        }


@dataclass
class RunResult:
    windows: list[WindowStats]
    alerts: list[Alert]
    store: GlobalAttackStore
    rolling: RollingGraph

    def reduced_tuple_union(self) -> set:
        out: set = set()
        for w in self.windows:
            out |= w.reduced_tuples
        return out


class PipelineError(RuntimeError):
    """Operational failure, annotated with the window being processed."""


def make_backend(config: PipelineConfig) -> ReasonerBackend:
    if config.backend == "stub":
        return StubBackend.from_file(config.rules_path or None)
    if config.backend == "remote":
        return RemoteBackend(
            config.endpoint,
            config.model_name,
            retries=config.backend_retries,
            timeout=config.backend_timeout_s,
        )
    raise PipelineError(f"unknown backend {config.backend!r}")


def train_baseline(config: PipelineConfig, events: list[LogEvent]) -> LofModel:
    return fit_baseline(
        events, k=config.lof_k, contamination=config.contamination
    )


def community_logs(
    reduced: ReducedGraph, community: CommunityGroup
) -> list[LogEvent]:
    """Reduced-graph events touching the community, oldest first.

    Edges crossing the community boundary are included so a chain split
    across two communities still shows its connecting events to both.
    """
    nodes = set(community.nodes)
    seen = set()
    logs = []
    for u, v, data in reduced.pg.g.edges(data=True):
        if u in nodes or v in nodes:
            ev = data["event"]
            if ev.tuple4() not in seen:
                seen.add(ev.tuple4())
                logs.append(ev)
    return sorted(logs, key=lambda ev: (ev.ts, ev.tuple4()))


def _is_duplicate(cand: AttackEventSet, store: GlobalAttackStore) -> bool:
    """Re-detections of evidence an active set already holds, at no
    better a score, add nothing; the sliding window overlap produces
    them constantly."""
    for aset in store.active_sets():
        if cand.score <= aset.score and cand.tuples <= aset.tuples:
            return True
    return False


def run_detection(
    config: PipelineConfig,
    model: LofModel,
    events: list[LogEvent],
    backend: ReasonerBackend | None = None,
    store: GlobalAttackStore | None = None,
) -> RunResult:
    """Stream the event list through the full pipeline window by window."""
    if backend is None:
        backend = make_backend(config)
    if store is None:
        store = GlobalAttackStore(
            primary_band=config.primary_band,
            secondary_band=config.secondary_band,
            decay_rate=config.decay_rate,
            reanalysis_cadence=config.reanalysis_cadence,
            merge_on_objects=config.merge_on_objects,
            complete_band=config.complete_band,
        )
    rolling = RollingGraph(
        untagged_horizon=config.untagged_horizon_windows,
        tagged_retention=config.tagged_retention_windows,
        node_cap=config.node_cap,
    )
    events = sort_events(events)
    windows = windows_for_events(
        events, config.window_length_ns, config.window_step_ns
    )
    alerts: list[Alert] = []
    all_stats: list[WindowStats] = []

    def rescore(aset: AttackEventSet) -> float:
        try:
            return backend.analyze_chain(aset.sorted_events()).score
        except AnalysisFailed:
            return aset.score

    for window in windows:
        stats = WindowStats(index=window.index, start_ns=window.start)
        try:
            sliced = window_slice(events, window)
            stats.raw_events = len(sliced)
            deduped = dedup(sliced)
            stats.deduped_events = len(deduped)

            flags = flag_window(model, deduped)
            stats.flagged = len(flags)
            filtered = extract_lineage(flags, deduped)

            pg = build_graph(
                filtered.events, unknown_event_policy=config.unknown_event_policy
            )
            stats.graph_nodes = pg.node_count
            stats.graph_edges = pg.edge_count
            infection = find_infection_points(pg, config.internal_networks)
            stats.infection_points = len(infection)
            tags = propagate_tags(pg, infection, causal=config.causal_relay)
            reduced = prune(pg, tags)
            stats.reduced_nodes = reduced.node_count
            stats.reduced_edges = reduced.edge_count
            stats.reduced_tuples = {
                ev.tuple4() for ev in reduced.events()
            }

            groups = detect_communities(reduced, seed=config.seed) if reduced else []
            stats.communities = len(groups)

            for group in groups:
                logs = community_logs(reduced, group)
                procs = group.process_nodes(reduced.pg)
                try:
                    # the chain follows the attack across community
                    # boundaries: closure of the suspects in the reduced graph
                    result = analyze_community(
                        group.community_id,
                        logs,
                        procs,
                        backend,
                        chain_source=lambda suspects: trace(reduced, suspects)[1],
                    )
                except AnalysisFailed:
                    stats.analysis_failures += 1
                    continue
                if result is None or result.score < config.secondary_band:
                    continue
                response = assemble_response(
                    result, reduced, window.index, config.alert_threshold
                )
                entry = {
                    "community": group.community_id,
                    "score": result.score,
                    "tagged": sorted(result.tagged),
                    "suppressed": False,
                }
                if _is_duplicate(response.attack_set, store):
                    entry["suppressed"] = True
                    stats.detections.append(entry)
                    continue
                stats.detections.append(entry)
                if response.alert is not None:
                    alerts.append(response.alert)
                    stats.alerts += 1
                touched = store.integrate([response.attack_set], window.index)
                for aset in touched:
                    try:
                        verdict = reanalyze_set(aset, backend)
                    except AnalysisFailed:
                        stats.analysis_failures += 1
                        continue
                    old = aset.score
                    moved = store.apply_reinforcement(
                        aset, verdict.score, window.index
                    )
                    stats.reinforcements.append(
                        {
                            "set_id": aset.set_id,
                            "from": old,
                            "to": aset.score,
                            "moved": moved,
                        }
                    )
                    if moved and verdict.score >= config.alert_threshold:
                        alert = alert_from_reanalysis(
                            aset, verdict, window.index
                        )
                        alerts.append(alert)
                        stats.alerts += 1

            flagged_by_pid: dict[str, set] = {}
            for flag in flags:
                flagged_by_pid.setdefault(flag.event.process_id, set()).add(
                    flag.event.tuple4()
                )
            activity: dict[str, bool] = {}
            for aset in store.active_sets():
                if aset.last_update_window == window.index:
                    continue
                fresh = False
                for pid in aset.process_ids():
                    if flagged_by_pid.get(pid, set()) - aset.tuples:
                        fresh = True
                        break
                activity[aset.set_id] = fresh
            for report in store.apply_decay(window.index, activity, rescore):
                if not report.new_activity:
                    aset = store.sets[report.set_id]
                    stats.decayed.append(
                        {
                            "set_id": aset.set_id,
                            "score": aset.score,
                            "queue": aset.queue,
                        }
                    )

            rolling.absorb(window.index, pg, tags)
            stats.occupancy = rolling.prune(window.index, store)
        except Exception as exc:
            if isinstance(exc, PipelineError):
                raise
            raise PipelineError(
                f"window {window.index} (start {window.start}): {exc}"
            ) from exc
        all_stats.append(stats)

    return RunResult(windows=all_stats, alerts=alerts, store=store, rolling=rolling)
