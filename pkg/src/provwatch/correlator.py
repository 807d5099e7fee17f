"""Cross-window correlation of attack evidence.

Per-window detections arrive as event sets; this module merges sets
that share processes, decays the confidence of sets that go quiet,
promotes them again when new stages land, and keeps the rolling
provenance graph inside its node budget.  Event tuples stored in a set
are never deleted by graph pruning, so evidence survives eviction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import networkx as nx

from .ingest import LogEvent
from .provgraph import ProvenanceGraph, TagMap

CHECKPOINT_FORMAT_VERSION = 1

QUEUE_PRIMARY = "primary"
QUEUE_SECONDARY = "secondary"
QUEUE_RETIRED = "retired"

EventTuple = tuple[str, str, str, int]


@dataclass
class AttackEventSet:
    """Evidence for one tracked attack hypothesis.

    ``tuples`` is the canonical (process, event type, object, timestamp)
    form; ``events`` keeps the full records behind them so re-analysis
    can rebuild a chain with names and object data intact.
    """

    set_id: str
    tuples: set[EventTuple]
    events: list[LogEvent]
    score: float
    creation_window: int
    last_update_window: int
    queue: str = QUEUE_PRIMARY
    benign_windows: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)

    def process_ids(self) -> frozenset[str]:
        return frozenset(t[0] for t in self.tuples)

    def node_ids(self) -> frozenset[str]:
        return frozenset(t[0] for t in self.tuples) | frozenset(
            t[2] for t in self.tuples
        )

    def sorted_events(self) -> list[LogEvent]:
        return sorted(self.events, key=lambda ev: (ev.ts, ev.tuple4()))

    def record(self, window: int) -> None:
        if self.history and self.history[-1][0] == window:
            self.history[-1] = (window, self.score)
        else:
            self.history.append((window, self.score))

    def to_json_obj(self) -> dict:
        return {
            "set_id": self.set_id,
            "score": self.score,
            "queue": self.queue,
            "creation_window": self.creation_window,
            "last_update_window": self.last_update_window,
            "benign_windows": self.benign_windows,
            "history": [[w, s] for w, s in self.history],
            "tuples": sorted([list(t) for t in self.tuples]),
            "events": [
                {
                    "pid": ev.process_id,
                    "pname": ev.process_name,
                    "event": ev.event_type,
                    "oid": ev.object_id,
                    "odata": ev.object_data,
                    "ts": ev.ts,
                }
                for ev in self.sorted_events()
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AttackEventSet":
        events = [
            LogEvent(
                process_id=e["pid"],
                process_name=e["pname"],
                event_type=e["event"],
                object_id=e["oid"],
                object_data=e["odata"],
                ts=e["ts"],
            )
            for e in obj["events"]
        ]
        return cls(
            set_id=obj["set_id"],
            tuples={tuple(t) for t in obj["tuples"]},
            events=events,
            score=float(obj["score"]),
            creation_window=int(obj["creation_window"]),
            last_update_window=int(obj["last_update_window"]),
            queue=obj["queue"],
            benign_windows=int(obj["benign_windows"]),
            history=[(int(w), float(s)) for w, s in obj["history"]],
        )


@dataclass(frozen=True)
class SetActivity:
    """Per-set observation for one window: did any member process show
    flagged activity beyond what the set already contains."""

    set_id: str
    new_activity: bool


class GlobalAttackStore:
    """All tracked attack sets across the run, by queue.

    Queue membership follows the score bands: primary at or above the
    primary band, secondary between the bands, retired below.  Retired
    sets keep their identity for reporting but never merge with new
    evidence; a returning process starts a fresh set.
    """

    def __init__(
        self,
        primary_band: float = 0.8,
        secondary_band: float = 0.7,
        decay_rate: float = 0.025,
        reanalysis_cadence: int = 2,
        merge_on_objects: bool = False,
        complete_band: float = 0.9,
    ) -> None:
        self.primary_band = primary_band
        self.secondary_band = secondary_band
        self.decay_rate = decay_rate
        self.reanalysis_cadence = reanalysis_cadence
        self.merge_on_objects = merge_on_objects
        self.complete_band = complete_band
        self.sets: dict[str, AttackEventSet] = {}
        self._next_id = 1

    # -- queue mechanics -----------------------------------------------

    def queue_for(self, score: float) -> str:
        if score >= self.primary_band:
            return QUEUE_PRIMARY
        if score >= self.secondary_band:
            return QUEUE_SECONDARY
        return QUEUE_RETIRED

    def active_sets(self) -> list[AttackEventSet]:
        """Primary and secondary sets, best score first, oldest first on ties."""
        live = [s for s in self.sets.values() if s.queue != QUEUE_RETIRED]
        return sorted(live, key=lambda s: (-s.score, s.creation_window, s.set_id))

    def queue_members(self, queue: str) -> list[AttackEventSet]:
        return [s for s in self.active_sets() if s.queue == queue] if queue != QUEUE_RETIRED else sorted(
            (s for s in self.sets.values() if s.queue == QUEUE_RETIRED),
            key=lambda s: (s.creation_window, s.set_id),
        )

    def _requeue(self, aset: AttackEventSet) -> None:
        aset.queue = self.queue_for(aset.score)

    # -- admission and merging -----------------------------------------

    def _new_id(self) -> str:
        sid = f"set-{self._next_id:04d}"
        self._next_id += 1
        return sid

    def _merge_key(self, aset: AttackEventSet) -> frozenset[str]:
        if self.merge_on_objects:
            return aset.node_ids()
        return aset.process_ids()

    def integrate(
        self, candidates: Sequence[AttackEventSet], window: int
    ) -> list[AttackEventSet]:
        """Fold new detections into the store.

        Each candidate joins every active set it shares a process with;
        overlap is transitive, so three pairwise-linked sets collapse to
        one.  The oldest participant keeps its identity.  Returns the
        sets that actually absorbed something and need re-analysis.
        """
        touched: list[AttackEventSet] = []
        for cand in candidates:
            key = self._merge_key(cand)
            partners = [
                s for s in self.active_sets() if key & self._merge_key(s)
            ]
            if not partners:
                cand.set_id = self._new_id()
                cand.queue = self.queue_for(cand.score)
                cand.record(window)
                self.sets[cand.set_id] = cand
                continue
            partners.sort(key=lambda s: (s.creation_window, s.set_id))
            home = partners[0]
            for other in partners[1:]:
                self._absorb(home, other)
                del self.sets[other.set_id]
            self._absorb(home, cand)
            home.last_update_window = window
            home.record(window)
            self._requeue(home)
            if home not in touched:
                touched.append(home)
        return touched

    @staticmethod
    def _absorb(home: AttackEventSet, other: AttackEventSet) -> None:
        known = {ev.tuple4() for ev in home.events}
        for ev in other.events:
            if ev.tuple4() not in known:
                home.events.append(ev)
                known.add(ev.tuple4())
        home.tuples |= other.tuples
        home.creation_window = min(home.creation_window, other.creation_window)
        home.score = max(home.score, other.score)
        home.benign_windows = 0

    # -- reinforcement and decay ---------------------------------------

    def apply_reinforcement(
        self, aset: AttackEventSet, new_score: float, window: int
    ) -> bool:
        """Adopt a higher re-analysis score.  Never lowers.  Returns True
        when the score actually moved up."""
        if new_score <= aset.score:
            aset.record(window)
            return False
        aset.score = new_score
        aset.last_update_window = window
        aset.record(window)
        self._requeue(aset)
        return True

    def apply_decay(
        self,
        window: int,
        activity: dict[str, bool],
        reanalyze: Callable[[AttackEventSet], float] | None = None,
    ) -> list[SetActivity]:
        """Advance per-set benign counters at the close of a window.

        A set with new flagged activity resets its counter.  Otherwise
        the counter ticks; every ``reanalysis_cadence`` benign windows
        the set goes back to the reasoner, and if that yields a lower
        score the set adopts it, else passive decay subtracts
        ``decay_rate``.  Dropping below the secondary band retires the
        set and frees its graph nodes for pruning.

        Sets at or above the complete band are exempt: decay exists to
        walk back suspicions that never pan out, and a set whose chain
        already scored as a complete attack has been alerted on and
        stays pinned for merging and reporting.
        """
        report: list[SetActivity] = []
        for aset in self.active_sets():
            if aset.score >= self.complete_band:
                report.append(SetActivity(aset.set_id, True))
                continue
            if aset.creation_window == window or aset.last_update_window == window:
                # newborn or just merged; activity is implicit this window
                report.append(SetActivity(aset.set_id, True))
                aset.record(window)
                continue
            if activity.get(aset.set_id, False):
                aset.benign_windows = 0
                aset.record(window)
                report.append(SetActivity(aset.set_id, True))
                continue
            aset.benign_windows += 1
            adopted = False
            if (
                reanalyze is not None
                and aset.benign_windows % self.reanalysis_cadence == 0
            ):
                fresh = reanalyze(aset)
                if fresh < aset.score:
                    aset.score = fresh
                    adopted = True
            if not adopted:
                # rounded so repeated decrements land on exact band values
                aset.score = round(aset.score - self.decay_rate, 6)
            aset.record(window)
            self._requeue(aset)
            report.append(SetActivity(aset.set_id, False))
        return report

    # -- persistence ----------------------------------------------------

    def checkpoint_obj(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "next_id": self._next_id,
            "sets": [
                self.sets[sid].to_json_obj() for sid in sorted(self.sets)
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.checkpoint_obj(), sort_keys=True, indent=1) + "\n"
        )

    @classmethod
    def load(
        cls,
        path: str | Path,
        primary_band: float = 0.8,
        secondary_band: float = 0.7,
        decay_rate: float = 0.025,
        reanalysis_cadence: int = 2,
        complete_band: float = 0.9,
    ) -> "GlobalAttackStore":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RuntimeError(f"cannot read checkpoint {path}: {exc}") from exc
        if obj.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise RuntimeError(
                f"checkpoint format {obj.get('format_version')!r} unsupported"
            )
        store = cls(
            primary_band=primary_band,
            secondary_band=secondary_band,
            decay_rate=decay_rate,
            reanalysis_cadence=reanalysis_cadence,
            complete_band=complete_band,
        )
        store._next_id = int(obj["next_id"])
        for entry in obj["sets"]:
            aset = AttackEventSet.from_json_obj(entry)
            store.sets[aset.set_id] = aset
        return store


class RollingGraph:
    """Provenance state carried across windows, under a hard node cap.

    Untagged nodes expire after ``untagged_horizon`` windows without
    being seen.  Tagged nodes stay while some active set owns them and
    that set is younger than ``tagged_retention``; on top of both
    policies a hard cap evicts oldest-seen nodes first (untagged before
    tagged) so occupancy can never exceed the budget.
    """

    def __init__(
        self,
        untagged_horizon: int = 1,
        tagged_retention: int = 8,
        node_cap: int = 200_000,
    ) -> None:
        self.untagged_horizon = untagged_horizon
        self.tagged_retention = tagged_retention
        self.node_cap = node_cap
        self.g = nx.MultiDiGraph()
        self.peak_nodes = 0

    @property
    def node_count(self) -> int:
        return self.g.number_of_nodes()

    def absorb(self, window: int, pg: ProvenanceGraph, tags: TagMap) -> None:
        for node, data in pg.g.nodes(data=True):
            if node in self.g:
                self.g.nodes[node]["last_seen"] = window
                self.g.nodes[node]["tagged"] = (
                    self.g.nodes[node]["tagged"] or node in tags
                )
            else:
                self.g.add_node(
                    node,
                    ntype=data["ntype"],
                    last_seen=window,
                    tagged=node in tags,
                )
        for u, v, data in pg.g.edges(data=True):
            # keyed by event identity so window overlap cannot duplicate
            self.g.add_edge(u, v, key=data["event"].tuple4(), ts=data["ts"])

    def absorb_nodes(
        self, window: int, nodes: Sequence[str], tagged: Sequence[bool]
    ) -> None:
        """Synthetic-load entry point used by soak harnesses."""
        for node, is_tagged in zip(nodes, tagged):
            if node in self.g:
                self.g.nodes[node]["last_seen"] = window
                self.g.nodes[node]["tagged"] = (
                    self.g.nodes[node]["tagged"] or is_tagged
                )
            else:
                self.g.add_node(node, ntype=None, last_seen=window, tagged=is_tagged)

    def prune(self, window: int, store: GlobalAttackStore) -> int:
        """Apply retention policy, then the hard cap.  Returns occupancy."""
        owners: dict[str, int] = {}
        for aset in store.active_sets():
            age = window - aset.creation_window
            if age >= self.tagged_retention:
                continue
            for node in aset.node_ids():
                owners[node] = min(owners.get(node, age), age)

        drop = []
        for node, data in self.g.nodes(data=True):
            stale = window - data["last_seen"] >= self.untagged_horizon
            if data["tagged"]:
                # owned tagged nodes ride out the retention window; the
                # rest fall back to the staleness rule
                if node not in owners and stale:
                    drop.append(node)
            elif stale:
                drop.append(node)
        self.g.remove_nodes_from(drop)

        if self.node_count > self.node_cap:
            ranked = sorted(
                self.g.nodes(data=True),
                key=lambda nd: (nd[1]["tagged"], nd[1]["last_seen"], nd[0]),
            )
            excess = self.node_count - self.node_cap
            self.g.remove_nodes_from([n for n, _ in ranked[:excess]])

        self.peak_nodes = max(self.peak_nodes, self.node_count)
        return self.node_count
