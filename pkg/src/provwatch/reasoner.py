"""Behavioral analysis of suspicious communities.

Each community goes through three stages: a known-behavior screen over
its logs, a per-process look at how behavior deviates, and assembly of
the cross-process chain that gets scored.  The scoring backend is
pluggable: a deterministic rule engine for offline runs and tests, or
a remote chat-completion model for live deployments.  Whatever the
backend says, the response split is fixed: at or above the alert
threshold an alert is emitted along with tagging and tracing; between
the tracking floor and the threshold the chain is only tagged and
traced; below the floor it is dropped.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .correlator import AttackEventSet
from .ingest import LogEvent
from .provgraph import ReducedGraph

KILL_CHAIN_STAGES = (
    "delivery",
    "exploitation",
    "installation",
    "command_and_control",
    "exfiltration",
)

TRACK_FLOOR = 0.7


@dataclass(frozen=True)
class ChainAnalysis:
    """Backend verdict on one event chain."""

    score: float
    summary: str
    tagged: tuple[str, ...]
    kill_chain: dict[str, tuple[int, ...]]
    iocs: tuple[str, ...]


@dataclass(frozen=True)
class AnalysisResult:
    """Full outcome of analyzing one community."""

    community_id: int
    score: float
    summary: str
    tagged: tuple[str, ...]
    temporal_patterns: dict[str, str]
    chain: tuple[LogEvent, ...]
    kill_chain: dict[str, tuple[int, ...]]
    iocs: tuple[str, ...]


@dataclass(frozen=True)
class Alert:
    window_index: int
    confidence: float
    description: str
    processes: tuple[str, ...]
    events: tuple[LogEvent, ...]
    kill_chain: dict[str, tuple[int, ...]]
    iocs: tuple[str, ...]

    def to_json_obj(self) -> dict:
        return {
            "window": self.window_index,
            "confidence": self.confidence,
            "description": self.description,
            "processes": list(self.processes),
            "events": [
                {
                    "pid": ev.process_id,
                    "pname": ev.process_name,
                    "event": ev.event_type,
                    "oid": ev.object_id,
                    "odata": ev.object_data,
                    "ts": ev.ts,
                }
                for ev in self.events
            ],
            "kill_chain": {k: list(v) for k, v in sorted(self.kill_chain.items())},
            "iocs": list(self.iocs),
        }


@dataclass
class Response:
    """What one accepted analysis turns into."""

    alert: Alert | None
    attack_set: AttackEventSet
    tag_scores: dict[str, float]


class AnalysisFailed(RuntimeError):
    """Backend could not produce a valid verdict within its retry budget."""


class ReasonerBackend(Protocol):
    def check_known_behavior(self, logs: Sequence[LogEvent]) -> list[str]: ...

    def analyze_behavior(self, process_id: str, logs: Sequence[LogEvent]) -> str: ...

    def analyze_chain(self, chain: Sequence[LogEvent]) -> ChainAnalysis: ...


# -- deterministic rule backend ----------------------------------------------


def default_rules_path() -> Path:
    return Path(str(resources.files("provwatch").joinpath("rules/default_rules.json")))


class StubBackend:
    """Rule-driven backend: same logs in, same verdict out, every time.

    The rules file declares suspicious process name patterns, write
    paths no ordinary workload touches, and per-stage event signatures.
    A signature's object pattern may reference the named pattern groups
    with ``@external`` or ``@forbidden``, and its process pattern with
    ``@netfacing``.  Chain scores start at the base and climb a fixed
    step per distinct stage present, up to the cap.
    """

    def __init__(self, rules: dict) -> None:
        if rules.get("format_version") != 1:
            raise ValueError("unsupported rules format")
        self._names = [re.compile(p) for p in rules["suspicious_names"]]
        self._forbidden = [re.compile(p) for p in rules["forbidden_write_paths"]]
        self._external = re.compile(rules["external_address"])
        self._netfacing = [re.compile(p) for p in rules["netfacing_processes"]]
        scoring = rules["scoring"]
        self._base = float(scoring["base"])
        self._per_stage = float(scoring["per_stage"])
        self._cap = float(scoring["cap"])
        self._stages: list[tuple[str, str, re.Pattern | None, re.Pattern | None]] = []
        for stage, sigs in rules["stages"].items():
            if stage not in KILL_CHAIN_STAGES:
                raise ValueError(f"unknown kill-chain stage {stage!r}")
            for sig in sigs:
                self._stages.append(
                    (
                        stage,
                        sig["event"],
                        self._compile_ref(sig.get("process_name")),
                        self._compile_ref(sig.get("object_data")),
                    )
                )

    def _compile_ref(self, pattern: str | None):
        if pattern is None:
            return None
        if pattern == "@external":
            return self._external
        if pattern == "@forbidden":
            return _AnyOf(self._forbidden)
        if pattern == "@netfacing":
            return _AnyOf(self._netfacing)
        return re.compile(pattern)

    @classmethod
    def from_file(cls, path: str | Path | None = None) -> "StubBackend":
        rules_file = Path(path) if path else default_rules_path()
        return cls(json.loads(rules_file.read_text()))

    # -- rule matching -------------------------------------------------

    def _stage_hits(self, ev: LogEvent) -> list[str]:
        hits = []
        for stage, etype, name_pat, obj_pat in self._stages:
            if ev.event_type != etype:
                continue
            if name_pat is not None and not name_pat.search(ev.process_name):
                continue
            if obj_pat is not None and not obj_pat.search(ev.object_data):
                continue
            hits.append(stage)
        return hits

    def _forbidden_write(self, ev: LogEvent) -> bool:
        return ev.event_type == "write" and any(
            p.search(ev.object_data) for p in self._forbidden
        )

    def _name_suspicious(self, name: str) -> bool:
        return any(p.search(name) for p in self._names)

    def _process_findings(self, pid: str, logs: Sequence[LogEvent]) -> list[str]:
        findings = []
        names = {ev.process_name for ev in logs if ev.process_id == pid}
        for name in sorted(names):
            if self._name_suspicious(name):
                findings.append(f"process name {name!r} matches a known implant pattern")
        for ev in logs:
            if ev.process_id != pid:
                continue
            if self._forbidden_write(ev):
                findings.append(f"write to protected path {ev.object_data}")
            for stage in self._stage_hits(ev):
                findings.append(
                    f"{ev.event_type} involving {ev.object_data or ev.object_id}"
                    f" fits the {stage} stage"
                )
        return findings

    # -- backend interface ---------------------------------------------

    def check_known_behavior(self, logs: Sequence[LogEvent]) -> list[str]:
        seen: list[str] = []
        for ev in logs:
            if ev.process_id in seen:
                continue
            if self._process_findings(ev.process_id, [e for e in logs if e.process_id == ev.process_id]):
                seen.append(ev.process_id)
        return seen

    def analyze_behavior(self, process_id: str, logs: Sequence[LogEvent]) -> str:
        return "; ".join(self._process_findings(process_id, logs))

    def analyze_chain(self, chain: Sequence[LogEvent]) -> ChainAnalysis:
        stage_hits: dict[str, list[int]] = {}
        iocs: list[str] = []
        for idx, ev in enumerate(chain):
            for stage in self._stage_hits(ev):
                stage_hits.setdefault(stage, []).append(idx)
                if ev.object_data and ev.object_data not in iocs:
                    iocs.append(ev.object_data)
            if self._forbidden_write(ev) and ev.object_data not in iocs:
                iocs.append(ev.object_data)
        suspicious = self.check_known_behavior(chain)
        # rounded so stage counts land on exact band values (0.85, 0.9, ...)
        score = round(min(self._cap, self._base + self._per_stage * len(stage_hits)), 4)
        ordered_stages = [s for s in KILL_CHAIN_STAGES if s in stage_hits]
        if ordered_stages:
            summary = (
                f"chain of {len(suspicious)} suspicious processes covering "
                + ", ".join(ordered_stages)
            )
        else:
            summary = f"suspicious process activity ({len(suspicious)} processes), no staged progression"
        return ChainAnalysis(
            score=score,
            summary=summary,
            tagged=tuple(suspicious),
            kill_chain={s: tuple(stage_hits[s]) for s in ordered_stages},
            iocs=tuple(iocs),
        )


class _AnyOf:
    """Behaves like a compiled pattern over a list of alternatives."""

    def __init__(self, patterns: list[re.Pattern]) -> None:
        self._patterns = patterns

    def search(self, text: str):
        for p in self._patterns:
            m = p.search(text)
            if m:
                return m
        return None


# -- remote chat-completion backend ------------------------------------------


def _load_prompt(name: str) -> str:
    return resources.files("provwatch").joinpath(f"prompts/{name}").read_text()


def _render_logs(logs: Sequence[LogEvent]) -> str:
    lines = [
        f"{ev.ts} {ev.process_id}({ev.process_name}) {ev.event_type} "
        f"{ev.object_id} {ev.object_data}".rstrip()
        for ev in logs
    ]
    return "\n".join(lines)


def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\n", "", text)
        text = re.sub(r"\n?```$", "", text)
    return text.strip()


def _fill(template: str, **values: str) -> str:
    # plain token replacement; templates hold literal JSON braces
    for name, value in values.items():
        template = template.replace("{" + name + "}", value)
    return template


class RemoteBackend:
    """Chat-completion backend with schema-validated JSON replies.

    Replies failing validation (wrong shape, scores outside [0, 1],
    processes not present in the submitted logs) are rejected and the
    request retried; after the retry budget the community is reported
    as analysis-failed and picked up again next window.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        retries: int = 2,
        timeout: float = 30.0,
        transport=None,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.retries = retries
        self.timeout = timeout
        self._transport = transport or self._http_post
        self._prompts = {
            "check": _load_prompt("known_behavior.txt"),
            "behavior": _load_prompt("process_behavior.txt"),
            "chain": _load_prompt("chain_analysis.txt"),
        }

    def _http_post(self, payload: dict) -> str:
        import requests

        resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
        resp.raise_for_status()
        body = resp.json()
        return body["choices"][0]["message"]["content"]

    def _ask(self, prompt: str, validate) -> dict:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        last = "no attempts made"
        for _ in range(self.retries + 1):
            try:
                content = self._transport(payload)
            except Exception as exc:  # transport problems count against retries
                last = f"transport error: {exc}"
                continue
            try:
                obj = json.loads(_strip_fences(content))
            except json.JSONDecodeError as exc:
                last = f"reply is not JSON: {exc.msg}"
                continue
            problem = validate(obj)
            if problem is None:
                return obj
            last = f"schema violation: {problem}"
        raise AnalysisFailed(last)

    def check_known_behavior(self, logs: Sequence[LogEvent]) -> list[str]:
        pids = {ev.process_id for ev in logs}

        def validate(obj):
            procs = obj.get("suspicious_processes")
            if not isinstance(procs, list) or not all(
                isinstance(p, str) for p in procs
            ):
                return "suspicious_processes must be a list of strings"
            ghosts = [p for p in procs if p not in pids]
            if ghosts:
                return f"processes not present in logs: {ghosts}"
            return None

        prompt = _fill(self._prompts["check"], logs=_render_logs(logs))
        return list(self._ask(prompt, validate)["suspicious_processes"])

    def analyze_behavior(self, process_id: str, logs: Sequence[LogEvent]) -> str:
        def validate(obj):
            if not isinstance(obj.get("deviation"), str):
                return "deviation must be a string"
            return None

        prompt = _fill(
            self._prompts["behavior"],
            process_id=process_id,
            logs=_render_logs(logs),
        )
        return self._ask(prompt, validate)["deviation"]

    def analyze_chain(self, chain: Sequence[LogEvent]) -> ChainAnalysis:
        pids = {ev.process_id for ev in chain}

        def validate(obj):
            score = obj.get("score")
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                return "score must be a number"
            if not 0.0 <= float(score) <= 1.0:
                return f"score {score} outside [0, 1]"
            if not isinstance(obj.get("summary"), str):
                return "summary must be a string"
            tagged = obj.get("tagged_processes")
            if not isinstance(tagged, list) or not all(
                isinstance(p, str) for p in tagged
            ):
                return "tagged_processes must be a list of strings"
            ghosts = [p for p in tagged if p not in pids]
            if ghosts:
                return f"tagged processes not in chain: {ghosts}"
            if float(score) >= TRACK_FLOOR and not tagged:
                return "a trackable score needs at least one tagged process"
            kc = obj.get("kill_chain", {})
            if not isinstance(kc, dict):
                return "kill_chain must be an object"
            for stage, idxs in kc.items():
                if stage not in KILL_CHAIN_STAGES:
                    return f"unknown kill-chain stage {stage!r}"
                if not isinstance(idxs, list) or not all(
                    isinstance(i, int) and 0 <= i < len(chain) for i in idxs
                ):
                    return f"bad event indices for stage {stage!r}"
            iocs = obj.get("iocs", [])
            if not isinstance(iocs, list) or not all(
                isinstance(x, str) for x in iocs
            ):
                return "iocs must be a list of strings"
            return None

        prompt = _fill(
            self._prompts["chain"],
            chain=_render_logs(chain),
            stages=", ".join(KILL_CHAIN_STAGES),
        )
        obj = self._ask(prompt, validate)
        score = min(1.0, max(0.0, float(obj["score"])))
        return ChainAnalysis(
            score=score,
            summary=obj["summary"],
            tagged=tuple(obj["tagged_processes"]),
            kill_chain={
                s: tuple(v) for s, v in sorted(obj.get("kill_chain", {}).items())
            },
            iocs=tuple(obj.get("iocs", [])),
        )


# -- three-stage community analysis ------------------------------------------


def extract_process_chain(
    suspicious: Sequence[str],
    patterns: dict[str, str],
    logs: Sequence[LogEvent],
) -> list[LogEvent]:
    """Timestamp-ordered events of the suspicious processes, plus the
    events that link them: forks into them and touches on their objects."""
    suspects = set(suspicious)
    shared_objects = {
        ev.object_id for ev in logs if ev.process_id in suspects
    }
    chain = []
    seen = set()
    for ev in sorted(logs, key=lambda e: (e.ts, e.tuple4())):
        if ev.tuple4() in seen:
            continue
        if (
            ev.process_id in suspects
            or (ev.event_type == "fork" and ev.object_id in suspects)
            or ev.object_id in shared_objects
        ):
            chain.append(ev)
            seen.add(ev.tuple4())
    return chain


def analyze_community(
    community_id: int,
    logs: Sequence[LogEvent],
    community_processes: Sequence[str],
    backend: ReasonerBackend,
    chain_source: Callable[[list[str]], list[LogEvent]] | None = None,
) -> AnalysisResult | None:
    """Run the three analysis stages for one community.

    Returns None when any stage comes back empty: no known-suspicious
    processes, no behavioral deviation, or an empty chain.  Suspicious
    processes outside the community are ignored, which also guards
    against a remote backend inventing identifiers.

    ``chain_source`` maps the suspicious processes to the event chain to
    score; callers holding a graph pass a closure walk so the chain can
    follow the attack past the community boundary.  Without one, the
    chain is linked from ``logs`` alone.
    """
    if not logs:
        return None
    member_procs = set(community_processes)
    suspicious = [
        p for p in backend.check_known_behavior(logs) if p in member_procs
    ]
    if not suspicious:
        return None

    patterns: dict[str, str] = {}
    for pid in suspicious:
        own = [ev for ev in logs if ev.process_id == pid]
        deviation = backend.analyze_behavior(pid, own)
        if deviation:
            patterns[pid] = deviation
    if not patterns:
        return None

    if chain_source is not None:
        chain = chain_source(suspicious)
    else:
        chain = extract_process_chain(suspicious, patterns, logs)
    if not chain:
        return None
    verdict = backend.analyze_chain(chain)
    return AnalysisResult(
        community_id=community_id,
        score=verdict.score,
        summary=verdict.summary,
        tagged=verdict.tagged,
        temporal_patterns=patterns,
        chain=tuple(chain),
        kill_chain=verdict.kill_chain,
        iocs=verdict.iocs,
    )


def reanalyze_set(aset: AttackEventSet, backend: ReasonerBackend) -> ChainAnalysis:
    """Re-score an accumulated set over its full event chain."""
    return backend.analyze_chain(aset.sorted_events())


# -- tracing and response ----------------------------------------------------


def trace(
    reduced: ReducedGraph, tagged_processes: Sequence[str]
) -> tuple[set[str], list[LogEvent]]:
    """Forward-and-backward closure of the tagged processes in the
    reduced graph, with every event on edges inside the closure."""
    g = reduced.pg.g
    seeds = [p for p in tagged_processes if p in g]
    closure: set[str] = set(seeds)
    queue = deque(seeds)
    while queue:
        u = queue.popleft()
        for _, v in g.out_edges(u):
            if v not in closure:
                closure.add(v)
                queue.append(v)
    back = deque(seeds)
    while back:
        u = back.popleft()
        for v, _ in g.in_edges(u):
            if v not in closure:
                closure.add(v)
                back.append(v)
    events = sorted(
        (
            data["event"]
            for u, v, data in g.edges(data=True)
            if u in closure and v in closure
        ),
        key=lambda ev: (ev.ts, ev.tuple4()),
    )
    return closure, events


def assemble_response(
    result: AnalysisResult,
    reduced: ReducedGraph,
    window_index: int,
    alert_threshold: float = 0.8,
) -> Response:
    """Turn an accepted analysis into alert, tags, and traced evidence.

    The caller must have dropped results below the tracking floor.  At
    or above the alert threshold the response carries an alert; below
    it only tagging and tracing happen.
    """
    if result.score < TRACK_FLOOR:
        raise ValueError("responses start at the tracking floor")
    closure, traced = trace(reduced, result.tagged)
    if not traced:
        # degenerate single-node community: fall back to the chain
        traced = list(result.chain)
        closure = closure | {ev.process_id for ev in traced}
    attack_set = AttackEventSet(
        set_id="",
        tuples={ev.tuple4() for ev in traced},
        events=list(traced),
        score=result.score,
        creation_window=window_index,
        last_update_window=window_index,
    )
    alert = None
    if result.score >= alert_threshold:
        alert = Alert(
            window_index=window_index,
            confidence=result.score,
            description=result.summary,
            processes=result.tagged,
            events=result.chain,
            kill_chain=result.kill_chain,
            iocs=result.iocs,
        )
    tag_scores = {node: result.score for node in sorted(closure)}
    return Response(alert=alert, attack_set=attack_set, tag_scores=tag_scores)


def alert_from_reanalysis(
    aset: AttackEventSet, verdict: ChainAnalysis, window_index: int
) -> Alert:
    """Alert for a set whose re-analysis crossed or climbed above the
    alert threshold; evidence is the set's accumulated chain."""
    events = tuple(aset.sorted_events())
    return Alert(
        window_index=window_index,
        confidence=verdict.score,
        description=verdict.summary,
        processes=verdict.tagged,
        events=events,
        kill_chain=verdict.kill_chain,
        iocs=verdict.iocs,
    )
